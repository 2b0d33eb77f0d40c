"""Unsupervised evaluation of extracted features: autoencoder pretraining,
kmeans++ seeding, Student's-t soft assignment and KL-divergence refinement.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import metrics as M
from . import tensor as T
from .tensor import ConfigurationError, Tensor
from .training import RAdam

log = logging.getLogger(__name__)

DEFAULT_ENCODER_WIDTHS = (500, 500, 2000)
DEFAULT_LATENT = 10


class Autoencoder:
    """Fully connected autoencoder; the decoder mirrors the encoder and the
    latent and reconstruction layers stay linear."""

    def __init__(self, input_width: int, hidden: Sequence[int] = DEFAULT_ENCODER_WIDTHS,
                 latent: int = DEFAULT_LATENT, seed: int = 0, dtype=T.DEFAULT_DTYPE):
        self.input_width = input_width
        self.hidden = tuple(hidden)
        self.latent = latent
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        enc_widths = [input_width, *self.hidden, latent]
        dec_widths = [latent, *reversed(self.hidden), input_width]
        for prefix, widths in (("enc", enc_widths), ("dec", dec_widths)):
            for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
                self.params[f"{prefix}{i}.w"] = Tensor(
                    T.truncated_normal((w_in, w_out), 0.05, rng, dtype), requires_grad=True)
                self.params[f"{prefix}{i}.b"] = Tensor(
                    np.zeros(w_out, dtype=dtype), requires_grad=True)
        self._enc_layers = len(enc_widths) - 1
        self._dec_layers = len(dec_widths) - 1

    def _stack(self, x: Tensor, prefix: str, layers: int) -> Tensor:
        for i in range(layers):
            x = T.add(T.matmul(x, self.params[f"{prefix}{i}.w"]), self.params[f"{prefix}{i}.b"])
            if i < layers - 1:
                x = T.relu(x)
        return x

    def encode(self, x: Union[np.ndarray, Tensor]) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        return self._stack(x, "enc", self._enc_layers)

    def decode(self, z: Tensor) -> Tensor:
        return self._stack(z, "dec", self._dec_layers)

    def reconstruct(self, x: Union[np.ndarray, Tensor]) -> Tensor:
        return self.decode(self.encode(x))

    def trainable(self) -> list[Tensor]:
        return list(self.params.values())

    def encoder_params(self) -> list[Tensor]:
        return [p for name, p in self.params.items() if name.startswith("enc")]


def _mse(a: Tensor, b: np.ndarray) -> Tensor:
    diff = T.add(a, T.neg(Tensor(b, dtype=a.dtype)))
    return T.tensor_mean(T.mul(diff, diff))


@dataclass
class PretrainHistory:
    losses: list = field(default_factory=list)
    final_error: float = math.nan
    aborted: bool = False


def pretrain_autoencoder(features: np.ndarray, hidden: Sequence[int] = (256,),
                         latent: int = DEFAULT_LATENT, epochs: int = 200,
                         batch_size: int = 256, lr: float = 1e-3,
                         seed: int = 0) -> tuple[Autoencoder, PretrainHistory]:
    """Minimize mean squared reconstruction error with RAdam."""
    features = np.asarray(features, dtype=T.DEFAULT_DTYPE)
    ae = Autoencoder(features.shape[1], hidden=hidden, latent=latent, seed=seed)
    opt = RAdam(ae.trainable(), lr=lr)
    rng = np.random.default_rng(seed + 1)
    history = PretrainHistory()
    n = len(features)
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = features[idx]
            loss = _mse(ae.reconstruct(batch), batch)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            epoch_loss += loss.item() * len(idx)
        epoch_loss /= n
        history.losses.append(epoch_loss)
        if not math.isfinite(epoch_loss):
            history.aborted = True
            log.error("autoencoder pretraining diverged at epoch %d", len(history.losses))
            break
    with T.no_grad():
        history.final_error = _mse(ae.reconstruct(features), features).item()
    return ae, history


# -- kmeans++ ------------------------------------------------------------------------


def kmeans_pp(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 300,
              tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """kmeans++ (D^2) seeding followed by Lloyd iterations to convergence.

    Returns (centroids, assignments); deterministic for a given seed.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    distinct = np.unique(points, axis=0)
    if len(distinct) < k:
        raise ConfigurationError(f"kmeans++ needs at least {k} distinct points, "
                                 f"got {len(distinct)}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        probs = d2 / d2.sum()
        centroids[j] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))

    assignments = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dists = ((points[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        assignments = dists.argmin(axis=1)
        new_centroids = centroids.copy()
        for j in range(k):
            members = points[assignments == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
            else:
                # re-seed an emptied centroid at the point farthest from cover
                farthest = dists.min(axis=1).argmax()
                new_centroids[j] = points[farthest]
        shift = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if shift < tol:
            break
    dists = ((points[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    return centroids, dists.argmin(axis=1)


# -- soft assignment -------------------------------------------------------------------


def soft_assign(latent: Union[np.ndarray, Tensor], centroids: Union[np.ndarray, Tensor],
                alpha: float = 1.0) -> Tensor:
    """Student's-t kernel q_ij = (1 + ||z_i - mu_j||^2 / alpha)^-((alpha+1)/2),
    row-normalized. Differentiable in both the points and the centroids."""
    z = latent if isinstance(latent, Tensor) else Tensor(np.asarray(latent, dtype=T.DEFAULT_DTYPE))
    mu = centroids if isinstance(centroids, Tensor) else Tensor(
        np.asarray(centroids, dtype=z.dtype))
    n, d = z.shape
    k = mu.shape[0]
    diff = T.add(T.reshape(z, (n, 1, d)), T.neg(T.reshape(mu, (1, k, d))))
    dist_sq = T.tensor_sum(T.mul(diff, diff), axis=2)
    kernel = T.pow_const(T.add(T.mul(dist_sq, 1.0 / alpha), Tensor(1.0, dtype=z.dtype)),
                         -(alpha + 1.0) / 2.0)
    return T.div(kernel, T.tensor_sum(kernel, axis=1, keepdims=True))


def target_distribution(q: np.ndarray) -> np.ndarray:
    """Sharpened target p_ij = (q_ij^2 / f_j) / sum_j'(q_ij'^2 / f_j')."""
    q = np.asarray(q, dtype=np.float64)
    weight = q ** 2 / q.sum(axis=0)
    return (weight / weight.sum(axis=1, keepdims=True)).astype(q.dtype)


# -- DEC refinement ----------------------------------------------------------------------


@dataclass
class DecConfig:
    k: int = 7
    alpha: float = 1.0
    tol: float = 0.001          # stop when fewer samples change cluster
    update_interval: int = 140  # gradient steps between target refreshes
    max_updates: int = 40
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0


@dataclass
class DecResult:
    assignments: np.ndarray
    q: np.ndarray
    centroids: np.ndarray
    history: list
    converged: bool
    init_metrics: dict


def _snapshot_metrics(assignments: np.ndarray, labels: Optional[np.ndarray],
                      loss: float, delta: float) -> dict:
    row = {"loss": loss, "delta": delta}
    if labels is not None:
        row["accuracy"] = M.clustering_accuracy(labels, assignments)
        row["nmi"] = M.nmi(labels, assignments)
        row["ari"] = M.ari(labels, assignments)
    return row


def dec_train(autoencoder: Autoencoder, features: np.ndarray,
              labels: Optional[np.ndarray] = None,
              config: DecConfig = DecConfig(),
              initial_centroids: Optional[np.ndarray] = None) -> DecResult:
    """Alternate target refreshes with minibatch KL(p || q) descent on the
    encoder and centroids, stopping when assignments stabilize below tol."""
    features = np.asarray(features, dtype=T.DEFAULT_DTYPE)
    n = len(features)

    def encode_all() -> np.ndarray:
        with T.no_grad():
            return autoencoder.encode(features).data

    z0 = encode_all()
    if initial_centroids is None:
        init_centroids, init_assign = kmeans_pp(z0, config.k, seed=config.seed)
    else:
        init_centroids = np.asarray(initial_centroids, dtype=np.float64)
        init_assign = ((z0[:, None, :] - init_centroids[None]) ** 2).sum(axis=2).argmin(axis=1)

    mu = Tensor(init_centroids.astype(T.DEFAULT_DTYPE), requires_grad=True)
    opt = RAdam(autoencoder.encoder_params() + [mu], lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)

    init_metrics = _snapshot_metrics(init_assign, labels, loss=math.nan, delta=math.nan)
    prev_assign = init_assign
    history: list[dict] = []
    converged = False
    q_data = None

    for update in range(config.max_updates):
        z = encode_all()
        with T.no_grad():
            q_data = soft_assign(z, mu.data, alpha=config.alpha).data
        mass = q_data.sum(axis=0)
        empty = np.where(mass <= 0.0)[0]
        if empty.size:
            with np.errstate(over="ignore"):  # runaway centroids overflow to inf
                dists = ((z[:, None, :] - mu.data[None]) ** 2).sum(axis=2)
            for j in empty:
                farthest = dists.min(axis=1).argmax()
                mu.data[j] = z[farthest]
                log.warning("re-seeded empty cluster %d from the farthest point", j)
            with T.no_grad():
                q_data = soft_assign(z, mu.data, alpha=config.alpha).data
        p_data = target_distribution(q_data)
        assignments = q_data.argmax(axis=1)
        with T.no_grad():
            kl_now = T.kl_divergence(Tensor(p_data), Tensor(q_data)).item()
        delta = float((assignments != prev_assign).mean())
        history.append(_snapshot_metrics(assignments, labels, loss=kl_now, delta=delta))
        if delta < config.tol:
            converged = True
            break
        prev_assign = assignments

        for _ in range(config.update_interval):
            idx = rng.integers(0, n, size=min(config.batch_size, n))
            z_batch = autoencoder.encode(features[idx])
            q_batch = soft_assign(z_batch, mu, alpha=config.alpha)
            loss = T.kl_divergence(Tensor(p_data[idx]), q_batch)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            if not np.isfinite(mu.data).all():
                raise T.NumericError("cluster centroids became non-finite")

    final_assign = q_data.argmax(axis=1) if q_data is not None else prev_assign
    return DecResult(assignments=final_assign, q=q_data, centroids=mu.data.copy(),
                     history=history, converged=converged, init_metrics=init_metrics)


# -- feature-vector files and exports -------------------------------------------------------

FEATURE_MAGIC = "femurcad-features"


def save_features(path, features: np.ndarray) -> None:
    """Textual (count, width) header, then raw little-endian float32 rows."""
    features = np.asarray(features, dtype="<f4")
    if features.ndim != 2:
        raise ConfigurationError(f"feature file wants a (count, width) matrix, got {features.shape}")
    header = f"{FEATURE_MAGIC} {features.shape[0]} {features.shape[1]}\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(features).tobytes())


def load_features(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    newline = blob.index(b"\n")
    magic, count, width = blob[:newline].decode("ascii").split()
    if magic != FEATURE_MAGIC:
        raise ConfigurationError(f"{path}: not a feature-vector file")
    data = np.frombuffer(blob[newline + 1:], dtype="<f4")
    return data.reshape(int(count), int(width)).copy()


def export_assignments(path, ids: Sequence[str], q: np.ndarray) -> None:
    """CSV rows of (sample_id, cluster, q_0..q_{K-1})."""
    q = np.asarray(q)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "cluster"] + [f"q_{j}" for j in range(q.shape[1])])
        for sid, row in zip(ids, q):
            writer.writerow([sid, int(row.argmax())] + [f"{v:.6f}" for v in row])
