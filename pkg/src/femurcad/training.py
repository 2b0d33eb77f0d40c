"""Optimization loop: Rectified Adam, plateau LR schedule, early stopping,
stratified splits and the three class-imbalance strategies.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from . import vit
from .tensor import ConfigurationError, NumericError, Tensor


class RAdam:
    """Rectified Adam: the adaptive denominator is disabled while the
    variance-rectification term rho_t stays at or below 4."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.rho_inf = 2.0 / (1.0 - beta2) - 1.0

    def step(self) -> None:
        self.t += 1
        t = self.t
        b1, b2 = self.beta1, self.beta2
        b1t, b2t = b1 ** t, b2 ** t
        rho_t = self.rho_inf - 2.0 * t * b2t / (1.0 - b2t)
        rectified = rho_t > 4.0
        if rectified:
            r_num = (rho_t - 4.0) * (rho_t - 2.0) * self.rho_inf
            r_den = (self.rho_inf - 4.0) * (self.rho_inf - 2.0) * rho_t
            r_t = math.sqrt(r_num / r_den)
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                raise NumericError("RAdam received a non-finite gradient")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / (1.0 - b1t)
            if rectified:
                v_hat = np.sqrt(self.v[i] / (1.0 - b2t))
                update = r_t * m_hat / (v_hat + self.eps)
            else:
                update = m_hat
            p.data = (p.data - self.lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class PlateauSchedule:
    """Multiply lr by `factor` after `patience` consecutive epochs without
    the metric improving by more than `threshold`, clamped at `floor`."""

    def __init__(self, lr: float = 1e-4, factor: float = 0.2, patience: int = 4,
                 floor: float = 1e-6, threshold: float = 1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.floor = floor
        self.threshold = threshold
        self.best: Optional[float] = None
        self.wait = 0

    def update(self, metric: float) -> float:
        if self.best is None:
            # The opening epoch sets the baseline and counts toward the
            # plateau, so N flat epochs from the start trigger at epoch N.
            self.best = metric
            self.wait = 1
        elif metric < self.best - self.threshold:
            self.best = metric
            self.wait = 0
        else:
            self.wait += 1
        if self.wait >= self.patience:
            self.lr = max(self.lr * self.factor, self.floor)
            self.wait = 0
        return self.lr


class EarlyStopping:
    """Stop after `patience` consecutive epochs without a new best loss."""

    def __init__(self, patience: int = 10):
        self.patience = patience
        self.best = math.inf
        self.best_epoch: Optional[int] = None
        self.wait = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience


# -- splits ---------------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class SplitPlan:
    """Per-class id lists for train/val/test plus the seed that made them."""

    train: dict
    val: dict
    test: dict
    seed: int

    def _flat(self, groups: dict) -> list:
        out = []
        for label in sorted(groups, key=str):
            out.extend(groups[label])
        return out

    @property
    def train_ids(self) -> list:
        return self._flat(self.train)

    @property
    def val_ids(self) -> list:
        return self._flat(self.val)

    @property
    def test_ids(self) -> list:
        return self._flat(self.test)


def make_splits(items: Sequence[tuple], seed: int = 0) -> SplitPlan:
    """Stratified split: 15% of each class to test (round half up), then
    15% of the remainder to validation; at least one of each per class."""
    by_class: dict = {}
    for sample_id, label in items:
        by_class.setdefault(label, []).append(sample_id)

    rng = np.random.default_rng(seed)
    train: dict = {}
    val: dict = {}
    test: dict = {}
    for label in sorted(by_class, key=str):
        ids = sorted(by_class[label])
        n = len(ids)
        if n < 3:
            raise ConfigurationError(f"class {label} has only {n} samples; need at least 3")
        order = rng.permutation(n)
        shuffled = [ids[i] for i in order]
        n_test = max(1, _round_half_up(0.15 * n))
        n_val = max(1, _round_half_up(0.15 * (n - n_test)))
        test[label] = shuffled[:n_test]
        val[label] = shuffled[n_test:n_test + n_val]
        train[label] = shuffled[n_test + n_val:]
    return SplitPlan(train=train, val=val, test=test, seed=seed)


# -- class balancing -----------------------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    """Small rotation plus brightness jitter; flips are reserved for the
    side-canonicalization step and never used as augmentation."""

    rotate_deg: float
    brightness: float


@dataclass
class TrainItem:
    sample_id: str
    label: object
    weight: float = 1.0
    augment: Optional[AugmentSpec] = None


BALANCE_STRATEGIES = ("weights", "oversample", "augment")


def balance(strategy: str, items: Sequence[tuple], seed: int = 0) -> list[TrainItem]:
    """Return a weighted or resampled train list per the chosen strategy."""
    if strategy not in BALANCE_STRATEGIES:
        raise ConfigurationError(f"unknown balance strategy {strategy!r}; "
                                 f"expected one of {BALANCE_STRATEGIES}")
    items = list(items)
    if not items:
        raise ConfigurationError("balance needs a non-empty train set")
    by_class: dict = {}
    for sample_id, label in items:
        by_class.setdefault(label, []).append(sample_id)
    counts = {label: len(ids) for label, ids in by_class.items()}
    majority = max(counts.values())
    total = sum(counts.values())

    if strategy == "weights":
        k = len(counts)
        return [TrainItem(sid, lab, weight=total / (k * counts[lab])) for sid, lab in items]

    rng = np.random.default_rng(seed)
    out = [TrainItem(sid, lab) for sid, lab in items]
    for label in sorted(by_class, key=str):
        ids = by_class[label]
        deficit = majority - len(ids)
        if deficit == 0:
            continue
        picks = rng.choice(len(ids), size=deficit, replace=True)
        for pick in picks:
            if strategy == "oversample":
                out.append(TrainItem(ids[pick], label))
            else:
                spec = AugmentSpec(rotate_deg=float(rng.uniform(-5.0, 5.0)),
                                   brightness=float(rng.uniform(0.9, 1.1)))
                out.append(TrainItem(ids[pick], label, augment=spec))
    return out


# -- the training loop -----------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-4
    strategy: str = "oversample"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau_factor: float = 0.2
    plateau_patience: int = 4
    plateau_threshold: float = 1e-4
    lr_floor: float = 1e-6
    early_stop_patience: int = 10
    log_path: Optional[str] = None


@dataclass
class TrainResult:
    log: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_loss: float = math.inf
    stopped_epoch: int = 0
    aborted: bool = False


def _materialize(dataset, items: Sequence[TrainItem], dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    from . import data as data_mod

    images = np.empty((len(items), 1) + dataset.image_shape, dtype=dtype)
    labels = np.empty(len(items), dtype=np.int64)
    weights = np.empty(len(items), dtype=dtype)
    for i, item in enumerate(items):
        img = dataset.image_for(item.sample_id)[0]
        if item.augment is not None:
            img = data_mod.rotate_image(img, item.augment.rotate_deg)
            img = data_mod.adjust_brightness(img, item.augment.brightness)
        images[i, 0] = img
        labels[i] = dataset.label_for(item.sample_id)
        weights[i] = item.weight
    return images, labels, weights


def evaluate(model: vit.ViTModel, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 64) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in inference mode."""
    losses = []
    correct = 0
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            batch = images[start:start + batch_size]
            batch_labels = labels[start:start + batch_size]
            logits, _ = vit.forward_batch(model, batch, mode="infer", want_trace=False)
            targets = T.one_hot(batch_labels, model.config.num_classes, dtype=model.dtype)
            loss = T.cross_entropy(logits, targets)
            losses.append(loss.item() * len(batch))
            correct += int((logits.data.argmax(axis=1) == batch_labels).sum())
    return sum(losses) / len(images), correct / len(images)


def train(model: vit.ViTModel, dataset, plan: SplitPlan, config: TrainConfig) -> TrainResult:
    """Mini-batch RAdam on categorical cross-entropy with the plateau
    schedule and early stopping driven by validation loss. The model ends
    holding the best-validation weights."""
    rng = np.random.default_rng(config.seed)
    dropout_rng = np.random.default_rng(config.seed + 1)

    train_pairs = []
    for lab in sorted(plan.train, key=str):
        train_pairs.extend((sid, lab) for sid in plan.train[lab])
    items = balance(config.strategy, train_pairs, seed=config.seed + 2)
    images, labels, weights = _materialize(dataset, items, model.dtype)
    use_weights = config.strategy == "weights"

    val_ids = plan.val_ids
    val_items = [TrainItem(sid, None) for sid in val_ids]
    val_images, _, _ = _materialize(dataset, val_items, model.dtype)
    val_labels = np.array([dataset.label_for(sid) for sid in val_ids], dtype=np.int64)

    optimizer = RAdam(model.trainable(), lr=config.lr, beta1=config.beta1,
                      beta2=config.beta2, eps=config.eps)
    schedule = PlateauSchedule(lr=config.lr, factor=config.plateau_factor,
                               patience=config.plateau_patience,
                               floor=config.lr_floor, threshold=config.plateau_threshold)
    stopper = EarlyStopping(patience=config.early_stop_patience)

    result = TrainResult()
    best_state = model.snapshot()
    n = len(images)

    for epoch in range(1, config.epochs + 1):
        epoch_lr = optimizer.lr
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue  # head batch norm needs at least two samples
            logits, _ = vit.forward_batch(model, images[idx], mode="train",
                                          dropout_seed=dropout_rng, want_trace=False)
            targets = T.one_hot(labels[idx], model.config.num_classes, dtype=model.dtype)
            loss = T.cross_entropy(logits, targets,
                                   weights=weights[idx] if use_weights else None)
            optimizer.zero_grad()
            T.backward(loss)
            optimizer.step()
            epoch_loss += loss.item() * len(idx)
        train_loss = epoch_loss / n

        if not math.isfinite(train_loss):
            result.aborted = True
            result.stopped_epoch = epoch
            break

        val_loss, val_acc = evaluate(model, val_images, val_labels)
        result.log.append({"epoch": epoch, "lr": epoch_lr, "train_loss": train_loss,
                           "val_loss": val_loss, "val_acc": val_acc})

        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_state = model.snapshot()

        optimizer.lr = schedule.update(val_loss)
        result.stopped_epoch = epoch
        if stopper.update(epoch, val_loss):
            break

    model.load_snapshot(best_state)
    if config.log_path:
        with open(config.log_path, "w") as fh:
            for row in result.log:
                fh.write(json.dumps(row) + "\n")
    return result
