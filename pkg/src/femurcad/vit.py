"""Vision Transformer classifier with attention capture and rollout maps.

The encoder follows the pre-norm design: each block applies layer norm,
multi-head self-attention and an MLP with residual connections. A class
token is prepended to the patch tokens and its final representation
feeds a dense + batch-norm + dropout classification head. Every forward
pass can record the per-layer attention matrices, which the rollout
function chains into a patch-level relevance heatmap.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .tensor import (BatchNormState, ConfigurationError, ContractError,
                     NumericError, ShapeError, Tensor)

DEFAULT_DTYPE = T.DEFAULT_DTYPE

CHECKPOINT_MAGIC = "femurcad-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ViTConfig:
    image_size: int
    patch_size: int
    hidden_size: int
    num_heads: int
    num_layers: int
    mlp_units: int
    head_units: int
    num_classes: int = 7
    channels: int = 1
    dropout_keep: float = 0.5

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ShapeError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.hidden_size % self.num_heads != 0:
            raise ConfigurationError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ConfigurationError(f"dropout_keep must lie in (0, 1], got {self.dropout_keep}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    def param_count(self) -> int:
        """Trainable parameter total as a pure function of the config."""
        h, m, u, k = self.hidden_size, self.mlp_units, self.head_units, self.num_classes
        d, t = self.patch_dim, self.num_tokens
        per_block = 2 * h + 4 * (h * h + h) + 2 * h + (h * m + m) + (m * h + h)
        head = h * u + u + 2 * u + u * k + k
        return (d * h + h) + h + t * h + self.num_layers * per_block + 2 * h + head

    @classmethod
    def preset(cls, name: str) -> "ViTConfig":
        try:
            return PRESETS[name]
        except KeyError:
            raise ConfigurationError(f"unknown preset {name!r}; have {sorted(PRESETS)}") from None


PRESETS = {
    # large-16 backbone with the added 4096-unit head
    "paper-large-16": ViTConfig(image_size=224, patch_size=16, hidden_size=1024,
                                num_heads=16, num_layers=24, mlp_units=4096,
                                head_units=4096, num_classes=7),
    # desk-scale configuration used throughout the tests
    "tiny": ViTConfig(image_size=64, patch_size=8, hidden_size=64, num_heads=4,
                      num_layers=4, mlp_units=128, head_units=64, num_classes=7),
}


@dataclass
class AttentionTrace:
    """Per-layer attention tensors (heads, tokens, tokens) from one forward."""

    layers: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.layers)


class ViTModel:
    """Weights plus config; parameters live in a flat name -> Tensor map."""

    def __init__(self, config: ViTConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.config = config
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.head_bn_state = BatchNormState.for_features(config.head_units, dtype=dtype)
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        h, dtype = cfg.hidden_size, self.dtype

        def weight(name, shape):
            self.params[name] = Tensor(T.truncated_normal(shape, 0.02, rng, dtype), requires_grad=True)

        def zeros(name, shape):
            self.params[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        def ones(name, shape):
            self.params[name] = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

        weight("patch_proj.w", (cfg.patch_dim, h))
        zeros("patch_proj.b", (h,))
        weight("class_token", (h,))
        zeros("pos_embed", (cfg.num_tokens, h))
        for i in range(cfg.num_layers):
            p = f"block{i}."
            ones(p + "ln1.g", (h,))
            zeros(p + "ln1.b", (h,))
            for mat in ("wq", "wk", "wv", "wo"):
                weight(p + "attn." + mat, (h, h))
            for vec in ("bq", "bk", "bv", "bo"):
                zeros(p + "attn." + vec, (h,))
            ones(p + "ln2.g", (h,))
            zeros(p + "ln2.b", (h,))
            weight(p + "mlp.w1", (h, cfg.mlp_units))
            zeros(p + "mlp.b1", (cfg.mlp_units,))
            weight(p + "mlp.w2", (cfg.mlp_units, h))
            zeros(p + "mlp.b2", (h,))
        ones("final_ln.g", (h,))
        zeros("final_ln.b", (h,))
        weight("head.dense.w", (h, cfg.head_units))
        zeros("head.dense.b", (cfg.head_units,))
        ones("head.bn.g", (cfg.head_units,))
        zeros("head.bn.b", (cfg.head_units,))
        weight("head.out.w", (cfg.head_units, cfg.num_classes))
        zeros("head.out.b", (cfg.num_classes,))

    def trainable(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.params.items()}
        state["head.bn.running_mean"] = self.head_bn_state.running_mean.copy()
        state["head.bn.running_var"] = self.head_bn_state.running_var.copy()
        return state

    def load_snapshot(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ShapeError(f"snapshot tensor {name} has shape {arr.shape}, expected {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=self.dtype)
        self.head_bn_state.running_mean = state["head.bn.running_mean"].astype(self.dtype).copy()
        self.head_bn_state.running_var = state["head.bn.running_var"].astype(self.dtype).copy()


# -- patch handling -------------------------------------------------------------


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split (channels, H, W) into non-overlapping row-major patch vectors."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    c, hgt, wid = image.shape[-3:]
    if hgt % patch_size or wid % patch_size:
        raise ShapeError(f"image {hgt}x{wid} not divisible into {patch_size}x{patch_size} patches")
    gh, gw = hgt // patch_size, wid // patch_size
    lead = image.shape[:-3]
    x = image.reshape(*lead, c, gh, patch_size, gw, patch_size)
    axes = tuple(range(len(lead))) + tuple(len(lead) + i for i in (1, 3, 0, 2, 4))
    x = x.transpose(axes)
    return np.ascontiguousarray(x.reshape(*lead, gh * gw, c * patch_size * patch_size))


def unpatchify(patches: np.ndarray, patch_size: int, channels: int = 1) -> np.ndarray:
    """Inverse of patchify: rebuild the (channels, H, W) image."""
    patches = np.asarray(patches)
    num_patches = patches.shape[-2]
    grid = int(round(num_patches ** 0.5))
    if grid * grid != num_patches:
        raise ShapeError(f"{num_patches} patches do not form a square grid")
    x = patches.reshape(grid, grid, channels, patch_size, patch_size)
    x = x.transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(x.reshape(channels, grid * patch_size, grid * patch_size))


def embed(model: ViTModel, patches: Union[np.ndarray, Tensor]) -> Tensor:
    """Project patches, prepend the class token, add positional embeddings."""
    cfg = model.config
    x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=model.dtype))
    single = x.ndim == 2
    if x.shape[-2] != cfg.num_patches or x.shape[-1] != cfg.patch_dim:
        raise ShapeError(f"expected {cfg.num_patches} patches of {cfg.patch_dim} values, got {x.shape}")
    if single:
        x = T.reshape(x, (1,) + x.shape)
    batch = x.shape[0]
    proj = T.add(T.matmul(x, model.params["patch_proj.w"]), model.params["patch_proj.b"])
    cls = T.add(Tensor(np.zeros((batch, 1, cfg.hidden_size), dtype=model.dtype)),
                T.reshape(model.params["class_token"], (1, 1, cfg.hidden_size)))
    tokens = T.concat([cls, proj], axis=1)
    tokens = T.add(tokens, T.reshape(model.params["pos_embed"], (1,) + model.params["pos_embed"].shape))
    return T.reshape(tokens, tokens.shape[1:]) if single else tokens


# -- attention ------------------------------------------------------------------


def mhsa(x: Tensor, wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
         wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor,
         num_heads: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product multi-head self-attention.

    Accepts (tokens, hidden) or (batch, tokens, hidden); returns the
    projected output and the row-stochastic attention matrices with
    shape (heads, tokens, tokens), batched if the input was.
    """
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    b, t, h = x.shape
    if h % num_heads:
        raise ShapeError(f"hidden width {h} not divisible by {num_heads} heads")
    dh = h // num_heads
    scale = 1.0 / np.sqrt(dh)

    def split_heads(y):
        return T.transpose(T.reshape(y, (b, t, num_heads, dh)), (0, 2, 1, 3))

    q = split_heads(T.add(T.matmul(x, wq), bq))
    k = split_heads(T.add(T.matmul(x, wk), bk))
    v = split_heads(T.add(T.matmul(x, wv), bv))
    scores = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), scale)
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, h))
    out = T.add(T.matmul(merged, wo), bo)
    if single:
        out = T.reshape(out, (t, h))
        attn = T.reshape(attn, (num_heads, t, t))
    return out, attn


def _encoder(model: ViTModel, tokens: Tensor, want_trace: bool = True
             ) -> tuple[Tensor, list[np.ndarray]]:
    cfg = model.config
    p = model.params
    x = tokens
    trace: list[np.ndarray] = []
    for i in range(cfg.num_layers):
        blk = f"block{i}."
        normed = T.layer_norm(x, p[blk + "ln1.g"], p[blk + "ln1.b"])
        attn_out, attn = mhsa(normed,
                              p[blk + "attn.wq"], p[blk + "attn.bq"],
                              p[blk + "attn.wk"], p[blk + "attn.bk"],
                              p[blk + "attn.wv"], p[blk + "attn.bv"],
                              p[blk + "attn.wo"], p[blk + "attn.bo"],
                              cfg.num_heads)
        x = T.add(x, attn_out)
        normed = T.layer_norm(x, p[blk + "ln2.g"], p[blk + "ln2.b"])
        hidden = T.gelu(T.add(T.matmul(normed, p[blk + "mlp.w1"]), p[blk + "mlp.b1"]))
        x = T.add(x, T.add(T.matmul(hidden, p[blk + "mlp.w2"]), p[blk + "mlp.b2"]))
        if np.isnan(x.data).any():
            raise NumericError(f"NaN activations after encoder block {i}")
        if want_trace:
            trace.append(attn.data)
    return T.layer_norm(x, p["final_ln.g"], p["final_ln.b"]), trace


def _head(model: ViTModel, features: Tensor, mode: str,
          dropout_seed: Union[int, np.random.Generator, None]) -> Tensor:
    p = model.params
    x = T.add(T.matmul(features, p["head.dense.w"]), p["head.dense.b"])
    x = T.gelu(x)
    x = T.batch_norm(x, p["head.bn.g"], p["head.bn.b"], model.head_bn_state, mode=mode)
    x = T.dropout(x, model.config.dropout_keep, mode=mode, seed=dropout_seed)
    return T.add(T.matmul(x, p["head.out.w"]), p["head.out.b"])


def forward_batch(model: ViTModel, images: np.ndarray, mode: str = "infer",
                  dropout_seed: Union[int, np.random.Generator, None] = None,
                  want_trace: bool = True) -> tuple[Tensor, list[np.ndarray]]:
    """Classify a (batch, channels, H, W) stack; returns logits and traces."""
    cfg = model.config
    images = np.asarray(images, dtype=model.dtype)
    if images.ndim == 3:
        images = images[:, None]
    if images.shape[-2:] != (cfg.image_size, cfg.image_size) or images.shape[1] != cfg.channels:
        raise ShapeError(f"expected (batch, {cfg.channels}, {cfg.image_size}, {cfg.image_size}), "
                         f"got {images.shape}")
    patches = patchify(images, cfg.patch_size)
    tokens = embed(model, patches)
    encoded, trace = _encoder(model, tokens, want_trace=want_trace)
    cls_feat = T.getitem(encoded, (slice(None), 0))
    logits = _head(model, cls_feat, mode, dropout_seed)
    if np.isnan(logits.data).any():
        raise NumericError("NaN activations in classification head")
    return logits, trace


def forward(model: ViTModel, image: np.ndarray, mode: str = "infer",
            dropout_seed: Union[int, np.random.Generator, None] = None
            ) -> tuple[Tensor, AttentionTrace]:
    """Classify one (channels, H, W) image; returns logits and its trace."""
    image = np.asarray(image, dtype=model.dtype)
    if image.ndim == 2:
        image = image[None]
    logits, trace = forward_batch(model, image[None], mode=mode, dropout_seed=dropout_seed)
    layers = [layer[0] for layer in trace]
    return T.reshape(logits, (model.config.num_classes,)), AttentionTrace(layers=layers)


def extract_features(model: ViTModel, image: np.ndarray) -> np.ndarray:
    """Encoder class-token output ahead of the classification head."""
    return extract_features_batch(model, np.asarray(image, dtype=model.dtype)[None])[0]


def extract_features_batch(model: ViTModel, images: np.ndarray) -> np.ndarray:
    cfg = model.config
    images = np.asarray(images, dtype=model.dtype)
    if images.ndim == 3:
        images = images[:, None]
    with T.no_grad():
        patches = patchify(images, cfg.patch_size)
        encoded, _ = _encoder(model, embed(model, patches), want_trace=False)
    return encoded.data[:, 0].copy()


# -- attention rollout ------------------------------------------------------------


def attention_rollout(trace: AttentionTrace) -> np.ndarray:
    """Chain attention across layers into a class-token relevance grid.

    Per layer the heads are averaged, the identity is added for the
    residual path and rows are renormalized; the running product's
    class-token row, restricted to patch tokens, is reshaped to the
    patch grid. The grid sums to the class token's total patch mass.
    """
    if len(trace.layers) == 0:
        raise ContractError("attention rollout needs a non-empty trace")
    tokens = trace.layers[0].shape[-1]
    joint = np.eye(tokens, dtype=np.float64)
    eye = np.eye(tokens, dtype=np.float64)
    for layer in trace.layers:
        avg = layer.astype(np.float64).mean(axis=0) + eye
        avg /= avg.sum(axis=-1, keepdims=True)
        joint = avg @ joint
    patch_mass = joint[0, 1:]
    grid = int(round(len(patch_mass) ** 0.5))
    return patch_mass.reshape(grid, grid).astype(np.float32)


def normalize_heatmap(heatmap: np.ndarray) -> np.ndarray:
    """Scale to [0, 1] for display; an all-zero map stays all zero."""
    peak = float(heatmap.max())
    if peak <= 0.0:
        return np.zeros_like(heatmap)
    return heatmap / peak


# -- checkpoint container -----------------------------------------------------------


def save_checkpoint(model: ViTModel, path) -> None:
    """Textual header (version + config), then raw little-endian float32 buffers."""
    names = list(model.params.keys()) + ["head.bn.running_mean", "head.bn.running_var"]
    arrays = {name: model.params[name].data for name in model.params}
    arrays["head.bn.running_mean"] = model.head_bn_state.running_mean
    arrays["head.bn.running_var"] = model.head_bn_state.running_var

    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    for f in fields(ViTConfig):
        lines.append(f"config {f.name}={getattr(model.config, f.name)}")
    for name in names:
        dims = " ".join(str(d) for d in arrays[name].shape)
        lines.append(f"tensor {name} {dims}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")

    with open(path, "wb") as fh:
        fh.write(header)
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())


def load_checkpoint(path, expected_config: Optional[ViTConfig] = None) -> ViTModel:
    """Rebuild a model from a checkpoint, rejecting config/shape mismatches."""
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        header_end = blob.index(b"\nend\n") + len(b"\nend\n")
    except ValueError:
        raise ConfigurationError(f"{path}: missing checkpoint header terminator") from None
    header_lines = blob[:header_end].decode("ascii").splitlines()
    magic = header_lines[0].split()
    if magic[0] != CHECKPOINT_MAGIC or int(magic[1]) != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")

    config_kwargs: dict = {}
    tensor_specs: list[tuple[str, tuple]] = []
    field_types = {f.name: f.type for f in fields(ViTConfig)}
    for line in header_lines[1:-1]:
        kind, rest = line.split(" ", 1)
        if kind == "config":
            key, value = rest.split("=", 1)
            caster = float if field_types.get(key) == "float" else int
            config_kwargs[key] = caster(value)
        elif kind == "tensor":
            parts = rest.split()
            tensor_specs.append((parts[0], tuple(int(d) for d in parts[1:])))
        else:
            raise ConfigurationError(f"{path}: unknown header line {line!r}")

    config = ViTConfig(**config_kwargs)
    if expected_config is not None and config != expected_config:
        raise ConfigurationError(f"checkpoint config {config} does not match expected {expected_config}")

    model = ViTModel(config, seed=0)
    offset = header_end
    state: dict[str, np.ndarray] = {}
    for name, shape in tensor_specs:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        buf = blob[offset:offset + nbytes]
        if len(buf) != nbytes:
            raise ConfigurationError(f"{path}: truncated buffer for tensor {name}")
        state[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        offset += nbytes
    expected_names = set(model.params) | {"head.bn.running_mean", "head.bn.running_var"}
    if set(state) != expected_names:
        missing = expected_names - set(state)
        extra = set(state) - expected_names
        raise ConfigurationError(f"{path}: tensor set mismatch (missing={sorted(missing)}, "
                                 f"unexpected={sorted(extra)})")
    model.load_snapshot(state)
    return model
