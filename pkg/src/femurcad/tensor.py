"""Dense float32 tensors with reverse-mode automatic differentiation.

Every numeric operation in the package runs through the :class:`Tensor`
type defined here. Operations record their inputs and a local gradient
rule on the output tensor; ``backward`` on a scalar loss replays those
records in reverse topological order and accumulates gradients into
every ``requires_grad`` ancestor.

Storage is float32 by default. A float64 mode exists so gradient checks
can run at a precision where central finite differences are trustworthy.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf as _erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

LOG_EPS = 1e-12  # floor inside log/KL guards
BN_EPS = 1e-5  # batch/layer norm variance guard


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConfigurationError(ValueError):
    """An operation was configured with invalid parameters."""


class ContractError(RuntimeError):
    """A caller violated an operation's usage contract."""


class LabelError(ValueError):
    """A class label or index lies outside the valid range."""


# Per-thread so concurrent read-only forwards cannot toggle each other's mode.
_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable gradient recording inside the block (inference paths)."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """N-dimensional array plus optional gradient bookkeeping.

    ``data`` is stored row-major with a floating dtype (float32 unless
    the caller asks otherwise). ``grad`` stays ``None`` until a backward
    pass reaches this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backward_done")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data: np.ndarray = np.ascontiguousarray(arr, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._backward_done = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autograd plumbing ---------------------------------------------------

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = grad
        else:
            self.grad = self.grad + grad

    def backward(self) -> None:
        """Populate ``grad`` for every requires_grad ancestor of this scalar."""
        backward(self)

    # Operator sugar; the named functions below do the real work.

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def _as_tensor(value: ArrayLike, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _make_node(data: np.ndarray, parents: Iterable[Tensor],
               backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


@dataclass
class Tape:
    """Reverse-topological record of the operations below one root tensor."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(nodes=order)

    def backward(self, root: Tensor) -> None:
        root._accumulate(np.ones_like(root.data))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # Drop closures so intermediate buffers can be collected; a second
        # backward over this graph is a caller bug and is rejected above.
        for node in self.nodes:
            if node is not root:
                node._backward = None
                node._parents = ()


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise ContractError("backward was already called on this loss; rebuild the graph or reset")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any requires_grad tensor")
    loss._backward_done = True
    Tape.from_root(loss).backward(loss)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out_data = a.data + b.data

    def _bw(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad, b.shape))

    return _make_node(out_data, (a, b), _bw)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def _bw(grad):
        if a.requires_grad:
            a._accumulate(-grad)

    return _make_node(-a.data, (a,), _bw)


def mul(a: Tensor, b: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out_data = a.data * b.data

    def _bw(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad * a.data, b.shape))

    return _make_node(out_data, (a, b), _bw)


def div(a: Tensor, b: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out_data = a.data / b.data

    def _bw(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-grad * a.data / (b.data * b.data), b.shape))

    return _make_node(out_data, (a, b), _bw)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    a = _as_tensor(a)
    exponent = float(exponent)
    out_data = a.data ** exponent

    def _bw(grad):
        if a.requires_grad:
            a._accumulate(grad * exponent * a.data ** (exponent - 1.0))

    return _make_node(out_data, (a,), _bw)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def _bw(grad):
        if a.requires_grad:
            a._accumulate(grad * out_data)

    return _make_node(out_data, (a,), _bw)


def log(a: Tensor) -> Tensor:
    """Natural log with an epsilon floor so zero inputs stay finite."""
    a = _as_tensor(a)
    floored = np.maximum(a.data, LOG_EPS)
    out_data = np.log(floored)

    def _bw(grad):
        if a.requires_grad:
            a._accumulate(grad / floored)

    return _make_node(out_data, (a,), _bw)


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def _bw(grad):
        if a.requires_grad:
            a._accumulate(grad * 0.5 / np.maximum(out_data, LOG_EPS))

    return _make_node(out_data, (a,), _bw)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0)

    def _bw(grad):
        if a.requires_grad:
            a._accumulate(grad * (a.data > 0))

    return _make_node(out_data, (a,), _bw)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian error linear unit: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    a = _as_tensor(a)
    erf_term = _erf(a.data * _INV_SQRT2)
    out_data = (0.5 * a.data * (1.0 + erf_term)).astype(a.dtype)

    def _bw(grad):
        if a.requires_grad:
            pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
            a._accumulate(grad * (0.5 * (1.0 + erf_term) + a.data * pdf))

    return _make_node(out_data, (a,), _bw)


# -- shape manipulation -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise ShapeError(f"matmul: inner extents do not match for shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def _bw(grad):
        if a.requires_grad:
            ga = grad @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.outer(grad, b.data)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ grad if a.ndim > 1 else np.outer(a.data, grad)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make_node(out_data, (a, b), _bw)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def _bw(grad):
        if a.requires_grad:
            a._accumulate(grad.reshape(a.shape))

    return _make_node(out_data, (a,), _bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _as_tensor(a)
    out_data = np.transpose(a.data, axes)

    def _bw(grad):
        if a.requires_grad:
            inv = None if axes is None else np.argsort(axes)
            a._accumulate(np.transpose(grad, inv))

    return _make_node(out_data, (a,), _bw)


def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    a = _as_tensor(a)
    out_data = np.swapaxes(a.data, axis1, axis2)

    def _bw(grad):
        if a.requires_grad:
            a._accumulate(np.swapaxes(grad, axis1, axis2))

    return _make_node(out_data, (a,), _bw)


def getitem(a: Tensor, index) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data[index]

    def _bw(grad):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, index, grad)
            a._accumulate(full)

    return _make_node(np.ascontiguousarray(out_data), (a,), _bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bw(grad):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * grad.ndim
                idx[axis] = slice(start, stop)
                t._accumulate(grad[tuple(idx)])

    return _make_node(out_data, tensors, _bw)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(grad):
        if a.requires_grad:
            g = grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype))

    return _make_node(np.asarray(out_data, dtype=a.dtype), (a,), _bw)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# -- neural-network operations ------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-stochastic softmax along `axis`, stabilized by max subtraction."""
    x = _as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def _bw(grad):
        if x.requires_grad:
            inner = (grad * out_data).sum(axis=axis, keepdims=True)
            x._accumulate(out_data * (grad - inner))

    return _make_node(out_data.astype(x.dtype), (x,), _bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = BN_EPS) -> Tensor:
    """Normalize over the last axis, then apply the learned scale and shift."""
    x = _as_tensor(x)
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out_data = (gamma.data * xhat + beta.data).astype(x.dtype)

    def _bw(grad):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(grad * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(grad, beta.shape))
        if x.requires_grad:
            g = grad * gamma.data
            gm = g.mean(axis=-1, keepdims=True)
            gx = (g * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv_std * (g - gm - xhat * gx))

    return _make_node(out_data, (x, gamma, beta), _bw)


@dataclass
class BatchNormState:
    """Running statistics carried across training steps (not trainable)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = BN_EPS

    @classmethod
    def for_features(cls, num_features: int, dtype=DEFAULT_DTYPE) -> "BatchNormState":
        return cls(running_mean=np.zeros(num_features, dtype=dtype),
                   running_var=np.ones(num_features, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str = "train") -> Tensor:
    """Batch normalization over axis 0 of a (batch, features) tensor.

    Train mode normalizes with batch statistics and nudges the running
    stats; infer mode normalizes with the running stats only.
    """
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"batch_norm expects (batch, features), got {x.shape}")
    if mode == "train":
        if x.shape[0] < 2:
            raise ConfigurationError("batch_norm in train mode needs batch size >= 2")
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        m = state.momentum
        n = x.shape[0]
        unbiased = var * n / max(n - 1, 1)
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)
    elif mode == "infer":
        mean = state.running_mean
        var = state.running_var
    else:
        raise ConfigurationError(f"unknown batch_norm mode {mode!r}")

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean) * inv_std
    out_data = (gamma.data * xhat + beta.data).astype(x.dtype)

    def _bw(grad):
        if gamma.requires_grad:
            gamma._accumulate((grad * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(grad.sum(axis=0))
        if x.requires_grad:
            g = grad * gamma.data
            if mode == "train":
                gm = g.mean(axis=0)
                gx = (g * xhat).mean(axis=0)
                x._accumulate(inv_std * (g - gm - xhat * gx))
            else:
                x._accumulate(inv_std * g)

    return _make_node(out_data, (x, gamma, beta), _bw)


def dropout(x: Tensor, keep_prob: float, mode: str = "train",
            seed: Union[int, np.random.Generator, None] = None) -> Tensor:
    """Zero elements with probability 1 - keep_prob, rescaling survivors.

    Inference mode is the identity. A fixed seed gives a fixed mask, so
    training runs are reproducible.
    """
    x = _as_tensor(x)
    if not 0.0 < keep_prob <= 1.0:
        raise ConfigurationError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if mode == "infer" or keep_prob == 1.0:
        def _bw_id(grad):
            if x.requires_grad:
                x._accumulate(grad)
        return _make_node(x.data.copy(), (x,), _bw_id)
    if mode != "train":
        raise ConfigurationError(f"unknown dropout mode {mode!r}")

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / np.asarray(keep_prob, dtype=x.dtype)
    out_data = x.data * mask

    def _bw(grad):
        if x.requires_grad:
            x._accumulate(grad * mask)

    return _make_node(out_data, (x,), _bw)


def one_hot(indices: Sequence[int], num_classes: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Encode integer class indices as one-hot rows."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= num_classes):
        bad = int(idx.min() if idx.min() < 0 else idx.max())
        raise LabelError(f"class index {bad} outside [0, {num_classes})")
    out = np.zeros((idx.size, num_classes), dtype=dtype)
    out[np.arange(idx.size), idx] = 1
    return out


def cross_entropy(logits: Tensor, targets: ArrayLike,
                  weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean categorical cross-entropy between logits and one-hot targets.

    With per-sample `weights` the mean becomes weight-normalized, which
    keeps the loss scale comparable across balancing strategies.
    """
    logits = _as_tensor(logits)
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.dtype)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise ShapeError(f"cross_entropy expects matching (batch, classes), got {logits.shape} and {t.shape}")
    rows_ok = np.allclose(t.sum(axis=1), 1.0, atol=1e-5) and ((t == 0) | (t == 1)).all()
    if not rows_ok:
        raise ContractError("cross_entropy targets must be one-hot rows")
    batch = logits.shape[0]
    if weights is None:
        w = np.ones(batch, dtype=logits.dtype)
    else:
        w = np.asarray(weights, dtype=logits.dtype)
    w_total = w.sum()

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    per_sample = -(t * log_probs).sum(axis=1)
    loss = float((w * per_sample).sum() / w_total)

    def _bw(grad):
        if logits.requires_grad:
            probs = np.exp(log_probs)
            g = (probs - t) * (w / w_total)[:, None]
            logits._accumulate(g * grad.reshape(()))

    return _make_node(np.asarray(loss, dtype=logits.dtype), (logits,), _bw)


def kl_divergence(p: ArrayLike, q: Tensor) -> Tensor:
    """Row-averaged KL(p || q) for row-normalized distributions.

    `p` is treated as a constant target unless passed as a requires_grad
    tensor; zero entries in `q` are floored at LOG_EPS.
    """
    p = _as_tensor(p)
    q = _as_tensor(q, p.dtype)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence shapes differ: {p.shape} vs {q.shape}")
    p2 = p.data.reshape(-1, p.shape[-1]) if p.ndim > 1 else p.data.reshape(1, -1)
    rows = p2.shape[0]
    pf = np.maximum(p.data, 0.0)
    qf = np.maximum(q.data, LOG_EPS)
    ratio_log = np.log(np.maximum(pf, LOG_EPS)) - np.log(qf)
    per_elem = np.where(pf > 0, pf * ratio_log, 0.0)
    loss = float(per_elem.sum() / rows)

    def _bw(grad):
        scale = grad.reshape(()) / rows
        if q.requires_grad:
            q._accumulate(np.where(pf > 0, -pf / qf, 0.0) * scale)
        if p.requires_grad:
            p._accumulate(np.where(pf > 0, ratio_log + 1.0, 0.0) * scale)

    return _make_node(np.asarray(loss, dtype=q.dtype), (p, q), _bw)


# -- initializers --------------------------------------------------------------


def truncated_normal(shape: tuple, std: float, rng: np.random.Generator,
                     dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Normal draws re-sampled until they land within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out.astype(dtype)
