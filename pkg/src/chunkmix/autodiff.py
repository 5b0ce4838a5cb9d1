"""Small reverse-mode autodiff engine over dense numpy arrays.

Every operation the networks need lives here: elementwise arithmetic,
matmul, activations, NCHW convolution, nearest-neighbour upsampling, batch
normalization and channel concatenation.  Each op records its parents and a
closure that maps the upstream gradient to parent gradients; ``backward``
walks the recorded graph once in reverse topological order.

Only two broadcasting forms are supported: scalar-vs-tensor and equal
shapes.  Anything else raises :class:`ShapeError`.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

_DTYPES = {"f64": np.float64, "f32": np.float32}
_dtype = np.float64
_ids = itertools.count()

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        names = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {names}")


def set_precision(mode: str) -> None:
    """Select the floating type used for new tensors: ``"f64"`` or ``"f32"``."""
    global _dtype
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[mode]


def get_precision() -> str:
    return "f64" if _dtype is np.float64 else "f32"


@contextlib.contextmanager
def precision(mode: str):
    old = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(old)


class Tensor:
    """Dense array with an optional gradient slot and a graph handle."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op=""):
        self.data = np.ascontiguousarray(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = next(_ids)
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else None, _op=op)


# ---------------------------------------------------------------------------
# elementwise

def _check_broadcast(op, a: Tensor, b: Tensor):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.full(shape, g.sum(), dtype=g.dtype)


def elementwise(kind: str, a, b) -> Tensor:
    """``add``/``sub``/``mul`` with scalar-or-equal-shape broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(kind, a, b)
    if kind == "add":
        out = a.data + b.data

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    elif kind == "sub":
        out = a.data - b.data

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    elif kind == "mul":
        out = a.data * b.data

        def back(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    else:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return _make(out, (a, b), back, kind)


def add(a, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a, b) -> Tensor:
    return elementwise("mul", a, b)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Pick ``a`` where ``mask`` is true, else ``b``; values are copied, not blended."""
    a, b = _as_tensor(a), _as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    if not (a.shape == b.shape == mask.shape):
        raise ShapeError("where", mask.shape, a.shape, b.shape)
    out = np.where(mask, a.data, b.data)

    def back(g):
        zero = np.zeros_like(g)
        return np.where(mask, g, zero), np.where(mask, zero, g)

    return _make(out, (a, b), back, "where")


def leaky_relu(a: Tensor, leak: float = 0.2) -> Tensor:
    if not 0.0 <= leak < 1.0:
        raise ValueError(f"leak must lie in [0, 1), got {leak}")
    pos = a.data >= 0
    slope = np.where(pos, 1.0, leak).astype(a.data.dtype)
    out = a.data * slope
    return _make(out, (a,), lambda g: (g * slope,), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient is zero where clamping was active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# reductions and shape

def tsum(a: Tensor) -> Tensor:
    return _make(a.data.sum(), (a,), lambda g: (np.full(a.shape, g, dtype=a.data.dtype),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _make(a.data.mean(), (a,), lambda g: (np.full(a.shape, g / n, dtype=a.data.dtype),), "mean")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def bias_add(a: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature (N, F) or per-channel (N, C, H, W) bias of length F or C."""
    if bias.data.ndim != 1 or a.data.ndim < 2 or a.shape[1] != bias.shape[0]:
        raise ShapeError("bias_add", a.shape, bias.shape)
    view = (1, -1) + (1,) * (a.data.ndim - 2)
    axes = (0,) + tuple(range(2, a.data.ndim))
    out = a.data + bias.data.reshape(view)
    return _make(out, (a, bias), lambda g: (g, g.sum(axis=axes)), "bias_add")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis, order preserved."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors:
        if t.data.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError("concat_channels", ref, t.shape)
    if len(tensors) == 1:
        return tensors[0]
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=1)), "concat")


# ---------------------------------------------------------------------------
# convolution and resampling

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an (O, C, k, k) kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError("conv2d", x.shape, kernel.shape)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    o, _, k, k2 = kernel.shape
    if k != k2:
        raise ShapeError("conv2d", x.shape, kernel.shape)
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d", x.shape, kernel.shape)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # receptive fields as columns: (C*k*k, N*Ho*Wo); this layout keeps the copies cache friendly
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
    kmat = kernel.data.reshape(o, c * k * k)
    out = (kmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        dk = (g2 @ cols.T).reshape(kernel.shape)
        dcols = (kmat.T @ g2).reshape(c, k, k, n, ho, wo)
        dxp = np.zeros((c, n) + xp.shape[2:], dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
        dxp = dxp.transpose(1, 0, 2, 3)
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        return dx, dk

    return _make(out, (x, kernel), back, "conv2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NCHW tensor."""
    if x.data.ndim != 4:
        raise ShapeError("upsample2x", x.shape)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def back(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), back, "upsample2x")


# ---------------------------------------------------------------------------
# normalization

class BatchNormState:
    """Running mean/variance for one normalization layer."""

    def __init__(self, channels: int):
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)


def batchnorm(x: Tensor, scale: Tensor, shift: Tensor, mode: str = "train",
              state: BatchNormState | None = None, update_stats: bool = True) -> Tensor:
    """Per-channel normalization over batch (and spatial) axes.

    ``x`` is (N, C) or (N, C, H, W).  In ``"train"`` mode batch statistics are
    used and, when ``state`` is given and ``update_stats`` is set, folded into
    the running averages with momentum ``BN_MOMENTUM``.  ``"infer"`` mode
    normalizes with the running statistics.
    """
    if x.data.ndim not in (2, 4) or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError("batchnorm", x.shape, scale.shape, shift.shape)
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    gamma = scale.data.reshape(view)
    beta = shift.data.reshape(view)

    if mode == "infer":
        if state is None:
            raise ValueError("infer mode needs running statistics")
        inv = 1.0 / np.sqrt(state.running_var.astype(x.data.dtype) + BN_EPS)
        xhat = (x.data - state.running_mean.astype(x.data.dtype).reshape(view)) * inv.reshape(view)

        def back(g):
            return (g * gamma * inv.reshape(view), (g * xhat).sum(axis=axes), g.sum(axis=axes))

        return _make(gamma * xhat + beta, (x, scale, shift), back, "batchnorm")

    if mode != "train":
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    if x.shape[0] < 2:
        raise ShapeError("batchnorm(train) needs batch >= 2", x.shape)
    m = x.size // x.shape[1]
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * inv
    if state is not None and update_stats:
        unbiased = var.reshape(-1) * (m / max(m - 1, 1))
        state.running_mean = BN_MOMENTUM * state.running_mean + (1 - BN_MOMENTUM) * mu.reshape(-1)
        state.running_var = BN_MOMENTUM * state.running_var + (1 - BN_MOMENTUM) * unbiased

    def back(g):
        dxhat = g * gamma
        dx = inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(gamma * xhat + beta, (x, scale, shift), back, "batchnorm")


# ---------------------------------------------------------------------------
# graph traversal

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, parents before children."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves listed in ``leaves`` that the loss does not reach get a zero
    gradient.  Existing ``.grad`` values are overwritten, not summed.
    """
    if loss.size != 1:
        raise ShapeError("backward expects a scalar loss", loss.shape)
    leaves = list(leaves) if leaves is not None else []
    for t in leaves:
        t.grad = np.zeros_like(t.data)
    if not loss.requires_grad:
        return
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg


def analytic_gradient(f: Callable[[Tensor], Tensor], x0) -> np.ndarray:
    """Backprop gradient of scalar ``f`` at ``x0`` in the current precision."""
    x = Tensor(np.array(x0, dtype=_dtype), requires_grad=True)
    backward(f(x), [x])
    return x.grad


def numeric_gradient(f: Callable[[Tensor], Tensor], x0, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x0`` in the current precision."""
    x0 = np.array(x0, dtype=_dtype)
    numeric = np.empty(x0.size, dtype=_dtype)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(Tensor(x0)).item()
        flat[i] = old - h
        fm = f(Tensor(x0)).item()
        flat[i] = old
        numeric[i] = (fp - fm) / (2 * h)
    return numeric.reshape(x0.shape)


def relative_error(analytic, numeric) -> float:
    """Max over coordinates of ``|a - c| / max(1e-8, |a| + |c|)``."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    c = np.asarray(numeric, dtype=np.float64).reshape(-1)
    err = np.abs(a - c) / np.maximum(1e-8, np.abs(a) + np.abs(c))
    return float(err.max()) if err.size else 0.0


def grad_check(f: Callable[[Tensor], Tensor], x0, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences for scalar ``f``."""
    return relative_error(analytic_gradient(f, x0), numeric_gradient(f, x0, h))
