"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation computes its result eagerly with numpy and,
when a Tape is active and an input requires gradients, records a node whose
backward closure maps the output gradient to input gradients. Backward
replays nodes in strict reverse recording order; gradients accumulate
additively, and the caller is responsible for zeroing them between steps.
"""

from __future__ import annotations

import math
import threading

import numpy as np

from . import _kernels as kn
from .errors import ConfigError, ContractError, NumericError, ShapeMismatchError

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715

ACTIVATION_KINDS = ("relu", "leaky_relu", "elu", "gelu", "tanh")
LEAKY_SLOPE = 0.01
ELU_ALPHA = 1.0


class Tensor:
    """Dense real-valued array with an optional gradient slot.

    Values are 64-bit reals in row-major order. Construction from external
    data rejects NaN/Inf; internally produced results skip the check (a NaN
    that appears mid-training surfaces through the loss/forward checks).
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed from external input holds NaN/Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        """Wrap an internally produced array without copy or finiteness check."""
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.node_id = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def _current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Wengert list of recorded operations, replayed strictly in reverse.

    Use as a context manager around a forward pass; a Tensor/Tape pair is
    confined to one thread, distinct tapes may run concurrently.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape exited out of order")
        stack.pop()

    def _record(self, out: Tensor, inputs: tuple, backward_fn) -> None:
        out.node_id = len(self._nodes)
        self._nodes.append(_Node(out, inputs, backward_fn))

    def __len__(self) -> int:
        return len(self._nodes)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate .grad on every requires_grad leaf reachable from loss.

    Adjoints of tape-recorded intermediates are transient; persistent .grad
    lives on leaves only. Repeated calls without zeroing accumulate there;
    callers zero grads per step.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node_id is None:
        if loss.requires_grad:
            loss._accumulate(np.ones_like(loss.data))
        return
    adjoints: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for idx in range(len(tape._nodes) - 1, -1, -1):
        out_grad = adjoints.pop(idx, None)
        if out_grad is None:
            continue
        node = tape._nodes[idx]
        grads = node.backward_fn(out_grad)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t.node_id is not None:
                prev = adjoints.get(t.node_id)
                # non-inplace: backward closures may hand back shared arrays
                adjoints[t.node_id] = g if prev is None else prev + g
            else:
                t._accumulate(g)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _emit(result: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(result, req)
    if req:
        tape = _current_tape()
        if tape is not None:
            tape._record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced or expanded."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "add")
    ash, bsh = a.shape, b.shape

    def bwd(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _emit(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "sub")
    ash, bsh = a.shape, b.shape

    def bwd(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _emit(a.data - b.data, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), bwd)


def scale(a, c: float) -> Tensor:
    """Multiply by a plain (non-differentiated) scalar constant."""
    a = _as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# matrix products


def matmul(a, b) -> Tensor:
    """C = A @ B with leading batch axes broadcast; dA = dC Bᵀ, dB = Aᵀ dC."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatchError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    if bd.ndim == 2 and ad.ndim > 2:
        # collapse leading axes into one GEMM instead of a stack of small ones
        k, n = bd.shape
        lead = ad.shape[:-1]
        a2 = np.ascontiguousarray(ad).reshape(-1, k)
        out = (a2 @ bd).reshape(lead + (n,))

        def bwd(g):
            g2 = np.ascontiguousarray(g).reshape(-1, n)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _emit(out, (a, b), bwd)

    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeMismatchError(f"matmul batch axes do not broadcast: {a.shape} @ {b.shape}") from None

    def _reduce(g, target_shape):
        extra = g.ndim - len(target_shape)
        if extra > 0:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(
            i for i in range(len(target_shape) - 2) if target_shape[i] == 1 and g.shape[i] != 1
        )
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return g

    def bwd(g):
        ga = _reduce(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape)
        gb = _reduce(np.matmul(ad.swapaxes(-1, -2), g), bd.shape)
        return ga, gb

    return _emit(out, (a, b), bwd)


def affine(x, weight, bias) -> Tensor:
    """x @ weight + bias in one op (bias over the last axis)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    xd, wd, bd = x.data, weight.data, bias.data
    if xd.ndim < 2 or wd.ndim != 2 or xd.shape[-1] != wd.shape[0]:
        raise ShapeMismatchError(f"affine: {x.shape} @ {weight.shape}")
    if bd.shape != (wd.shape[1],):
        raise ShapeMismatchError(f"affine bias {bias.shape} must be ({wd.shape[1]},)")
    k, n = wd.shape
    lead = xd.shape[:-1]
    x2 = np.ascontiguousarray(xd).reshape(-1, k)
    out = x2 @ wd
    out += bd
    out = out.reshape(lead + (n,))

    def bwd(g):
        g2 = np.ascontiguousarray(g).reshape(-1, n)
        return (g2 @ wd.T).reshape(xd.shape), x2.T @ g2, g2.sum(axis=0)

    return _emit(out, (x, weight, bias), bwd)


# ---------------------------------------------------------------------------
# normalization


def softmax(x, axis: int = -1, prescale: float = 1.0) -> Tensor:
    """Max-shifted softmax along one axis; slices sum to one.

    prescale folds a constant multiplier into the op: softmax(prescale * x).
    """
    x = _as_tensor(x)
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ConfigError(f"softmax axis {axis} out of bounds for {x.shape}")
    prescale = float(prescale)
    if axis % nd == nd - 1:
        s = kn.softmax_lastaxis_forward(x.data if prescale == 1.0 else prescale * x.data)

        def bwd(g):
            gx = kn.softmax_lastaxis_backward(g, s)
            if prescale != 1.0:
                gx *= prescale
            return (gx,)

        return _emit(s, (x,), bwd)

    xd = x.data if prescale == 1.0 else prescale * x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        gx = (g - (g * s).sum(axis=axis, keepdims=True)) * s
        if prescale != 1.0:
            gx *= prescale
        return (gx,)

    return _emit(s, (x,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatchError(
            f"layer_norm gain/bias {gain.shape}/{bias.shape} must be ({d},) for input {x.shape}"
        )
    out, xhat, inv = kn.layernorm_forward(x.data, gain.data, bias.data, eps)
    gd = gain.data
    x_shape = x.shape

    def bwd(g):
        return kn.layernorm_backward(g, xhat, inv, gd, x_shape)

    return _emit(out, (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def activation(x, kind: str) -> Tensor:
    """Elementwise nonlinearity with its derivative on the tape.

    gelu is the tanh approximation; leaky slope 0.01, elu alpha 1.0.
    Derivatives are computed lazily inside the backward closure.
    """
    x = _as_tensor(x)
    xd = x.data
    if kind == "relu":
        out = np.maximum(xd, 0.0)

        def bwd(g):
            return (g * (xd > 0),)

    elif kind == "leaky_relu":
        out = np.where(xd > 0, xd, LEAKY_SLOPE * xd)

        def bwd(g):
            return (g * np.where(xd > 0, 1.0, LEAKY_SLOPE),)

    elif kind == "elu":
        ex = np.exp(np.minimum(xd, 0.0))
        out = np.where(xd > 0, xd, ELU_ALPHA * (ex - 1.0))

        def bwd(g):
            return (g * np.where(xd > 0, 1.0, ELU_ALPHA * ex),)

    elif kind == "gelu":
        out, t = kn.gelu_forward(xd)

        def bwd(g):
            return (kn.gelu_backward(g, xd, t),)

    elif kind == "tanh":
        out = kn.tanh_forward(xd)

        def bwd(g):
            return (kn.tanh_backward(g, out),)

    else:
        raise ConfigError(f"unknown activation kind {kind!r}; valid: {ACTIVATION_KINDS}")
    return _emit(out, (x,), bwd)


def tanh(x) -> Tensor:
    return activation(x, "tanh")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    s[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _emit(s, (x,), bwd)


def log(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data

    def bwd(g):
        return (g / xd,)

    return _emit(np.log(xd), (x,), bwd)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only through the interior."""
    x = _as_tensor(x)
    xd = x.data
    inside = ((xd > lo) & (xd < hi)).astype(np.float64)
    return _emit(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# shape algebra


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x, axis1: int, axis2: int) -> Tensor:
    x = _as_tensor(x)
    return _emit(x.data.swapaxes(axis1, axis2), (x,), lambda g: (g.swapaxes(axis1, axis2),))


def concat_along(parts, axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat of an empty list")
    nd = parts[0].data.ndim
    axis = axis % nd
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != nd or any(other[i] != base[i] for i in range(nd) if i != axis):
            raise ShapeMismatchError(
                f"concat axis {axis}: shapes {parts[0].shape} and {p.shape} differ off-axis"
            )
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, tuple(parts), bwd)


def concat_last_axis(parts) -> Tensor:
    return concat_along(parts, -1)


def mean_over_axis(x, axis: int) -> Tensor:
    x = _as_tensor(x)
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ConfigError(f"mean_over_axis axis {axis} out of bounds for {x.shape}")
    axis = axis % nd
    n = x.shape[axis]
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return _emit(x.data.mean(axis=axis), (x,), bwd)


def sum_over_axis(x, axis: int) -> Tensor:
    x = _as_tensor(x)
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ConfigError(f"sum_over_axis axis {axis} out of bounds for {x.shape}")
    axis = axis % nd
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(x.data.sum(axis=axis), (x,), bwd)


# ---------------------------------------------------------------------------
# time-axis resampling (time is the second-to-last axis)


def avg_pool_time(x, factor: int) -> Tensor:
    """Mean over `factor` consecutive time rows; trailing partial window
    averages over its actual length, so the output has ceil(T/factor) rows."""
    x = _as_tensor(x)
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ConfigError(f"pooling factor must be a positive integer, got {factor!r}")
    if factor == 1:
        return _emit(x.data, (x,), lambda g: (g,))
    if x.data.ndim < 2:
        raise ShapeMismatchError(f"avg_pool_time needs a [...,T,d] tensor, got {x.shape}")
    t_len = x.shape[-2]
    starts = np.arange(0, t_len, factor)
    counts = np.minimum(factor, t_len - starts).astype(np.float64)
    sums = np.add.reduceat(x.data, starts, axis=-2)
    out = sums / counts[:, None]

    def bwd(g):
        return (np.repeat(g / counts[:, None], counts.astype(int), axis=-2),)

    return _emit(out, (x,), bwd)


def _interp_matrix(src_len: int, target_len: int) -> np.ndarray:
    """Row-stochastic linear-interpolation matrix mapping src_len rows to
    target_len rows at positions spread affinely over [0, src_len - 1]."""
    m = np.zeros((target_len, src_len))
    if src_len == 1 or target_len == 1:
        pos = np.zeros(target_len)
    else:
        pos = np.arange(target_len) * ((src_len - 1) / (target_len - 1))
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src_len - 1)
    w = pos - lo
    rows = np.arange(target_len)
    np.add.at(m, (rows, lo), 1.0 - w)
    np.add.at(m, (rows, hi), w)
    return m


def upsample_time(x, target_len: int) -> Tensor:
    """Linear interpolation along time onto target_len rows; identity when
    the lengths already match."""
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeMismatchError(f"upsample_time needs a [...,T,d] tensor, got {x.shape}")
    if target_len < 1:
        raise ConfigError(f"target length must be positive, got {target_len}")
    src_len = x.shape[-2]
    if src_len == target_len:
        return _emit(x.data, (x,), lambda g: (g,))
    m = _interp_matrix(src_len, target_len)

    def bwd(g):
        return (np.matmul(m.T, g),)

    return _emit(np.matmul(m, x.data), (x,), bwd)


# ---------------------------------------------------------------------------
# regularization


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only with 0 < rate < 1 during training."""
    x = _as_tensor(x)
    if not 0.0 < rate < 1.0:
        raise ConfigError(f"dropout rate must lie in (0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit(x.data * keep, (x,), lambda g: (g * keep,))
