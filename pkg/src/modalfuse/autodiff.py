"""Dense tensors with reverse-mode automatic differentiation.

Every numeric operation the model needs lives here: each op computes its
forward value eagerly with numpy and records a backward rule linking the
output to its parents. ``backward`` walks that graph in reverse
topological order and accumulates gradients into every ``requires_grad``
tensor it reaches. Gradients accumulate additively across repeated calls;
zeroing is the optimizer's job.

64-bit floats are the default; 32-bit is an opt-in speed mode
(``set_default_dtype``). Gradient checks are only meaningful in 64-bit.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

_default_dtype = np.float64
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    """Set the dtype used for new tensors (np.float32 or np.float64)."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in _FLOAT_DTYPES:
        raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


class no_grad:
    """Context manager that disables graph recording (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional float array, optionally a node in the gradient graph.

    ``data`` is the value, ``grad`` the accumulated gradient buffer (same
    shape, allocated on first backward). Tensors are immutable once
    created except for ``grad``; ops produce new tensors.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 _parents: tuple = (), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def permute(self, axes) -> "Tensor":
        return permute(self, axes)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad)


def randn(shape, rng, std: float = 1.0, requires_grad: bool = False) -> Tensor:
    """Normal(0, std^2) tensor from ``rng`` (a Generator or an int seed)."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    data = rng.standard_normal(shape) * std
    return Tensor(data.astype(_default_dtype), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    """Wrap an op result, recording the graph edge only when needed."""
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    if requires:
        return Tensor(data, requires_grad=True, op=op, _parents=parents,
                      _backward=backward_fn)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bwd, "mul")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    out = x.data * c

    def bwd(g):
        return (g * c,)

    return _make(out, (x,), bwd, "scale")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bwd, "matmul")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), bwd, "reshape")


def permute(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(int(a) for a in axes)
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inverse),)

    return _make(out, (x,), bwd, "permute")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    out = np.broadcast_to(x.data, tuple(shape))

    def bwd(g):
        return (_unbroadcast(g, x.shape),)

    return _make(out, (x,), bwd, "broadcast_to")


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise ContractError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(out, parts, bwd, "concat")


def select(x, axis: int, index: int) -> Tensor:
    """Pick one slice along ``axis``, dropping that axis."""
    x = as_tensor(x)
    out = np.take(x.data, index, axis=axis)

    def bwd(g):
        gx = np.zeros_like(x.data)
        slicer = [slice(None)] * x.ndim
        slicer[axis] = index
        gx[tuple(slicer)] = g
        return (gx,)

    return _make(out, (x,), bwd, "select")


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bwd, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else np.prod(
        [x.shape[a] for a in np.atleast_1d(axis)])

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / count,)

    return _make(np.asarray(out), (x,), bwd, "mean")


# ---------------------------------------------------------------------------
# nonlinearities and normalizers
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), bwd, "softmax")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return phi + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI


def gelu(x) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (no tanh approximation)."""
    x = as_tensor(x)
    out = x.data * 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def bwd(g):
        return (g * _gelu_grad(x.data),)

    return _make(out, (x,), bwd, "gelu")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis (population variance),
    then the affine map ``gain * xhat + bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} "
            f"do not match last axis of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), bwd, "layer_norm")


class BatchNormState:
    """Running statistics for one batch-norm layer (not trainable)."""

    def __init__(self, channels: int, dtype=None):
        dtype = dtype or _default_dtype
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def copy(self) -> "BatchNormState":
        out = BatchNormState(len(self.mean), dtype=self.mean.dtype)
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool,
               momentum: float = 0.1, eps: float = 1e-5,
               update_running: bool | None = None) -> Tensor:
    """Channel-wise batch normalization for (N, C, H, W) input.

    Training mode normalizes with batch statistics (population variance)
    and, unless ``update_running`` is False, folds them into ``state``
    with the given momentum (weight of the new batch; the running
    variance uses the unbiased estimate). Evaluation mode normalizes
    with the stored statistics, making the op pure per sample.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects (N,C,H,W), got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(
            f"batch_norm affine shapes {gamma.shape}/{beta.shape} "
            f"do not match {channels} channels")
    axes = (0, 2, 3)
    gam = gamma.data.reshape(1, -1, 1, 1)
    bet = beta.data.reshape(1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = ((x.data - mu) ** 2).mean(axis=axes, keepdims=True)
        if update_running is None or update_running:
            count = x.data.size // channels
            bessel = count / (count - 1) if count > 1 else 1.0
            state.mean = ((1 - momentum) * state.mean
                          + momentum * mu.reshape(-1)).astype(state.mean.dtype)
            state.var = ((1 - momentum) * state.var
                         + momentum * bessel * var.reshape(-1)).astype(state.var.dtype)
    else:
        mu = state.mean.reshape(1, -1, 1, 1)
        var = state.var.reshape(1, -1, 1, 1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gam + bet

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        if training:
            dxhat = g * gam
            dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        else:
            dx = g * gam * inv
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bwd, "batch_norm")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x, filters, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation (no kernel flip) of (N,C,H,W) with (O,C,kh,kw).

    Output extent per axis is floor((n + 2*padding - k) / stride) + 1.
    Backward produces gradients for both the input and the filters.
    """
    x, filters = as_tensor(x), as_tensor(filters)
    if x.ndim != 4 or filters.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d operands, got {x.shape}, {filters.shape}")
    n, c, h, w = x.shape
    o, cf, kh, kw = filters.shape
    if c != cf:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs filters {filters.shape}")
    s, p = int(stride), int(padding)
    oh = (h + 2 * p - kh) // s + 1
    ow = (w + 2 * p - kw) // s + 1
    if oh < 1 or ow < 1 or h + 2 * p < kh or w + 2 * p < kw:
        raise ShapeError(
            f"conv2d geometry invalid: input {x.shape}, filters {filters.shape}, "
            f"stride {s}, padding {p}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data

    # accumulate one (kh, kw) tap at a time; each tap is a plain tensordot
    acc = np.zeros((n, oh, ow, o), dtype=x.data.dtype)
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, :, u:u + s * oh:s, v:v + s * ow:s]
            acc += np.tensordot(xs, filters.data[:, :, u, v], axes=([1], [1]))
    out = np.ascontiguousarray(np.transpose(acc, (0, 3, 1, 2)))

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(filters.data)
        for u in range(kh):
            for v in range(kw):
                xs = xp[:, :, u:u + s * oh:s, v:v + s * ow:s]
                gw[:, :, u, v] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
                contrib = np.tensordot(g, filters.data[:, :, u, v], axes=([1], [0]))
                gxp[:, :, u:u + s * oh:s, v:v + s * ow:s] += np.transpose(
                    contrib, (0, 3, 1, 2))
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gw

    return _make(out, (x, filters), bwd, "conv2d")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy(logits, labels) -> Tensor:
    """Mean of -log softmax(logits)[label], fused through log-sum-exp."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (n, classes) logits, got {logits.shape}")
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise IndexError(
            f"label out of range [0, {classes}): {labels.min()}..{labels.max()}")
    labels = labels.astype(np.int64)
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    picked = z[np.arange(n), labels]
    out = np.asarray((lse - picked).mean())

    def bwd(g):
        p = np.exp(z - zmax)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make(out, (logits,), bwd, "cross_entropy")


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable
    requires_grad tensor. ``loss`` must be scalar."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not (parent.requires_grad or parent._parents):
                continue
            key = id(parent)
            held = pending.get(key)
            pending[key] = pg if held is None else held + pg


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               max_coords: int | None = None, rng=None) -> float:
    """Max relative error of analytic vs central finite-difference gradient.

    ``f`` must be a deterministic scalar-valued function of ``x``. Every
    coordinate is probed unless ``max_coords`` caps the count (sampled
    without replacement from ``rng``). Relative error per coordinate is
    |a - n| / max(|a|, |n|, 1e-8).
    """
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    backward(out)
    analytic = x.grad.reshape(-1).copy()
    x.grad = None

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        if isinstance(rng, (int, np.integer)) or rng is None:
            rng = np.random.default_rng(rng)
        coords = rng.choice(flat.size, size=max_coords, replace=False)

    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
