"""Differentiable primitives.

Every function takes :class:`Tensor` inputs (python scalars and numpy arrays
are accepted as constants), computes its value in float64 and returns a tensor
in the inputs' storage dtype. Backward rules receive the upstream gradient as
float64 and return one gradient per input (``None`` for constants).
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError
from .tensor import Tensor, make_result

_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def _const(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64, copy=False)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    try:
        out = _f64(a) + _f64(b)
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    try:
        out = _f64(a) - _f64(b)
    except ValueError as exc:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    av, bv = _f64(a), _f64(b)
    try:
        out = av * bv
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return make_result(out, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    xv = _f64(x)
    on = xv > 0

    def backward(g):
        return (g * on,)

    return make_result(np.where(on, xv, 0.0), (x,), backward, "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xv = _f64(x)
    cdf = 0.5 * (1.0 + erf(xv * _SQRT_HALF))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xv * xv)
        return (g * (cdf + xv * pdf),)

    return make_result(xv * cdf, (x,), backward, "gelu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(_f64(x))

    def backward(g):
        return (g * out,)

    return make_result(out, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    xv = _f64(x)

    def backward(g):
        return (g / xv,)

    return make_result(np.log(xv), (x,), backward, "log")


# reductions and shape ----------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = _f64(x).sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xv = _f64(x)
    out = xv.mean(axis=axis, keepdims=keepdims)
    count = xv.size // max(np.asarray(out).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_result(out, (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return make_result(np.transpose(x.data, axes), (x,), backward, "transpose")


def index(x: Tensor, key) -> Tensor:
    """Basic or integer-array indexing; gradient scatters back with accumulation."""
    out = x.data[key]

    def backward(g):
        full = np.zeros(x.shape, dtype=np.float64)
        np.add.at(full, key, g)
        return (full,)

    return make_result(out, (x,), backward, "index")


# linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes with numpy batch broadcasting."""
    a = _const(a)
    b = _const(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = _f64(a), _f64(b)
    try:
        out = np.matmul(av, bv)
    except ValueError as exc:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# probability -------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xv = _f64(x)
    if xv.shape[axis] < 1:
        raise DimensionError(f"softmax: empty axis in shape {x.shape}")
    z = np.exp(xv - xv.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), backward, "softmax")


def log_softmax_array(xv: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable float64 log-softmax on a plain array."""
    xv = np.asarray(xv, dtype=np.float64)
    shifted = xv - xv.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ls = log_softmax_array(_f64(x), axis)
    p = np.exp(ls)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(ls, (x,), backward, "log_softmax")


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Mean (or summed) negative log-likelihood of integer targets over rows of ``logits``."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (n, |V|) logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, vocab = logits.shape
    if targets.shape[0] != n:
        raise DimensionError(f"cross_entropy: {n} rows but {targets.shape[0]} targets")
    if n and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"cross_entropy: target id out of range for |V|={vocab}")
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction {reduction!r}")
    ls = log_softmax_array(_f64(logits))
    rows = np.arange(n)
    nll = -ls[rows, targets]
    scale = 1.0 / n if reduction == "mean" else 1.0

    def backward(g):
        grad = np.exp(ls)
        grad[rows, targets] -= 1.0
        return (grad * (np.asarray(g).item() * scale),)

    # scalar losses stay in float64
    return make_result(nll.sum() * scale, (logits,), backward, "cross_entropy", dtype=np.float64)


def soft_cross_entropy(logits: Tensor, target_probs: np.ndarray) -> Tensor:
    """Mean over rows of ``-sum_v q(v) log softmax(logits)(v)``; targets are constants."""
    q = np.asarray(target_probs, dtype=np.float64)
    if q.shape != logits.shape or logits.ndim != 2:
        raise DimensionError(f"soft_cross_entropy: logits {logits.shape} vs targets {q.shape}")
    n = logits.shape[0]
    ls = log_softmax_array(_f64(logits))

    def backward(g):
        p = np.exp(ls)
        return ((p * q.sum(axis=-1, keepdims=True) - q) * (np.asarray(g).item() / n),)

    return make_result(-(q * ls).sum() / n, (logits,), backward, "soft_cross_entropy", dtype=np.float64)


# layers ------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xv = _f64(x)
    gv = _f64(gamma)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gx_hat = g * gv
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(xhat * gv + _f64(beta), (x, gamma, beta), backward, "layer_norm")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding: id out of range for table of {vocab} rows")

    def backward(g):
        full = np.zeros(weight.shape, dtype=np.float64)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return make_result(weight.data[ids], (weight,), backward, "embedding")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """Inverted dropout. Identity unless ``train`` and ``rate > 0``; needs a seeded ``rng``."""
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs a seeded generator")
    keep = rng.random(x.shape) >= rate
    scale = keep / (1.0 - rate)

    def backward(g):
        return (g * scale,)

    return make_result(_f64(x) * scale, (x,), backward, "dropout")
