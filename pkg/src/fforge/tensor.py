"""A small reverse-mode autodiff engine on top of numpy.

Every op takes and returns :class:`Tensor` objects.  An op whose inputs
do not require gradients produces a plain constant, so eval-mode forward
passes build no graph at all.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DegenerateBatchError, InvalidArgumentError

# Test-only fault injection, read once at import.  See selfcheck.
_FAULTS = frozenset(filter(None, os.environ.get("FFORGE_INJECT_FAULT", "").split(",")))


class Tensor:
    """n-dimensional value with an optional gradient.

    ``grad`` is populated by :meth:`backward`.  Leaf tensors accumulate
    gradients across repeated backward calls until :meth:`zero_grad`;
    interior nodes have their ``grad`` overwritten on each call.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Optional[Callable] = None, op: str = ""):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op or 'leaf'})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A trainable leaf tensor owned by a network."""

    def __init__(self, data, name: str = "", weight_decay_exempt: bool = False):
        super().__init__(np.array(data, copy=True), requires_grad=True)
        self.name = name
        self.weight_decay_exempt = weight_decay_exempt

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents),
                      _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar ``loss`` into every reachable leaf."""
    if loss.data.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise InvalidArgumentError("loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- elementwise and linear algebra ------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidArgumentError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[start:stop]`` along the first axis."""
    n = x.shape[0]

    def bw(g):
        full = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _make(x.data[start:stop], (x,), bw, "slice_rows")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    """``max(x, slope * x)`` for slope <= 1 (``x if x > 0 else slope * x`` in general)."""
    s = x.dtype.type(slope)
    scaled = x.data * s
    out = np.maximum(x.data, scaled) if slope <= 1 else np.minimum(x.data, scaled)
    back = x.dtype.type(-slope if "leaky_sign" in _FAULTS else slope)

    def bw(g):
        factor = (x.data > 0).astype(g.dtype)
        factor *= 1 - back
        factor += back
        return (g * factor,)

    return _make(out, (x,), bw, "leaky_relu")


# -- convolutional pieces -----------------------------------------------------

# Patch length up to which the channel-major conv layout is faster.
_PLANAR_CONV_MAX_K = 48


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an FCkk kernel (no bias).

    Patches are gathered channel-last so both the forward product and the
    input-gradient scatter touch contiguous memory; inputs with very few
    channels use the channel-major layout instead.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise InvalidArgumentError("conv2d expects 4-d input and kernel")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise InvalidArgumentError(f"conv2d channel mismatch: input {c}, kernel {kc}")
    if stride < 1:
        raise InvalidArgumentError("stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise InvalidArgumentError("kernel larger than padded input")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if c * kh * kw <= _PLANAR_CONV_MAX_K:
        return _conv2d_planar(x, kernel, stride, padding, ho, wo)
    xh = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xh[:, i:i + stride * (ho - 1) + 1:stride,
                                        j:j + stride * (wo - 1) + 1:stride, :]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(f, -1)
    out = np.ascontiguousarray((cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gk = None
        if kernel.requires_grad:
            gk = np.ascontiguousarray((gm.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2))
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, kh, kw, c)
            gxh = np.zeros(xh.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxh[:, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, i, j, :]
            gx = np.ascontiguousarray(
                gxh[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2))
        return gx, gk

    return _make(out, (x, kernel), bw, "conv2d")


def _conv2d_planar(x: Tensor, kernel: Tensor, stride: int, padding: int, ho: int, wo: int) -> Tensor:
    """Channel-major variant for inputs with few channels (large spatial extent).

    Columns are laid out ``[C*kh*kw, N*ho*wo]`` so every gather copies whole
    image rows instead of a handful of channel values.
    """
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    xh = np.pad(x.data.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xh[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = kernel.data.reshape(f, -1)
    out = np.ascontiguousarray((wmat @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(f, -1)
        gk = (gm @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(c, kh, kw, n, ho, wo)
            gxh = np.zeros(xh.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxh[:, :, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride] += dcols[:, i, j]
            gx = np.ascontiguousarray(gxh[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3))
        return gx, gk

    return _make(out, (x, kernel), bw, "conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    The gradient goes to the first maximal element of each window in
    row-major order.
    """
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    quads = [x.data[:, :, dy:2 * ho:2, dx:2 * wo:2] for dy in (0, 1) for dx in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def bw(g):
        gx = np.zeros_like(x.data)
        gx6 = gx[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2) if (h, w) == (2 * ho, 2 * wo) \
            else None
        taken = np.zeros(out.shape, dtype=bool)
        for q, (dy, dx) in zip(quads, ((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = q == out
            hit &= ~taken
            taken |= hit
            if gx6 is not None:
                np.multiply(hit, g, out=gx6[:, :, :, dy, :, dx])
            else:
                gx[:, :, dy:2 * ho:2, dx:2 * wo:2] = hit * g
        return (gx,)

    return _make(out, (x,), bw, "max_pool2d")


def global_average_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), bw, "global_average_pool")


class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    def __init__(self, channels: int, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def copy(self) -> "RunningStats":
        out = RunningStats(len(self.mean), self.mean.dtype)
        out.mean[...] = self.mean
        out.var[...] = self.var
        return out


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, stats: RunningStats,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Normalize an NCHW tensor per channel.

    In training mode the batch statistics are used and ``stats`` is updated
    as ``running = momentum * running + (1 - momentum) * batch`` (unbiased
    batch variance).  In eval mode ``stats`` is read only.
    """
    if not training:
        return _batch_norm_eval(x, scale, shift, stats, eps)
    n, c, h, w = x.shape
    count = n * h * w
    if count < 2:
        raise DegenerateBatchError(f"batch_norm needs N*H*W >= 2 in train mode, got {count}")
    gamma = scale.data.reshape(1, c, 1, 1)
    beta = shift.data.reshape(1, c, 1, 1)
    mu = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mu.reshape(1, c, 1, 1)
    var = (centered * centered).mean(axis=(0, 2, 3))
    stats.mean *= momentum
    stats.mean += (1.0 - momentum) * mu
    stats.var *= momentum
    stats.var += (1.0 - momentum) * var * (count / (count - 1))
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(1, c, 1, 1)
    xhat = centered * inv_std
    out = gamma * xhat + beta

    def bw(g):
        gscale = (g * xhat).sum(axis=(0, 2, 3)) if scale.requires_grad else None
        gshift = g.sum(axis=(0, 2, 3)) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv_std / count * (count * dxhat - s1 - xhat * s2)
        return gx, gscale, gshift

    return _make(out, (x, scale, shift), bw, "batch_norm")


def _batch_norm_eval(x: Tensor, scale: Tensor, shift: Tensor, stats: RunningStats,
                     eps: float) -> Tensor:
    """Eval mode folds the running statistics into one per-channel affine map."""
    c = x.shape[1]
    inv_std = (1.0 / np.sqrt(stats.var + eps)).astype(x.dtype)
    mu = stats.mean.astype(x.dtype)
    a = (scale.data * inv_std).reshape(1, c, 1, 1)
    b = (shift.data - mu * scale.data * inv_std).reshape(1, c, 1, 1)
    out = x.data * a
    out += b

    def bw(g):
        gscale = gshift = None
        if scale.requires_grad:
            xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
            gscale = (g * xhat).sum(axis=(0, 2, 3))
        if shift.requires_grad:
            gshift = g.sum(axis=(0, 2, 3))
        gx = g * a if x.requires_grad else None
        return gx, gscale, gshift

    return _make(out, (x, scale, shift), bw, "batch_norm")


# -- normalization, softmax and losses ----------------------------------------

def l2_normalize(v: Tensor, eps: float = 1e-12, axis: int = -1) -> Tensor:
    """``v / max(||v||, eps)`` along ``axis``."""
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = v.data / denom
    live = norm >= eps

    def bw(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(live, (g - out * proj) / denom, g / denom),)

    return _make(out, (v,), bw, "l2_normalize")


def row_norm(v: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at zero is taken as 0."""
    norm = np.sqrt((v.data * v.data).sum(axis=axis))

    def bw(g):
        safe = np.where(norm > 0, norm, 1.0)
        unit = np.where(np.expand_dims(norm > 0, axis), v.data / np.expand_dims(safe, axis), 0.0)
        return (np.expand_dims(g, axis) * unit,)

    return _make(norm, (v,), bw, "row_norm")


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: Tensor) -> Tensor:
    out = np.exp(_log_softmax_np(z.data))

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (z,), bw, "softmax")


def log_softmax(z: Tensor) -> Tensor:
    out = _log_softmax_np(z.data)
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make(out, (z,), bw, "log_softmax")


def _check_distribution(rows: np.ndarray, what: str, tol: float = 1e-6):
    sums = rows.sum(axis=-1)
    if not np.all(np.abs(sums - 1.0) <= tol):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise InvalidArgumentError(f"{what} rows must sum to 1 (max deviation {worst:.3g})")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of ``-sum_k y_k log softmax(logits)_k``.

    ``labels`` is an array of label distributions, one row per logit row.
    """
    y = np.asarray(labels, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise InvalidArgumentError(f"label shape {y.shape} != logits shape {logits.shape}")
    _check_distribution(y, "label")
    n = logits.shape[0]
    logp = _log_softmax_np(logits.data)
    loss = -(y * logp).sum() / n

    def bw(g):
        probs = np.exp(logp)
        return (g * (probs * y.sum(axis=-1, keepdims=True) - y) / n,)

    return _make(np.asarray(loss), (logits,), bw, "softmax_cross_entropy")


def kl_divergence(p: Tensor, q: Tensor, eps: float = 1e-12) -> Tensor:
    """Mean over rows of ``sum_k p_k log(p_k / q_k)``; gradients reach both inputs."""
    if p.shape != q.shape:
        raise InvalidArgumentError(f"kl shapes differ: {p.shape} vs {q.shape}")
    _check_distribution(p.data, "p")
    _check_distribution(q.data, "q")
    n = p.shape[0]
    pc = np.maximum(p.data, eps)
    qc = np.maximum(q.data, eps)
    log_ratio = np.log(pc) - np.log(qc)
    terms = np.where(p.data > 0, p.data * log_ratio, 0.0)
    value = terms.sum() / n

    def bw(g):
        gp = g * (log_ratio + 1.0) / n if p.requires_grad else None
        gq = g * np.where(q.data >= eps, -p.data / qc, 0.0) / n if q.requires_grad else None
        return gp, gq

    return _make(np.asarray(value, dtype=p.dtype), (p, q), bw, "kl_divergence")


def cosine_logits(features: Tensor, weights: Tensor, tau: float) -> Tensor:
    """``tau * <f_i / |f_i|, w_k / |w_k|>`` for every feature row and weight row."""
    if features.shape[-1] != weights.shape[-1]:
        raise InvalidArgumentError(
            f"feature dim {features.shape[-1]} != weight dim {weights.shape[-1]}")
    return scale(matmul(l2_normalize(features), transpose(l2_normalize(weights))), tau)


def parameters_zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None
