"""Minimal reverse-mode autodiff over numpy float64 arrays.

Only the operations the quadratic ResNet and its losses need are provided.
Every op records a closure mapping the upstream gradient to one gradient per
parent; :meth:`Tensor.backward` walks the graph in reverse topological order.

Gradients accumulate only on leaf tensors with ``requires_grad=True``, so two
backward passes over the same graph without :meth:`Tensor.zero_grad` double
the leaf gradients exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DegenerateInputError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "ParamGroup",
    "RunningStats",
    "add",
    "hadamard",
    "relu",
    "conv1d",
    "batch_norm1d",
    "max_pool1d",
    "avg_pool_global",
    "dense",
    "l2_normalize",
    "concat",
    "flatten",
    "tsum",
    "quadratic_conv1d",
    "grad_check",
    "GradCheckReport",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != output shape {self.data.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        cotangents: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = cotangents.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in cotangents:
                    cotangents[key] = cotangents[key] + pg
                else:
                    cotangents[key] = pg

    # arithmetic sugar; broadcasting allowed here, unlike hadamard()
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tsum(self)


@dataclass
class ParamGroup:
    """Trainable tensors that share a learning rate."""

    tag: str
    members: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if self.tag not in ("linear", "quadratic"):
            raise ConfigurationError(f"unknown parameter group tag {self.tag!r}")


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    return Tensor._from_op(a.data * factor, (a,), lambda g: (g * factor,))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two tensors of identical shape."""
    if a.shape != b.shape:
        raise DimensionError(f"hadamard needs equal shapes, got {a.shape} and {b.shape}")
    return mul(a, b)


def tsum(a: Tensor) -> Tensor:
    return Tensor._from_op(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(a, (a.shape[0], -1))


def take(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g) if _is_fancy(index) else full.__setitem__(index, g)
        return (full,)

    return Tensor._from_op(np.array(out), (a,), backward)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return Tensor._from_op(out, tensors, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _out_len(n: int, k: int, stride: int, padding: int) -> int:
    if stride < 1:
        raise ConfigurationError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ConfigurationError(f"padding must be non-negative, got {padding}")
    if k > n + 2 * padding:
        raise DimensionError(f"axis 2 (length): window {k} exceeds padded length {n + 2 * padding}")
    return (n + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, m: int) -> np.ndarray:
    """View of shape [B, C, m, k] over the padded input."""
    return sliding_window_view(xp, k, axis=2)[:, :, : stride * (m - 1) + 1 : stride]


def _scatter_windows(dcols: np.ndarray, length: int, stride: int) -> np.ndarray:
    b, c, m, k = dcols.shape
    dxp = np.zeros((b, c, length))
    stop = stride * (m - 1) + 1
    for i in range(k):
        dxp[:, :, i : i + stop : stride] += dcols[..., i]
    return dxp


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip) of a [batch, ch_in, n] input."""
    if x.ndim != 3:
        raise DimensionError(f"conv1d input must be [batch, ch_in, n], got shape {x.shape}")
    if kernel.ndim != 3:
        raise DimensionError(f"conv1d kernel must be [ch_out, ch_in, k], got shape {kernel.shape}")
    batch, ch_in, n = x.shape
    ch_out, k_in, k = kernel.shape
    if k_in != ch_in:
        raise DimensionError(f"axis 1 (channels): input has {ch_in}, kernel expects {k_in}")
    if bias is not None and bias.shape != (ch_out,):
        raise DimensionError(f"axis 0 (output channels): bias shape {bias.shape}, expected ({ch_out},)")
    m = _out_len(n, k, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols = _windows(xp, k, stride, m).transpose(0, 2, 1, 3).reshape(batch * m, ch_in * k)
    wmat = kernel.data.reshape(ch_out, ch_in * k)
    out = (cols @ wmat.T).reshape(batch, m, ch_out).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gm = g.transpose(0, 2, 1).reshape(batch * m, ch_out)
        dx = dk = db = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(batch, m, ch_in, k).transpose(0, 2, 1, 3)
            dxp = _scatter_windows(dcols, xp.shape[2], stride)
            dx = dxp[:, :, padding : padding + n]
        if kernel.requires_grad:
            dk = (gm.T @ cols).reshape(ch_out, ch_in, k)
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2))
        return (dx, dk, db) if bias is not None else (dx, dk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return Tensor._from_op(out, parents, backward)


def batch_norm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel normalization of a [batch, ch, n] tensor.

    Training mode uses batch statistics and folds them into ``stats`` with an
    exponential moving average; eval mode uses ``stats`` as-is.
    """
    if x.ndim != 3:
        raise DimensionError(f"batch_norm1d input must be [batch, ch, n], got {x.shape}")
    ch = x.shape[1]
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise DimensionError(f"axis 1 (channels): gamma/beta must have shape ({ch},)")
    if training:
        if x.shape[0] < 2:
            raise ConfigurationError("batch_norm1d in train mode needs batch >= 2")
        count = x.shape[0] * x.shape[2]
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        stats.mean = (1 - momentum) * stats.mean + momentum * mean
        stats.var = (1 - momentum) * stats.var + momentum * var * count / max(count - 1, 1)
    else:
        mean, var = stats.mean, stats.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2))
        dbeta = g.sum(axis=(0, 2))
        dxhat = g * gamma.data[None, :, None]
        if training:
            n = x.shape[0] * x.shape[2]
            dx = (
                inv_std[None, :, None]
                / n
                * (
                    n * dxhat
                    - dxhat.sum(axis=(0, 2), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
                )
            )
        else:
            dx = dxhat * inv_std[None, :, None]
        return dx, dgamma, dbeta

    return Tensor._from_op(out, (x, gamma, beta), backward)


def max_pool1d(x: Tensor, k: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Sliding max; ties send the gradient to the lowest index in the window."""
    stride = k if stride is None else stride
    batch, ch, n = x.shape
    m = _out_len(n, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)), constant_values=-np.inf) if padding else x.data
    win = _windows(xp, k, stride, m)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dcols = np.zeros((batch, ch, m, k))
        np.put_along_axis(dcols, arg[..., None], g[..., None], axis=-1)
        dxp = _scatter_windows(dcols, xp.shape[2], stride)
        return (dxp[:, :, padding : padding + n],)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward)


def avg_pool_global(x: Tensor) -> Tensor:
    """Mean over the length axis: [batch, ch, n] -> [batch, ch, 1]."""
    n = x.shape[2]
    out = x.data.mean(axis=2, keepdims=True)
    return Tensor._from_op(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map x @ W.T + b for x of shape [batch, d_in]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"dense expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"axis 1 (features): input has {x.shape[1]}, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"axis 0 (outputs): bias shape {bias.shape}, expected ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = (g @ weight.data, g.T @ x.data)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, parents, backward)


def l2_normalize(u: Tensor) -> Tensor:
    """Divide each row of a [batch, d] tensor by its Euclidean norm."""
    if u.ndim != 2:
        raise DimensionError(f"l2_normalize expects [batch, d], got {u.shape}")
    norms = np.sqrt((u.data * u.data).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms[:, 0] == 0.0)[0])
        raise DegenerateInputError(f"row {bad} has zero norm")
    y = u.data / norms

    def backward(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)

    return Tensor._from_op(y, (u,), backward)


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    per_param: list[float]

    def __bool__(self) -> bool:
        return self.passed


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    tol: float = 1e-3,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` with central differences.

    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps near-zero gradients from amplifying rounding noise.
    """
    params = list(params)
    if not 1e-6 <= h <= 1e-3:
        raise ConfigurationError(f"step h must lie in [1e-6, 1e-3], got {h}")
    for p in params:
        p.zero_grad()
    out = f()
    if out.data.size != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    per_param = []
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * h)
        if not (np.isfinite(numeric).all() and np.isfinite(a).all()):
            raise NumericError("non-finite gradient encountered")
        a = a.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        per_param.append(float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0)
    for p in params:
        p.zero_grad()
    worst = max(per_param, default=0.0)
    return GradCheckReport(worst, worst <= tol, tol, per_param)


def quadratic_conv1d(
    x: Tensor,
    w_r: Tensor,
    b_r: Tensor,
    w_g: Tensor | None = None,
    b_g: Tensor | None = None,
    w_b: Tensor | None = None,
    c: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Fused quadratic convolution pre-activation.

    Computes ``(x*w_r + b_r)(x*w_g + b_g) + (x.x)*w_b + c``; omit ``w_g``/``b_g``
    to drop the product (leaving ``x*w_r + b_r``) and ``w_b``/``c`` to drop the
    power term. One window matrix serves all three kernels since the windows
    of ``x.x`` are the squared windows of ``x``.
    """
    has_g = w_g is not None
    has_b = w_b is not None
    if x.ndim != 3 or w_r.ndim != 3:
        raise DimensionError(f"quadratic conv expects [batch, ch_in, n] input and 3-D kernels, got {x.shape}, {w_r.shape}")
    for other in (w_g, w_b):
        if other is not None and other.shape != w_r.shape:
            raise DimensionError(f"all kernels must share shape {w_r.shape}, got {other.shape}")
    batch, ch_in, n = x.shape
    ch_out, k_in, k = w_r.shape
    if k_in != ch_in:
        raise DimensionError(f"axis 1 (channels): input has {ch_in}, kernel expects {k_in}")
    for bias in (b_r, b_g, c):
        if bias is not None and bias.shape != (ch_out,):
            raise DimensionError(f"axis 0 (output channels): bias shape {bias.shape}, expected ({ch_out},)")
    m = _out_len(n, k, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols = _windows(xp, k, stride, m).transpose(0, 2, 1, 3).reshape(batch * m, ch_in * k)
    flat = ch_in * k
    lin_w = [w_r.data.reshape(ch_out, flat)]
    lin_b = [b_r.data]
    if has_g:
        lin_w.append(w_g.data.reshape(ch_out, flat))
        lin_b.append(b_g.data)
    wcat = np.concatenate(lin_w, axis=0)
    lin = cols @ wcat.T + np.concatenate(lin_b)
    r = lin[:, :ch_out]
    if has_g:
        gterm = lin[:, ch_out:]
        out = r * gterm
    else:
        out = r.copy()
    if has_b:
        cols2 = cols * cols
        wb = w_b.data.reshape(ch_out, flat)
        out += cols2 @ wb.T + c.data
    result = np.ascontiguousarray(out.reshape(batch, m, ch_out).transpose(0, 2, 1))

    def backward(gout):
        g = gout.transpose(0, 2, 1).reshape(batch * m, ch_out)
        if has_g:
            glin = np.concatenate([g * gterm, g * r], axis=1)
        else:
            glin = g
        dwcat = (glin.T @ cols).reshape(-1, ch_in, k)
        dbcat = glin.sum(axis=0)
        grads = [None, dwcat[:ch_out], dbcat[:ch_out]]
        dcols = glin @ wcat
        if has_g:
            grads += [dwcat[ch_out:], dbcat[ch_out:]]
        if has_b:
            grads += [(g.T @ cols2).reshape(ch_out, ch_in, k), g.sum(axis=0)]
            dcols += 2.0 * cols * (g @ wb)
        if x.requires_grad:
            dcols4 = dcols.reshape(batch, m, ch_in, k).transpose(0, 2, 1, 3)
            grads[0] = _scatter_windows(dcols4, xp.shape[2], stride)[:, :, padding : padding + n]
        return tuple(grads)

    parents = [x, w_r, b_r]
    if has_g:
        parents += [w_g, b_g]
    if has_b:
        parents += [w_b, c]
    return Tensor._from_op(result, parents, backward)
