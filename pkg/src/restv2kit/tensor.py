"""Minimal dense-tensor engine on numpy buffers with reverse-mode autodiff.

Covers exactly the operator set the ResTv2 family needs: grouped/depth-wise
convolution, linear maps, batched matmul, softmax, layer/instance norm, GELU,
sigmoid, pixel shuffle, bilinear/nearest interpolation, pooling and the
reshape plumbing between image (B, C, H, W) and token (B, n, d) layouts.

Gradients are recorded on an explicit :class:`Tape`; without an active tape
every op is forward-only and allocates nothing extra.  When a
:class:`FlopRecorder` is active, every arithmetic op tallies its
multiply-accumulate count into one of four buckets (conv / linear / matmul /
other), which is what the instrumented-execution FLOPs oracle relies on.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; message names both shapes."""


class ConfigError(ValueError):
    """Raised for invalid structural configuration (groups, divisibility...)."""


class UsageError(RuntimeError):
    """Raised for API misuse (e.g. backward on a non-scalar)."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

class Tensor:
    """Dense n-d array, optionally participating in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numel(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("tensor/tensor division is not part of the op set")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of differentiable ops, replayed backward for gradients.

    Records append in execution order; :meth:`backward` walks them in strict
    reverse, accumulating each tensor's gradient exactly once per consumer.
    Confine a tape to one logical thread; independent tapes may coexist.
    """

    def __init__(self):
        self._records: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad leaf reachable from loss.

        Repeated calls without ``zero_grad`` accumulate, matching the usual
        autodiff convention.
        """
        if loss.numel() != 1:
            raise UsageError(f"backward expects a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(rec[1]) for rec in self._records}
        leaves: dict[int, Tensor] = {}
        for inputs, output, bfn in reversed(self._records):
            g = grads.pop(id(output), None)
            if g is None:
                continue
            for t, gi in zip(inputs, bfn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if t.grad is None:
                t.grad = np.array(g, dtype=t.dtype)
            else:
                t.grad = t.grad + g


def backward(loss: Tensor, tape: Tape) -> None:
    """Free-function spelling of :meth:`Tape.backward`."""
    tape.backward(loss)


# ---------------------------------------------------------------------------
# FLOP recording (multiply-accumulate convention: 1 MAC = 1 FLOP)
# ---------------------------------------------------------------------------

_FLOP_STACK: list["FlopRecorder"] = []


class FlopRecorder:
    """Tallies executed MACs into conv / linear / matmul / other buckets."""

    def __init__(self):
        self.conv = 0
        self.linear = 0
        self.matmul = 0
        self.other = 0

    def __enter__(self) -> "FlopRecorder":
        _FLOP_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _FLOP_STACK.pop()
        return False

    @property
    def total(self) -> int:
        return self.conv + self.linear + self.matmul + self.other


def _tally(category: str, macs: int) -> None:
    if _FLOP_STACK:
        rec = _FLOP_STACK[-1]
        setattr(rec, category, getattr(rec, category) + int(macs))


# Per-op "other" cost factors, shared with the symbolic counter so the
# instrumented oracle and the architecture walker agree exactly.
OTHER_COST = {
    "softmax": 3,        # shift, exp, normalize per element
    "norm": 4,           # mean, var, scale, shift per element
    "gelu": 2,
    "sigmoid": 1,
    "interp_nearest": 1,
    "interp_bilinear": 4,
    "avg_pool": 1,       # per input element
}


# ---------------------------------------------------------------------------
# Op machinery
# ---------------------------------------------------------------------------

def _make(inputs: tuple[Tensor, ...], data: np.ndarray, backward_fn: Callable) -> Tensor:
    recording = bool(_TAPE_STACK) and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=recording)
    if recording:
        _TAPE_STACK[-1]._records.append((inputs, out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make((a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _make((a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _make((a, b), out, bwd)


def scale(x: Tensor, s: float) -> Tensor:
    out = x.data * s

    def bwd(g):
        return (g * s,)

    return _make((x,), out, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched contraction (..., m, p) @ (..., p, q).

    Leading batch extents must match exactly (or one operand may be 2-D);
    no silent broadcasting beyond that.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)
    batch = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
    _tally("matmul", batch * out.shape[-2] * a.shape[-1] * out.shape[-1])

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make((a, b), out, bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the trailing axis: x @ w + b, w is (din, dout)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear input dim {x.shape} does not match weight {w.shape}")
    out = np.matmul(x.data, w.data)
    if b is not None:
        out = out + b.data
    positions = int(np.prod(x.shape[:-1], dtype=np.int64))
    _tally("linear", positions * w.shape[0] * w.shape[1])

    def bwd(g):
        gx = np.matmul(g, w.data.T)
        gw = np.matmul(x.data.reshape(-1, x.shape[-1]).T, g.reshape(-1, w.shape[1]))
        grads = [gx, gw]
        if b is not None:
            grads.append(g.reshape(-1, w.shape[1]).sum(axis=0))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return _make(inputs, out, bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction) along ``axis``."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    _tally("other", OTHER_COST["softmax"] * out.size)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make((x,), out, bwd)


def _normalize(x: Tensor, axes: tuple[int, ...], gamma: Tensor | None,
               beta: Tensor | None, eps: float) -> Tensor:
    """Mean-0/var-1 normalization over ``axes`` with optional affine.

    gamma/beta must be broadcastable against x (caller reshapes).
    """
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    _tally("other", OTHER_COST["norm"] * x.data.size)
    m = int(np.prod([x.shape[a] for a in axes]))

    def bwd(g):
        gxhat = g * gamma.data if gamma is not None else g
        mean_g = gxhat.mean(axis=axes, keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=axes, keepdims=True)
        gx = inv * (gxhat - mean_g - xhat * mean_gx)
        grads = [gx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return tuple(grads)

    inputs = [x]
    if gamma is not None:
        inputs.append(gamma)
    if beta is not None:
        inputs.append(beta)
    del m
    return _make(tuple(inputs), out, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Layer norm over the trailing (channel) axis with per-channel affine."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match channel {x.shape}")
    return _normalize(x, (x.ndim - 1,), gamma, beta, eps)


def instance_norm_map(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Instance norm over the trailing two axes of (B, k, n, n') with per-head affine."""
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"instance_norm affine shapes {gamma.shape}/{beta.shape} do not match heads {x.shape}")
    g = reshape(gamma, (1, x.shape[1], 1, 1))
    b = reshape(beta, (1, x.shape[1], 1, 1))
    return _normalize(x, (x.ndim - 2, x.ndim - 1), g, b, eps)


def layer_norm_map(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise norm over the trailing axis of (B, k, n, n') with per-head affine."""
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm_map affine shapes {gamma.shape}/{beta.shape} do not match heads {x.shape}")
    g = reshape(gamma, (1, x.shape[1], 1, 1))
    b = reshape(beta, (1, x.shape[1], 1, 1))
    return _normalize(x, (x.ndim - 1,), g, b, eps)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    out = x.data * cdf
    _tally("other", OTHER_COST["gelu"] * out.size)

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return _make((x,), out, bwd)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    _tally("other", OTHER_COST["sigmoid"] * out.size)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make((x,), out, bwd)


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _make((x,), out, bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = x.data.transpose(axes)

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make((x,), out, bwd)


def pad2d(x: Tensor, pad_h: tuple[int, int], pad_w: tuple[int, int]) -> Tensor:
    """Zero-pad the trailing two (spatial) axes."""
    widths = [(0, 0)] * (x.ndim - 2) + [pad_h, pad_w]
    out = np.pad(x.data, widths)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))

    def bwd(g):
        return (g[sl],)

    return _make((x,), out, bwd)


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left h x w of the trailing two axes (inverse of pad2d)."""
    sl = (Ellipsis, slice(0, h), slice(0, w))
    out = x.data[sl]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _make((x,), out, bwd)


def tokens_to_image(x: Tensor, h: int, w: int) -> Tensor:
    """(B, n=h*w, d) -> (B, d, h, w), row-major spatial flattening."""
    b, n, d = x.shape
    if n != h * w:
        raise ShapeError(f"token count {n} does not match spatial ({h}, {w})")
    return transpose(reshape(x, (b, h, w, d)), (0, 3, 1, 2))


def image_to_tokens(x: Tensor) -> Tensor:
    """(B, d, h, w) -> (B, h*w, d), row-major spatial flattening."""
    b, d, h, w = x.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (b, h * w, d))


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(B, C*r^2, h, w) -> (B, C, h*r, w*r), channel-major sub-pixel layout.

    out[b, c, i*r+p, j*r+q] = in[b, c*r^2 + p*r + q, i, j]; pure rearrangement,
    bijective, zero arithmetic cost.
    """
    b, crr, h, w = x.shape
    if crr % (r * r) != 0:
        raise ConfigError(f"pixel_shuffle channels {crr} not divisible by r^2={r * r}")
    c = crr // (r * r)
    y = reshape(x, (b, c, r, r, h, w))
    y = transpose(y, (0, 1, 4, 2, 5, 3))  # (b, c, h, r, w, r)
    return reshape(y, (b, c, h * r, w * r))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    b, c, hr, wr = x.shape
    if hr % r != 0 or wr % r != 0:
        raise ConfigError(f"pixel_unshuffle extents {x.shape} not divisible by r={r}")
    h, w = hr // r, wr // r
    y = reshape(x, (b, c, h, r, w, r))
    y = transpose(y, (0, 1, 3, 5, 2, 4))  # (b, c, r, r, h, w)
    return reshape(y, (b, c * r * r, h, w))


# ---------------------------------------------------------------------------
# Convolution, pooling, interpolation
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D convolution (cross-correlation) with zero padding.

    x: (B, Cin, H, W); w: (Cout, Cin/groups, kh, kw).
    Output extents: floor((H + 2*pad - kh)/stride) + 1.
    """
    bsz, cin, h, wdt = x.shape
    cout, cin_g, kh, kw = w.shape
    if cin % groups or cout % groups:
        raise ConfigError(
            f"conv2d channels ({cin} in, {cout} out) not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(f"conv2d weight {w.shape} inconsistent with input {x.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wdt + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d kernel {w.shape} exceeds padded input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                     # (B, Cin, ho, wo, kh, kw)
    wing = win.reshape(bsz, groups, cin_g, ho, wo, kh, kw)
    wg = w.data.reshape(groups, cout // groups, cin_g, kh, kw)
    out = np.einsum("bgihwkl,goikl->bgohw", wing, wg, optimize=True)
    out = out.reshape(bsz, cout, ho, wo)
    if b is not None:
        out = out + b.data[None, :, None, None]
    _tally("conv", bsz * kh * kw * cin_g * cout * ho * wo)

    def bwd(g):
        gg = g.reshape(bsz, groups, cout // groups, ho, wo)
        gw = np.einsum("bgohw,bgihwkl->goikl", gg, wing, optimize=True)
        gw = gw.reshape(w.shape)
        dwin = np.einsum("bgohw,goikl->bgihwkl", gg, wg, optimize=True)
        dwin = dwin.reshape(bsz, cin, ho, wo, kh, kw)
        gxp = np.zeros_like(xp)
        for p in range(kh):
            for q in range(kw):
                gxp[:, :, p:p + stride * ho:stride, q:q + stride * wo:stride] += dwin[:, :, :, :, p, q]
        gx = gxp[:, :, padding:padding + h, padding:padding + wdt]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return _make(inputs, out, bwd)


def avg_pool_global(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) per-channel spatial mean."""
    bsz, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    _tally("other", OTHER_COST["avg_pool"] * x.data.size)

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _make((x,), out, bwd)


def _interp_axis(n_in: int, n_out: int, mode: str):
    """Per-axis source indices and weights for nearest/bilinear resizing."""
    if mode == "nearest":
        src = np.minimum((np.arange(n_out) * n_in) // n_out, n_in - 1).astype(np.int64)
        return src, src, np.ones(n_out), np.zeros(n_out)
    # bilinear, half-pixel centers (align_corners=False)
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = pos - i0
    return i0, i1, 1.0 - w1, w1


def interpolate2d(x: Tensor, size: tuple[int, int], mode: str) -> Tensor:
    """Resize the trailing two axes of (B, C, H, W) by nearest or bilinear."""
    if mode not in ("nearest", "bilinear"):
        raise ConfigError(f"unknown interpolation mode {mode!r}")
    bsz, c, h, w = x.shape
    ho, wo = size
    y0, y1, wy0, wy1 = _interp_axis(h, ho, mode)
    x0, x1, wx0, wx1 = _interp_axis(w, wo, mode)
    corners = [(y0, x0, wy0[:, None] * wx0[None, :]),
               (y0, x1, wy0[:, None] * wx1[None, :]),
               (y1, x0, wy1[:, None] * wx0[None, :]),
               (y1, x1, wy1[:, None] * wx1[None, :])]
    if mode == "nearest":
        corners = corners[:1]
    out = np.zeros((bsz, c, ho, wo), dtype=x.dtype)
    for yi, xi, wgt in corners:
        out += x.data[:, :, yi[:, None], xi[None, :]] * wgt
    _tally("other", OTHER_COST[f"interp_{mode}"] * out.size)

    def bwd(g):
        gx = np.zeros((bsz * c, h, w), dtype=g.dtype)
        gf = g.reshape(bsz * c, ho, wo)
        nidx = np.arange(bsz * c)[:, None, None]
        for yi, xi, wgt in corners:
            np.add.at(gx, (nidx, yi[None, :, None], xi[None, None, :]), gf * wgt)
        return (gx.reshape(x.shape),)

    return _make((x,), out, bwd)


# ---------------------------------------------------------------------------
# Reductions and the finite-difference oracle
# ---------------------------------------------------------------------------

def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum()).reshape(())

    def bwd(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make((x,), out, bwd)


def tmean(x: Tensor) -> Tensor:
    n = x.numel()
    out = np.asarray(x.data.mean()).reshape(())

    def bwd(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make((x,), out, bwd)


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor,
                     step: float | None = None) -> Tensor:
    """Central-difference gradient estimate of a scalar function, per element.

    ``f`` must be deterministic.  Runs in f64 regardless of input precision.
    """
    base = x.data.astype(np.float64)
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    gout = out.reshape(-1)
    scale_ = max(1.0, float(np.abs(flat).max())) if flat.size else 1.0
    h = step if step is not None else 1e-5 * scale_
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base.copy())))
        flat[i] = orig - h
        fm = float(f(Tensor(base.copy())))
        flat[i] = orig
        gout[i] = (fp - fm) / (2.0 * h)
    return Tensor(out)
