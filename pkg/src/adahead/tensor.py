"""Minimal dense tensor engine with reverse-mode differentiation.

Tensors wrap row-major numpy arrays in the globally selected precision
(see :mod:`adahead.precision`). Differentiation is tape-based: while a
:class:`GradTape` is active on the current thread, every operation that
touches a gradient-requiring tensor records a node; the reverse sweep
visits nodes in exact reverse recording order and accumulates gradients
additively. Tensors are immutable once produced (the SGD update in the
trainer, which runs strictly between tapes, is the one sanctioned
exception).

Kink conventions, fixed so gradients are deterministic:
  * hard_sigmoid has derivative 0 at and beyond x = +/-1
  * maximum routes the gradient to its first argument on ties
  * leaky_relu uses the negative-side slope at exactly 0
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import NumericError, ShapeError
from .precision import dtype

_tls = threading.local()

_check_finite = False


def finite_checks(enabled: bool) -> None:
    """Toggle per-op output validation (NaN/Inf raises NumericError)."""
    global _check_finite
    _check_finite = enabled


def _active_tape() -> "GradTape | None":
    return getattr(_tls, "tape", None)


class Tensor:
    """Dense n-dimensional array, the substrate for all kernels."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != dtype():
            arr = arr.astype(dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic; scalars and broadcastable tensors both accepted
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return take_slice(self, idx)

    def sum(self, dims=None, keepdims=False):
        return reduce_sum(self, dims, keepdims)

    def mean(self, dims=None, keepdims=False):
        return reduce_mean(self, dims, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)


def param(data, rng: np.random.Generator | None = None, scale: float | None = None) -> Tensor:
    """A gradient-requiring tensor (model parameter)."""
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("name", "inputs", "out", "bwd")

    def __init__(self, name: str, inputs: Sequence[Tensor], out: Tensor,
                 bwd: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class GradTape:
    """Op recorder for one thread of execution.

    Nodes are appended in execution order; :meth:`backward` replays them in
    exact reverse order, accumulating gradients additively into every
    gradient-requiring input. Intermediate gradients are released as the
    sweep passes them.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        if _active_tape() is not None:
            raise RuntimeError("a GradTape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _tls.tape = None

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, out: Tensor, seed=None) -> None:
        """Seed d(out) and sweep the tape in reverse recording order."""
        if seed is None:
            seed = np.ones_like(out.data)
        out.grad = np.asarray(seed, dtype=out.data.dtype)
        if out.grad.shape != out.data.shape:
            raise ShapeError(f"seed shape {out.grad.shape} != output shape {out.data.shape}")
        for node in reversed(self._nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.bwd(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NumericError(f"non-finite gradient produced by op '{node.name}'")
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=inp.data.dtype, copy=True)
                else:
                    inp.grad += gi
            if node.out is not out:
                node.out.grad = None  # free intermediate

    def gradients(self, out: Tensor, params: Iterable[Tensor], seed=None) -> list[np.ndarray]:
        """Backward plus collection; params with no path get zero gradients."""
        params = list(params)
        for p in params:
            p.grad = None
        self.backward(out, seed)
        return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def _record(name: str, inputs: Sequence[Tensor], out_data: np.ndarray, bwd) -> Tensor:
    if _check_finite and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite value produced by op '{name}'")
    tape = _active_tape()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape._nodes.append(_Node(name, list(inputs), out, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the given shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _record("add", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return _record("sub", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return _record("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _record("div", (a, b), out,
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _record("log", (a,), out, lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record("sqrt", (a,), out, lambda g: (g * (0.5 / out),))


def square(a: Tensor) -> Tensor:
    out = a.data * a.data
    return _record("square", (a,), out, lambda g: (g * (2.0 * a.data),))


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = np.maximum(a.data, b.data)
    first = a.data >= b.data

    def bwd(g):
        return (_unbroadcast(g * first, a.shape),
                _unbroadcast(g * ~first, b.shape))

    return _record("maximum", (a, b), out, bwd)


# ---------------------------------------------------------------------------
# scalar nonlinearities

def logistic(a: Tensor) -> Tensor:
    """Standard logistic sigmoid 1/(1+exp(-x)), overflow-safe."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("logistic", (a,), out, lambda g: (g * out * (1.0 - out),))


def hard_sigmoid(a: Tensor) -> Tensor:
    """clamp((x+1)/2, 0, 1); derivative 1/2 strictly inside (-1, 1), else 0."""
    x = a.data
    out = np.clip((x + 1.0) * 0.5, 0.0, 1.0)
    inside = np.abs(x) < 1.0
    return _record("hard_sigmoid", (a,), out, lambda g: (g * (0.5 * inside),))


def shifted_sigmoid(a: Tensor) -> Tensor:
    """2/(1+exp(-x)) - 1, an odd function with open range (-1, 1)."""
    s = logistic(a)  # composes; backward handled by the logistic node
    return s * 2.0 - 1.0


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    x = a.data
    pos = x > 0
    out = np.where(pos, x, slope * x)
    return _record("leaky_relu", (a,), out,
                   lambda g: (g * np.where(pos, 1.0, slope),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax", (a,), out, bwd)


# ---------------------------------------------------------------------------
# reductions

def _norm_dims(dims, ndim: int) -> tuple[int, ...]:
    if dims is None:
        return tuple(range(ndim))
    if isinstance(dims, int):
        dims = (dims,)
    dims = tuple(sorted(d % ndim for d in dims))
    if len(dims) == 0:
        raise ShapeError("empty reduction axis set")
    if len(set(dims)) != len(dims):
        raise ShapeError(f"duplicate reduction axes {dims}")
    for d in dims:
        if not 0 <= d < ndim:
            raise ShapeError(f"reduction axis {d} out of range for rank {ndim}")
    return dims


def reduce_sum(a: Tensor, dims=None, keepdims: bool = False) -> Tensor:
    dims = _norm_dims(dims, a.ndim)
    out = a.data.sum(axis=dims, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, dims)
        return (np.broadcast_to(g, a.shape),)

    return _record("reduce_sum", (a,), out, bwd)


def reduce_mean(a: Tensor, dims=None, keepdims: bool = False) -> Tensor:
    """Mean over the given axes (fixed numpy accumulation, deterministic)."""
    dims = _norm_dims(dims, a.ndim)
    count = 1
    for d in dims:
        count *= a.shape[d]
    out = a.data.mean(axis=dims, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, dims)
        return (np.broadcast_to(g, a.shape) / count,)

    return _record("reduce_mean", (a,), out, bwd)


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()
    return _record("broadcast_to", (a,), out, lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return _record("concat", list(tensors), out, bwd)


def take_slice(a: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing with gradient scatter on backward."""
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        return (full,)

    return _record("slice", (a,), np.array(out, copy=True), bwd)


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Rows of a 2-D tensor selected by an integer index array."""
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]

    def bwd(g):
        # bincount per column: far cheaper than a row-wise scatter-add
        full = np.empty_like(a.data)
        for c in range(a.data.shape[1]):
            full[:, c] = np.bincount(idx, weights=g[:, c],
                                     minlength=a.data.shape[0])
        return (full,)

    return _record("gather_rows", (a,), out, bwd)


# ---------------------------------------------------------------------------
# linear layers

def affine(a: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """y[..., o] = sum_i x[..., i] * W[i, o] (+ b[o])."""
    if a.shape[-1] != weights.shape[0]:
        raise ShapeError(
            f"affine: input last axis {a.shape[-1]} != weight rows {weights.shape[0]}")
    out = a.data @ weights.data
    if bias is not None:
        if bias.shape != (weights.shape[1],):
            raise ShapeError(
                f"affine: bias shape {bias.shape} != ({weights.shape[1]},)")
        out = out + bias.data

    def bwd(g):
        ga = g @ weights.data.T
        g2 = g.reshape(-1, g.shape[-1])
        a2 = a.data.reshape(-1, a.shape[-1])
        gw = a2.T @ g2
        gb = None if bias is None else g2.sum(axis=0)
        return (ga, gw) if bias is None else (ga, gw, gb)

    inputs = (a, weights) if bias is None else (a, weights, bias)
    return _record("affine", inputs, out, bwd)


def conv2d(a: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int | str = "same") -> Tensor:
    """2-D cross-correlation, NHWC layout, square odd kernel.

    a: (N, H, W, Cin); kernel: (k, k, Cin, Cout); output (N, H', W', Cout)
    with H' = floor((H + 2*pad - k)/stride) + 1. ``padding="same"`` selects
    pad = (k-1)/2.
    """
    if a.ndim != 4:
        raise ShapeError(f"conv2d: input must be rank 4 (N,H,W,Cin), got {a.shape}")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"conv2d: kernel must be (k,k,Cin,Cout), got {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 != 1:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if kernel.shape[2] != a.shape[3]:
        raise ShapeError(
            f"conv2d: input channel axis {a.shape[3]} != kernel Cin {kernel.shape[2]}")
    pad = (k - 1) // 2 if padding == "same" else int(padding)
    n, h, w, cin = a.shape
    cout = kernel.shape[3]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: empty output {ho}x{wo} for input {h}x{w}, k={k}")

    xp = np.pad(a.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else a.data
    s0, s1, s2, s3 = xp.strides
    windows = as_strided(xp, (n, ho, wo, k, k, cin),
                         (s0, s1 * stride, s2 * stride, s1, s2, s3))
    out = np.tensordot(windows, kernel.data, axes=([3, 4, 5], [0, 1, 2]))
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        out = out + bias.data

    input_needs_grad = a.requires_grad

    def bwd(g):
        # both weight and input gradients reduce to one large matrix product
        gk = np.tensordot(windows, g, axes=([0, 1, 2], [0, 1, 2]))
        ga = None
        if input_needs_grad:
            g2 = np.ascontiguousarray(g).reshape(-1, cout)
            k2d = kernel.data.reshape(-1, cout)
            gcol = (g2 @ k2d.T).reshape(n, ho, wo, k, k, cin)
            gxp = np.zeros_like(xp)
            span = (ho - 1) * stride + 1
            span_w = (wo - 1) * stride + 1
            for ki in range(k):
                for kj in range(k):
                    gxp[:, ki:ki + span:stride, kj:kj + span_w:stride, :] += \
                        gcol[:, :, :, ki, kj, :]
            ga = gxp[:, pad:pad + h, pad:pad + w, :] if pad else gxp
        gb = None if bias is None else g.sum(axis=(0, 1, 2))
        return (ga, gk) if bias is None else (ga, gk, gb)

    inputs = (a, kernel) if bias is None else (a, kernel, bias)
    return _record("conv2d", inputs, out, bwd)


# ---------------------------------------------------------------------------
# sampling

def bilinear_sample(fmap: Tensor, coords) -> Tensor:
    """Bilinear lookup of fmap (N,H,W,C) at fractional (y, x) grid positions.

    coords has shape (N, ..., 2); output is (N, ..., C). Samples falling
    outside the map contribute zero, as do their gradients. When coords is a
    Tensor the gradient also flows into the coordinates (piecewise-linear;
    the subgradient at integer crossings uses the floor cell).
    """
    coords_t = coords if isinstance(coords, Tensor) else None
    cd = coords.data if coords_t is not None else np.asarray(coords, dtype=fmap.data.dtype)
    if cd.shape[0] != fmap.shape[0] or cd.shape[-1] != 2:
        raise ShapeError(
            f"bilinear_sample: coords shape {cd.shape} incompatible with map {fmap.shape}")
    n, h, w, c = fmap.shape
    y, x = cd[..., 0], cd[..., 1]
    y0f = np.floor(y)
    x0f = np.floor(x)
    fy = y - y0f          # fractional parts stay in the map's dtype
    fx = x - x0f
    y0 = y0f.astype(np.int64)
    x0 = x0f.astype(np.int64)
    nidx = np.arange(n).reshape((n,) + (1,) * (cd.ndim - 2))
    nidx = np.ascontiguousarray(np.broadcast_to(nidx, y0.shape))

    corners = []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yi, xi = y0 + dy, x0 + dx
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            yc = np.clip(yi, 0, h - 1)
            xc = np.clip(xi, 0, w - 1)
            vals = fmap.data[nidx, yc, xc]  # (..., C)
            wgt = (wy * wx) * valid
            corners.append((yc, xc, vals, wgt, valid, dy, dx))

    out = sum(vals * wgt[..., None] for _, _, vals, wgt, _, _, _ in corners)
    coords_need_grad = coords_t is not None and coords_t.requires_grad

    def bwd(g):
        gf = None
        if fmap.requires_grad:
            gf = np.zeros_like(fmap.data)
            for yc, xc, _, wgt, _, _, _ in corners:
                np.add.at(gf, (nidx, yc, xc), g * wgt[..., None])
        if not coords_need_grad:
            return (gf, None)
        gy = np.zeros_like(fy)
        gx = np.zeros_like(fx)
        for yc, xc, vals, _, valid, dy, dx in corners:
            dot = (g * vals).sum(axis=-1) * valid
            wy_d = 1.0 if dy == 1 else -1.0
            wx_d = 1.0 if dx == 1 else -1.0
            wy = fy if dy == 1 else 1.0 - fy
            wx = fx if dx == 1 else 1.0 - fx
            gy += dot * wy_d * wx
            gx += dot * wy * wx_d
        gc = np.stack([gy, gx], axis=-1)
        return (gf, gc)

    inputs = (fmap,) if coords_t is None else (fmap, coords_t)
    return _record("bilinear_sample", inputs, out, bwd)


def _interp_matrix(out_dim: int, in_dim: int, dt) -> np.ndarray:
    """Row-stochastic 1-D bilinear interpolation matrix (half-pixel centers)."""
    src = np.clip((np.arange(out_dim) + 0.5) * (in_dim / out_dim) - 0.5,
                  0, in_dim - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_dim - 1)
    frac = src - lo
    m = np.zeros((out_dim, in_dim), dtype=dt)
    m[np.arange(out_dim), lo] += 1.0 - frac
    m[np.arange(out_dim), hi] += frac
    return m


def resize_bilinear(fmap: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resize (half-pixel centers) of (N,H,W,C).

    Separable: out = Ry . fmap . Rx^T, so forward and backward are plain
    matrix products with fixed interpolation matrices.
    """
    n, h, w, c = fmap.shape
    if out_h == h and out_w == w:
        return _record("resize_bilinear", (fmap,), fmap.data.copy(), lambda g: (g,))
    dt = fmap.data.dtype
    ry = _interp_matrix(out_h, h, dt)
    rx = _interp_matrix(out_w, w, dt)

    def apply(mat_y, mat_x, arr):
        tmp = np.tensordot(mat_y, arr, axes=([1], [1]))        # (OH, N, W, C)
        out = np.tensordot(mat_x, tmp, axes=([1], [2]))        # (OW, OH, N, C)
        return out.transpose(2, 1, 0, 3)

    out = apply(ry, rx, fmap.data)

    def bwd(g):
        return (apply(ry.T, rx.T, g),)

    return _record("resize_bilinear", (fmap,), out, bwd)
