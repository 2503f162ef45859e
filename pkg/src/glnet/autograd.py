"""Minimal reverse-mode autodiff over numpy arrays, NHWC layout.

Just the operations the segmentation branches need: 3x3/1x1 convolution,
relu, 2x2 max pooling, bilinear resizing, channel concat, spatial crop, and
the fused focal / norm-penalty losses. Everything is plain numpy, so runs
are bit-reproducible on a given platform and working memory is visible to
tracemalloc-based probes.
"""

from __future__ import annotations

import contextlib
from functools import lru_cache

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; forwards run without retaining intermediates."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        order, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            order.append(t)

        visit(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(order):
            if t._bwd is not None and t.grad is not None:
                t._bwd(t.grad)
            if t._parents:
                # Intermediate results never need to keep their gradient.
                t._bwd = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def _node(data, parents, bwd) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError("add requires matching shapes")
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _node(out_data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * s)

    return _node(a.data * s, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _node(a.data * mask, (a,), bwd)


# ---------------------------------------------------------------------------
# convolutions (NHWC; weights (kh, kw, C, F))


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    n, h, wd, c = x.data.shape
    f = w.data.shape[-1]
    xp = np.zeros((n, h + 2, wd + 2, c), dtype=x.data.dtype)
    xp[:, 1:-1, 1:-1] = x.data
    flat = xp.reshape(-1, c)
    y = np.empty((n, h, wd, f), dtype=x.data.dtype)
    y[:] = b.data
    for di in range(3):
        for dj in range(3):
            t = (flat @ w.data[di, dj]).reshape(n, h + 2, wd + 2, f)
            y += t[:, di : di + h, dj : dj + wd]

    def bwd(g):
        gflat = g.reshape(-1, f)
        if w.requires_grad:
            dw = np.empty_like(w.data)
            for di in range(3):
                for dj in range(3):
                    v = np.ascontiguousarray(
                        xp[:, di : di + h, dj : dj + wd, :]
                    ).reshape(-1, c)
                    dw[di, dj] = v.T @ gflat
            w._accumulate(dw)
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for di in range(3):
                for dj in range(3):
                    dxp[:, di : di + h, dj : dj + wd] += (
                        gflat @ w.data[di, dj].T
                    ).reshape(n, h, wd, c)
            x._accumulate(dxp[:, 1:-1, 1:-1])

    return _node(y, (x, w, b), bwd)


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    n, h, wd, c = x.data.shape
    f = w.data.shape[-1]
    y = x.data.reshape(-1, c) @ w.data + b.data

    def bwd(g):
        gflat = g.reshape(-1, f)
        if w.requires_grad:
            w._accumulate(x.data.reshape(-1, c).T @ gflat)
        if b.requires_grad:
            b._accumulate(gflat.sum(axis=0))
        if x.requires_grad:
            x._accumulate((gflat @ w.data.T).reshape(n, h, wd, c))

    return _node(y.reshape(n, h, wd, f), (x, w, b), bwd)


def maxpool2(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ValueError("maxpool2 needs even spatial dims")
    blocks = x.data.reshape(n, h // 2, 2, w // 2, 2, c)
    y = blocks.max(axis=(2, 4))

    def bwd(g):
        if not x.requires_grad:
            return
        mask = blocks == y[:, :, None, :, None, :]
        counts = mask.sum(axis=(2, 4), keepdims=True)
        gb = mask * (g[:, :, None, :, None, :] / counts)
        x._accumulate(gb.reshape(n, h, w, c))

    return _node(y, (x,), bwd)


# ---------------------------------------------------------------------------
# geometry


@lru_cache(maxsize=256)
def _lerp_plan(n_in: int, n_out: int):
    """Per-axis (lo, hi, frac) sampling plan plus the dense transpose matrix."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    a_t = np.zeros((n_in, n_out), dtype=np.float64)
    a_t[lo, np.arange(n_out)] += 1.0 - frac
    a_t[hi, np.arange(n_out)] += frac
    return lo, hi, frac, a_t


def _resize_axis_fwd(data: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    lo, hi, frac, _ = _lerp_plan(data.shape[axis], n_out)
    x_lo = np.take(data, lo, axis=axis)
    x_hi = np.take(data, hi, axis=axis)
    shape = [1] * data.ndim
    shape[axis] = n_out
    f = frac.reshape(shape).astype(data.dtype)
    # lo + f*(hi-lo) keeps constant fields exactly constant.
    return x_lo + f * (x_hi - x_lo)


def _resize_axis_bwd(g: np.ndarray, axis: int, n_in: int) -> np.ndarray:
    _, _, _, a_t = _lerp_plan(n_in, g.shape[axis])
    moved = np.tensordot(a_t.astype(g.dtype), g, axes=(1, axis))
    return np.moveaxis(moved, 0, axis)


def resize_bilinear(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Separable 2-tap bilinear resize of NHWC maps (up or down)."""
    x = _as_tensor(x)
    oh, ow = out_hw
    y = _resize_axis_fwd(x.data, 1, oh)
    y = _resize_axis_fwd(y, 2, ow)

    def bwd(g):
        if not x.requires_grad:
            return
        dx = _resize_axis_bwd(g, 2, x.data.shape[2])
        dx = _resize_axis_bwd(dx, 1, x.data.shape[1])
        x._accumulate(dx)

    return _node(y, (x,), bwd)


def concat_channels(parts: list[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    y = np.concatenate([p.data for p in parts], axis=-1)
    splits = np.cumsum([p.data.shape[-1] for p in parts])[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=-1)
        for p, gp in zip(parts, pieces):
            if p.requires_grad:
                p._accumulate(gp)

    return _node(y, tuple(parts), bwd)


def crop_hw(x: Tensor, rect: tuple[int, int, int, int]) -> Tensor:
    x = _as_tensor(x)
    top, left, h, w = rect
    if top < 0 or left < 0 or top + h > x.data.shape[1] or left + w > x.data.shape[2]:
        raise ValueError("crop rect out of bounds")
    y = x.data[:, top : top + h, left : left + w].copy()

    def bwd(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        dx[:, top : top + h, left : left + w] = g
        x._accumulate(dx)

    return _node(y, (x,), bwd)


# ---------------------------------------------------------------------------
# losses

LOG_FLOOR = 1e-12


def focal_from_logits(logits: Tensor, target: np.ndarray, gamma: float) -> Tensor:
    """Mean over pixels of -(1-p_t)^gamma * log(p_t) from raw class logits.

    logits: (N, H, W, K); target: (N, H, W) integer class map. The log is
    floored at 1e-12; gamma=0 reduces to plain cross-entropy.
    """
    logits = _as_tensor(logits)
    z = logits.data
    k = z.shape[-1]
    target = np.asarray(target)
    if target.shape != z.shape[:-1]:
        raise ValueError("target shape must match logits spatial shape")
    if not np.isfinite(z).all():
        raise ValueError("logits must be finite")
    if target.min() < 0 or target.max() >= k:
        raise ValueError("target class index out of range")

    zs = z - z.max(axis=-1, keepdims=True)
    e = np.exp(zs)
    p = e / e.sum(axis=-1, keepdims=True)
    p_t = np.take_along_axis(p, target[..., None], axis=-1)[..., 0]
    log_pt = np.log(np.maximum(p_t, LOG_FLOOR))
    one_minus = 1.0 - p_t
    loss = float(np.mean(-(one_minus**gamma) * log_pt))
    n_px = p_t.size

    def bwd(g):
        if not logits.requires_grad:
            return
        g = float(g)
        inv_pt = np.where(p_t > LOG_FLOOR, 1.0 / np.maximum(p_t, LOG_FLOOR), 0.0)
        if gamma == 0.0:
            dfdp = -inv_pt
        else:
            dfdp = gamma * one_minus ** (gamma - 1.0) * log_pt - one_minus**gamma * inv_pt
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
        dz = (dfdp * p_t)[..., None] * (onehot - p) * (g / n_px)
        logits._accumulate(dz.astype(logits.data.dtype))

    return _node(np.asarray(loss, dtype=z.dtype), (logits,), bwd)


def frobenius_distance(x: Tensor, ref: np.ndarray) -> Tensor:
    """||x - ref||_F with ref held constant (no gradient flows into it)."""
    x = _as_tensor(x)
    ref = ref.data if isinstance(ref, Tensor) else np.asarray(ref)
    if x.data.shape != ref.shape:
        raise ValueError("shape mismatch in norm penalty")
    diff = x.data - ref
    nrm = float(np.sqrt(np.sum(diff.astype(np.float64) ** 2)))

    def bwd(g):
        if not x.requires_grad:
            return
        if nrm > 1e-20:
            x._accumulate((float(g) / nrm) * diff)

    return _node(np.asarray(nrm, dtype=x.data.dtype), (x,), bwd)
