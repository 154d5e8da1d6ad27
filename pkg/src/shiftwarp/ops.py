"""Differentiable structured operations on 2-D and 4-D tensors.

Convolution, pooling, bilinear resize, exclusive row cumsum, centered
zero-padding, dense matmul, and the horizontal sub-pixel warp.  Forward
values are computed with vectorized numpy; each op registers a closure
that routes the adjoint back to its parents.

Bilinear resize follows the half-pixel (align-corners-false) convention
throughout: source coordinate = (i + 0.5) * in/out - 0.5, clamped.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, InvariantError
from .tensor import Node

WARP_EDGE_SLACK = 1e-9


# ---------------------------------------------------------------------------
# 2-D convolution (cross-correlation), im2col-backed
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            out_h: int, out_w: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * out_h:stride,
                                  j:j + stride * out_w:stride]
    return cols.reshape(n, c * kh * kw, out_h * out_w)


def _col2im(dcols: np.ndarray, padded_shape, kh: int, kw: int, stride: int,
            out_h: int, out_w: int) -> np.ndarray:
    n, c, hp, wp = padded_shape
    dxp = np.zeros((n, c, hp, wp), dtype=np.float64)
    dcols = dcols.reshape(n, c, kh, kw, out_h, out_w)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * out_h:stride,
                j:j + stride * out_w:stride] += dcols[:, :, i, j]
    return dxp


def conv2d(x: Node, w: Node, b: Node, stride: int = 1, pad: str | int = "same") -> Node:
    """Batched 2-D cross-correlation with odd kernels and 'same' or 0 padding."""
    n, cin, h, wd = x.value.shape
    cout, cin_w, kh, kw = w.value.shape
    if cin != cin_w:
        raise DimensionError(f"input has {cin} channels but kernel expects {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError("kernel extents must be odd")
    if stride < 1:
        raise ContractError("stride must be >= 1")
    if pad not in ("same", 0):
        raise ContractError("pad must be 'same' or 0")

    if pad == "same":
        out_h = -(-h // stride)
        out_w = -(-wd // stride)
        pad_h = max((out_h - 1) * stride + kh - h, 0)
        pad_w = max((out_w - 1) * stride + kw - wd, 0)
        pt, pl = pad_h // 2, pad_w // 2
        xp = np.pad(x.value, ((0, 0), (0, 0), (pt, pad_h - pt), (pl, pad_w - pl)))
    else:
        out_h = (h - kh) // stride + 1
        out_w = (wd - kw) // stride + 1
        if out_h < 1 or out_w < 1:
            raise DimensionError("kernel larger than unpadded input")
        pt = pl = 0
        xp = x.value

    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    wmat = w.value.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat, cols) + b.value.reshape(1, cout, 1)
    value = out.reshape(n, cout, out_h, out_w)
    padded_shape = xp.shape

    def backward(g):
        gmat = g.reshape(n, cout, out_h * out_w)
        if b.requires_grad:
            b.accumulate(gmat.sum(axis=(0, 2)))
        if w.requires_grad:
            gw = np.matmul(gmat.transpose(1, 0, 2).reshape(cout, -1),
                           cols.transpose(1, 0, 2).reshape(cin * kh * kw, -1).T)
            w.accumulate(gw.reshape(w.value.shape))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gmat)
            dxp = _col2im(dcols, padded_shape, kh, kw, stride, out_h, out_w)
            x.accumulate(dxp[:, :, pt:pt + h, pl:pl + wd])

    return Node._op(value, (x, w, b), backward)


def conv1d_column(x: Node, w: Node, b: Node) -> Node:
    """Collapse an H x W map to one row: out[0,c] = sum_r w[r]*x[r,c] + b."""
    h, _ = x.value.shape
    if w.value.shape != (h,):
        raise DimensionError(
            f"column filter length {w.value.shape} does not match height {h}")
    value = (w.value @ x.value + b.value).reshape(1, -1)

    def backward(g):
        row = g.reshape(-1)
        w.accumulate(x.value @ row)
        x.accumulate(np.outer(w.value, row))
        b.accumulate(np.asarray(row.sum()).reshape(b.value.shape))

    return Node._op(value, (x, w, b), backward)


def repeat_row(x: Node, rows: int) -> Node:
    """Duplicate a 1 x W row into rows x W; the adjoint sums over rows."""
    if x.value.shape[0] != 1:
        raise DimensionError(f"expected a single row, got {x.value.shape}")
    value = np.broadcast_to(x.value, (rows, x.value.shape[1])).copy()

    def backward(g):
        x.accumulate(g.sum(axis=0, keepdims=True))

    return Node._op(value, (x,), backward)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

def maxpool2(x: Node) -> Node:
    """2x2 stride-2 max pooling; odd trailing rows/cols are dropped.

    Ties resolve to the first element of the window in row-major order, so
    gradients are deterministic.
    """
    n, c, h, w = x.value.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise DimensionError(f"input {h}x{w} too small to pool")
    xc = x.value[:, :, :2 * h2, :2 * w2]
    windows = xc.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h2, w2, 4)
    idx = windows.argmax(axis=-1)
    value = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros((n, c, h2, w2, 4), dtype=np.float64)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dxc = dwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros_like(x.value)
        dx[:, :, :2 * h2, :2 * w2] = dxc.reshape(n, c, 2 * h2, 2 * w2)
        x.accumulate(dx)

    return Node._op(value, (x,), backward)


# ---------------------------------------------------------------------------
# Bilinear resize as a pair of sparse-in-structure interpolation matrices
# ---------------------------------------------------------------------------

def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-D interpolation matrix for half-pixel bilinear resize."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, i1), f)
    return m


def resize_bilinear(x: Node, out_h: int, out_w: int) -> Node:
    """Differentiable bilinear resize of the last two axes."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"zero-size resize target {out_h}x{out_w}")
    h, w = x.value.shape[-2:]
    mh = resize_matrix(h, out_h)
    mw = resize_matrix(w, out_w)
    value = np.matmul(np.matmul(mh, x.value), mw.T)

    def backward(g):
        x.accumulate(np.matmul(np.matmul(mh.T, g), mw))

    return Node._op(value, (x,), backward)


# ---------------------------------------------------------------------------
# Exclusive cumulative sum over the last axis
# ---------------------------------------------------------------------------

def cumsum_row_exclusive(x: Node) -> Node:
    """out[..., 0] = 0; out[..., k] = sum of x[..., :k]."""
    cs = np.cumsum(x.value, axis=-1)
    value = np.empty_like(x.value)
    value[..., 0] = 0.0
    value[..., 1:] = cs[..., :-1]

    def backward(g):
        suffix = np.flip(np.cumsum(np.flip(g, axis=-1), axis=-1), axis=-1)
        x.accumulate(suffix - g)

    return Node._op(value, (x,), backward)


# ---------------------------------------------------------------------------
# Dense layer support
# ---------------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.value.shape[-1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul inner extents differ: {a.value.shape} @ {b.value.shape}")
    value = a.value @ b.value

    def backward(g):
        a.accumulate(g @ b.value.T)
        b.accumulate(a.value.T @ g)

    return Node._op(value, (a, b), backward)


# ---------------------------------------------------------------------------
# Centered zero padding to a wider canvas
# ---------------------------------------------------------------------------

def pad_width_centered(x: Node, width: int) -> Node:
    """Place an N,C,H,W' block centered on a zero canvas of width W >= W'."""
    n, c, h, w_in = x.value.shape
    if w_in > width:
        raise ContractError(f"cannot pad width {w_in} down to {width}")
    left = (width - w_in) // 2
    value = np.zeros((n, c, h, width), dtype=np.float64)
    value[:, :, :, left:left + w_in] = x.value

    def backward(g):
        x.accumulate(g[:, :, :, left:left + w_in])

    return Node._op(value, (x,), backward)


# ---------------------------------------------------------------------------
# Horizontal sub-pixel warp (gather at x + S with a 2-tap stencil)
# ---------------------------------------------------------------------------

def warp_width(img: Node, shift: Node) -> Node:
    """Sample img at source columns x + S(x,y); rows stay integral.

    img is (N,C,H,W) and shift (N,1,H,W'); the result is (N,C,H,W').
    Because rows are integral the 4-tap bilinear stencil degenerates to a
    2-tap horizontal one.  Integer coordinates use the right-sided stencil.
    """
    n, c, h, w = img.value.shape
    ns, cs, hs, w_out = shift.value.shape
    if ns != n or cs != 1 or hs != h:
        raise DimensionError(
            f"shift shape {shift.value.shape} does not match image {img.value.shape}")
    u = np.arange(w_out, dtype=np.float64)[None, None, None, :] + shift.value
    if np.any(u > w - 1 + WARP_EDGE_SLACK) or np.any(u < -WARP_EDGE_SLACK):
        raise InvariantError(
            f"warp coordinates escape [0, {w - 1}]: range "
            f"[{u.min():.6f}, {u.max():.6f}]")
    u = np.clip(u, 0.0, float(w - 1))
    i0 = u.astype(np.int64)
    i1 = np.minimum(i0 + 1, w - 1)
    frac = u - i0

    i0b = np.broadcast_to(i0, (n, c, h, w_out))
    i1b = np.broadcast_to(i1, (n, c, h, w_out))
    left = np.take_along_axis(img.value, i0b, axis=3)
    right = np.take_along_axis(img.value, i1b, axis=3)
    value = left + frac * (right - left)

    def backward(g):
        if img.requires_grad:
            dimg = np.zeros_like(img.value)
            base = np.arange(n * c * h, dtype=np.int64)[:, None] * w
            flat0 = (base + i0b.reshape(n * c * h, w_out)).ravel()
            flat1 = (base + i1b.reshape(n * c * h, w_out)).ravel()
            np.add.at(dimg.reshape(-1), flat0, ((1.0 - frac) * g).ravel())
            np.add.at(dimg.reshape(-1), flat1, (frac * g).ravel())
            img.accumulate(dimg)
        shift.accumulate(((right - left) * g).sum(axis=1, keepdims=True))

    return Node._op(value, (img, shift), backward)
