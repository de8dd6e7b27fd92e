"""Convolution and grid-interpolation ops built on :mod:`wavenerf.tensor`."""
from __future__ import annotations

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    _make,
    as_tensor,
    gather_matrix,
    pad2d,
    reshape,
    sparse_apply,
    transpose,
)


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def _out_len(n, k, s, d):
    return (n - d * (k - 1) - 1) // s + 1


def _im2col(x, kh, kw, s, d, ho, wo):
    # x: (N, C, H, W) -> (N, C, kh, kw, ho, wo)
    n, c = x.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * d[0], j * d[1]
            cols[:, :, i, j] = x[:, :, r0:r0 + s[0] * (ho - 1) + 1:s[0],
                                 c0:c0 + s[1] * (wo - 1) + 1:s[1]]
    return cols


def _col2im(cols, h, w, s, d):
    n, c, kh, kw, ho, wo = cols.shape
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * d[0], j * d[1]
            out[:, :, r0:r0 + s[0] * (ho - 1) + 1:s[0],
                c0:c0 + s[1] * (wo - 1) + 1:s[1]] += cols[:, :, i, j]
    return out


def _conv_valid(x, w, stride, dilation):
    """Cross-correlation of (N, C, H, W) with (O, C, kh, kw), no padding."""
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cw}")
    ho, wo = _out_len(h, kh, stride[0], dilation[0]), _out_len(wd, kw, stride[1], dilation[1])
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: kernel {(kh, kw)} (dilation {dilation}) larger than padded input {(h, wd)}")
    cols = _im2col(x.data, kh, kw, stride, dilation, ho, wo)
    out = np.tensordot(cols, w.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)

    def backward(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        if x.requires_grad:
            gcols = np.tensordot(w.data, g, axes=([0], [1]))  # C,kh,kw,N,ho,wo
            gx = _col2im(gcols.transpose(3, 0, 1, 2, 4, 5), h, wd, stride, dilation)
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, w), backward)


def conv2d(x, w, bias=None, stride=1, dilation=1, padding=0, padding_mode="zeros"):
    """2D cross-correlation.  ``x`` is (C, H, W) or (N, C, H, W);
    ``w`` is (O, C, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks {x.shape}, {w.shape}")
    stride, dilation, padding = _pair(stride), _pair(dilation), _pair(padding)
    if min(stride) < 1 or min(dilation) < 1:
        raise ValueError("stride and dilation must be >= 1")
    xp = pad2d(x, (padding[0],) * 2, (padding[1],) * 2, padding_mode)
    out = _conv_valid(xp, w, stride, dilation)
    if bias is not None:
        out = out + reshape(as_tensor(bias), (1, -1, 1, 1))
    return reshape(out, out.shape[1:]) if squeeze else out


def deconv2d(x, w, bias=None, stride=1, dilation=1, padding=0, output_padding=0):
    """Transposed convolution, the adjoint of :func:`conv2d` with zero padding.

    ``x`` is (O, H, W) or (N, O, H, W); ``w`` is (O, C, kh, kw) and the
    result has C channels.
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    stride, dilation = _pair(stride), _pair(dilation)
    padding, output_padding = _pair(padding), _pair(output_padding)
    if min(stride) < 1 or min(dilation) < 1:
        raise ValueError("stride and dilation must be >= 1")
    n, o, h, wd = x.shape
    ow, c, kh, kw = w.shape
    if o != ow:
        raise ShapeError(f"deconv2d: input has {o} channels, kernel expects {ow}")
    hc = (h - 1) * stride[0] + dilation[0] * (kh - 1) + 1 + output_padding[0]
    wc = (wd - 1) * stride[1] + dilation[1] * (kw - 1) + 1 + output_padding[1]
    if hc - 2 * padding[0] < 1 or wc - 2 * padding[1] < 1:
        raise ShapeError(f"deconv2d: padding {padding} exceeds output extent {(hc, wc)}")
    xd = x.data
    gcols = np.tensordot(w.data, xd, axes=([0], [1]))  # C,kh,kw,N,h,w
    canvas = _col2im(gcols.transpose(3, 0, 1, 2, 4, 5), hc, wc, stride, dilation)
    p0, p1 = padding
    out = canvas[:, :, p0:hc - p0, p1:wc - p1]

    def backward(g):
        gfull = np.zeros((n, c, hc, wc))
        gfull[:, :, p0:hc - p0, p1:wc - p1] = g
        cols = _im2col(gfull, kh, kw, stride, dilation, h, wd)  # N,C,kh,kw,h,w
        gx = gw = None
        if x.requires_grad:
            gx = np.tensordot(cols, w.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = np.tensordot(xd, cols, axes=([0, 2, 3], [0, 4, 5]))
        return gx, gw

    res = _make(np.ascontiguousarray(out), (x, w), backward)
    if bias is not None:
        res = res + reshape(as_tensor(bias), (1, -1, 1, 1))
    return reshape(res, res.shape[1:]) if squeeze else res


# -- interpolation ----------------------------------------------------------

def _axis_weights(coord, n, margin):
    """Clamp a grid coordinate and return (i0, i1, frac, valid)."""
    valid = (coord >= -margin) & (coord <= n - 1 + margin) & np.isfinite(coord)
    c = np.clip(np.nan_to_num(coord), 0.0, n - 1)
    i0 = np.minimum(np.floor(c).astype(np.int64), max(n - 2, 0))
    frac = c - i0
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, frac, valid


def bilinear_taps(xy, h, w, margin=0.5):
    """Four-tap bilinear indices and weights for grid coordinates ``xy`` (M, 2).

    Node (i, j) sits at coordinate (j, i).  Coordinates are clamped to the
    grid; those further than ``margin`` outside are flagged invalid.
    """
    xy = np.asarray(xy, dtype=np.float64)
    x0, x1, fx, vx = _axis_weights(xy[:, 0], w, margin)
    y0, y1, fy, vy = _axis_weights(xy[:, 1], h, margin)
    idx = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=1)
    wts = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=1)
    return idx, wts, vx & vy


def bilinear_matrix(xy, h, w, margin=0.5):
    """Sparse (M, h*w) sampling matrix and validity mask for grid coordinates."""
    idx, wts, valid = bilinear_taps(xy, h, w, margin)
    return gather_matrix(idx, wts, h * w), valid


def interpolate_bilinear(fmap, xy, margin=0.5):
    """Sample a (C, H, W) map at grid coordinates ``xy`` (M, 2).

    Returns the (M, C) samples and a boolean validity mask.
    """
    fmap = as_tensor(fmap)
    c, h, w = fmap.shape
    mat, valid = bilinear_matrix(xy, h, w, margin)
    flat = transpose(reshape(fmap, (c, h * w)), (1, 0))
    return sparse_apply(mat, flat), valid


def trilinear_matrix(xyz, d, h, w, margin=0.5):
    """Sparse sampling matrix for coordinates (col, row, plane) in a (D, H, W) grid."""
    xyz = np.asarray(xyz, dtype=np.float64)
    x0, x1, fx, vx = _axis_weights(xyz[:, 0], w, margin)
    y0, y1, fy, vy = _axis_weights(xyz[:, 1], h, margin)
    z0, z1, fz, vz = _axis_weights(xyz[:, 2], d, margin)
    idx, wts = [], []
    for zi, wz in ((z0, 1 - fz), (z1, fz)):
        for yi, wy in ((y0, 1 - fy), (y1, fy)):
            for xi, wx in ((x0, 1 - fx), (x1, fx)):
                idx.append((zi * h + yi) * w + xi)
                wts.append(wz * wy * wx)
    return gather_matrix(np.stack(idx, 1), np.stack(wts, 1), d * h * w), vx & vy & vz


def interpolate_trilinear(volume, xyz, margin=0.5):
    """Sample a (D, C, H, W) volume at (col, row, plane) coordinates (M, 3)."""
    volume = as_tensor(volume)
    d, c, h, w = volume.shape
    mat, valid = trilinear_matrix(xyz, d, h, w, margin)
    cells = reshape(transpose(volume, (0, 2, 3, 1)), (d * h * w, c))
    return sparse_apply(mat, cells), valid


_resize_cache: dict = {}


def resize_matrix(h, w, ho, wo):
    """Bilinear resampling matrix from (h, w) to (ho, wo) with aligned pixel areas."""
    key = (h, w, ho, wo)
    if key not in _resize_cache:
        rows, cols = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        x = (cols.ravel() + 0.5) * (w / wo) - 0.5
        y = (rows.ravel() + 0.5) * (h / ho) - 0.5
        mat, _ = bilinear_matrix(np.stack([x, y], 1), h, w, margin=np.inf)
        _resize_cache[key] = mat
    return _resize_cache[key]


def upsample2x(x):
    """Bilinear 2x upsampling of a (C, H, W) or (N, C, H, W) tensor."""
    x = as_tensor(x)
    lead, (h, w) = x.shape[:-2], x.shape[-2:]
    mat = resize_matrix(h, w, 2 * h, 2 * w)
    flat = transpose(reshape(x, (-1, h * w)), (1, 0))
    up = transpose(sparse_apply(mat, flat), (1, 0))
    return reshape(up, lead + (2 * h, 2 * w))


def resize_array(a, ho, wo):
    """Bilinear resize of a plain array (..., H, W)."""
    a = np.asarray(a, dtype=np.float64)
    lead, (h, w) = a.shape[:-2], a.shape[-2:]
    mat = resize_matrix(h, w, ho, wo)
    flat = a.reshape(-1, h * w).T
    return np.asarray(mat @ flat).T.reshape(lead + (ho, wo))


__all__ = [
    "Tensor",
    "bilinear_matrix",
    "conv2d",
    "deconv2d",
    "interpolate_bilinear",
    "interpolate_trilinear",
    "resize_array",
    "resize_matrix",
    "trilinear_matrix",
    "upsample2x",
]
