"""Wavelet multi-view stereo: per-view feature extraction, plane-sweep
warping, and the cascaded spatial volumes plus the frequency volume."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import functional as F
from . import wavelet
from .config import ModelConfig
from .geometry import CameraView, GeometryError, in_image, to_grid
from .nn import Conv2d, Module
from .tensor import (
    ShapeError,
    Tensor,
    _make,
    concat,
    elu,
    gather_matrix,
    reshape,
    sparse_apply,
    stack,
    transpose,
)

LEVEL_SCALES = (0.25, 0.5, 1.0)
FREQ_SCALE = 0.5


class CNN(Module):
    """Three 3x3 convolutions with ELU between them; symmetric padding keeps
    a constant input constant."""

    def __init__(self, c_in, c_out, rng, c_mid=None):
        c_mid = c_mid or c_out
        self.convs = [Conv2d(c_in, c_mid, 3, rng), Conv2d(c_mid, c_mid, 3, rng),
                      Conv2d(c_mid, c_out, 3, rng)]

    def __call__(self, x):
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = elu(x)
        return x


@dataclass
class FeatureMaps:
    spatial: list          # f_s^(0..2), Tensors (V, C_l, H/2^(2-l), W/2^(2-l))
    freq: Tensor           # f_w, (V, C_w, H/2, W/2)
    hf: np.ndarray         # compounded high-frequency maps (V, 6C, H/2, W/2)
    images: np.ndarray     # (V, C, H, W)


class FeatureNet(Module):
    def __init__(self, cfg: ModelConfig, rng, in_channels=3):
        c0, c1, c2 = cfg.spatial_channels
        cl = cfg.latent_channels
        self.cnn0 = CNN(in_channels, c0, rng)
        self.iwb1 = wavelet.InverseWaveletBlock(in_channels, 3 * in_channels, cl, rng)
        self.cnn1 = CNN(c0 + cl, c1, rng)
        self.iwb2 = wavelet.InverseWaveletBlock(cl, 3 * in_channels, cl, rng)
        self.cnn2 = CNN(c1 + cl, c2, rng)
        self.cnnw = CNN(6 * in_channels, cfg.freq_channels, rng)

    def __call__(self, images):
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        if single:
            images = images[None]
        if images.shape[-2] % 4 or images.shape[-1] % 4:
            raise ShapeError(f"image extents {images.shape[-2:]} not divisible by 4")
        pyramids = [wavelet.decompose(img) for img in images]
        w_low = Tensor(np.stack([p.low for p in pyramids]))
        bands = [Tensor(np.stack([np.concatenate(p.high[lvl]) for p in pyramids]))
                 for lvl in range(2)]
        hf = np.stack([wavelet.compound_hf(p) for p in pyramids])

        f0 = self.cnn0(w_low)
        lat1 = self.iwb1(w_low, bands[0])
        f1 = self.cnn1(concat([F.upsample2x(f0), lat1], axis=1))
        lat2 = self.iwb2(lat1, bands[1])
        f2 = self.cnn2(concat([F.upsample2x(f1), lat2], axis=1))
        fw = self.cnnw(Tensor(hf))
        return FeatureMaps(spatial=[f0, f1, f2], freq=fw, hf=hf, images=images)


def extract_features(view: CameraView, net: FeatureNet) -> FeatureMaps:
    return net(view.image)


# -- plane sweep ------------------------------------------------------------

def _pixel_centres(h, w):
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([cols + 0.5, rows + 0.5], axis=-1)


def warp_coords(cam_src: CameraView, cam_ref: CameraView, depth, scale, h, w):
    """Grid coordinates in the source map for every reference pixel at
    ``depth`` (broadcastable to (..., h, w)); also returns the validity mask."""
    depth = np.broadcast_to(np.asarray(depth, dtype=np.float64), np.broadcast_shapes(
        np.shape(depth), (h, w)))
    uv = np.broadcast_to(_pixel_centres(h, w), depth.shape + (2,))
    pts = cam_ref.backproject(uv, depth, scale)
    uv_src, z_src = cam_src.project(pts, scale)
    valid = (z_src > 1e-9) & in_image(uv_src, h, w)
    return to_grid(uv_src), valid


def homography_warp(feat, cam_v: CameraView, cam_ref: CameraView, depth, scale=1.0):
    """Resample a (C, h, w) map of view v into the reference frustum at one depth."""
    feat = feat if isinstance(feat, Tensor) else Tensor(feat)
    c, h, w = feat.shape
    for cam in (cam_v, cam_ref):
        if abs(np.linalg.det(cam.K)) < 1e-12:
            raise GeometryError(f"{cam.name}: singular intrinsics")
    xy, valid = warp_coords(cam_v, cam_ref, depth, scale, h, w)
    mat, _ = F.bilinear_matrix(xy.reshape(-1, 2), h, w)
    flat = transpose(reshape(feat, (c, h * w)), (1, 0))
    out = transpose(sparse_apply(mat, flat), (1, 0))
    return reshape(out, (c, h, w)), valid


@dataclass
class FeatureVolume:
    level: object                # 0, 1, 2 or "freq"
    hypotheses: np.ndarray       # (D, h, w) camera depths, increasing along D
    cells: Tensor                # (D, h, w, 2C): variance then mean
    count: np.ndarray            # (D, h, w) number of views that saw each cell
    degenerate: np.ndarray       # (D,) planes with < 2 views at every pixel
    ref: int
    scale: float

    @property
    def depth_count(self):
        return self.hypotheses.shape[0]

    @property
    def channels(self):
        return self.cells.shape[-1] // 2

    @property
    def grid(self):
        """(D, 2C, h, w) view of the cells."""
        return transpose(self.cells, (0, 3, 1, 2))

    def cost(self):
        """Per-cell matching cost: summed variance, +inf where fewer than two views agree."""
        c = self.cells.data[..., :self.channels].sum(-1)
        return np.where(self.count >= 2, c, np.inf)


def _volume_stats(ref_flat, src, idx, wts, mask, depth_count):
    """Fused warp + per-cell variance/mean over views, with count renormalisation.

    ``ref_flat`` is (hw, C); ``src`` stacks the other views as (S, hw, C).
    """
    out, mean, inv_n = _kernels.volume_stats_fwd(ref_flat.data, src.data, idx, wts, mask,
                                                 depth_count)

    def backward(g):
        g_ref, g_src = _kernels.volume_stats_bwd(np.ascontiguousarray(g), ref_flat.data,
                                                 src.data, idx, wts, mask, mean, inv_n,
                                                 depth_count)
        return g_ref, g_src

    return _make(out, (ref_flat, src), backward)


_taps_cache: dict = {}


def _camera_key(cam):
    return cam.K.tobytes() + cam.R.tobytes() + cam.t.tobytes()


def _warp_taps(cams, ref, others, hyp, scale, h, w, cache=False):
    """Bilinear taps of every other view for every reference cell.  Sweeps
    over fixed planes repeat every training step, so those are cached."""
    key = (tuple(_camera_key(cams[i]) for i in [ref] + others), scale, h, w,
           hyp.shape, hash(hyp.tobytes()))
    if cache and key in _taps_cache:
        return _taps_cache[key]
    n = hyp.size
    idx = np.empty((len(others), n, 4), dtype=np.int64)
    wts = np.empty((len(others), n, 4))
    mask = np.empty((len(others), n))
    for s, i in enumerate(others):
        xy, valid = warp_coords(cams[i], cams[ref], hyp, scale, h, w)
        ti, tw, _ = F.bilinear_taps(xy.reshape(-1, 2), h, w)
        valid = valid.reshape(-1)
        idx[s], wts[s] = ti, tw * valid[:, None]
        mask[s] = valid
    if cache:
        if len(_taps_cache) > 32:
            _taps_cache.clear()
        _taps_cache[key] = (idx, wts, mask)
    return idx, wts, mask


def build_volume(maps, cams, ref, hypotheses, scale, level=0):
    """Plane-sweep volume in the frustum of ``cams[ref]``.

    ``maps`` is (V, C, h, w); ``hypotheses`` is (D,) or (D, h, w) depths.
    Invalid source samples drop out of the statistics of their cell.
    """
    maps = maps if isinstance(maps, Tensor) else Tensor(maps)
    v, c, h, w = maps.shape
    if v < 2 or len(cams) != v:
        raise ValueError(f"build_volume needs >= 2 views with cameras, got {v} maps, "
                         f"{len(cams)} cameras")
    hyp = np.asarray(hypotheses, dtype=np.float64)
    planar = hyp.ndim == 1
    if planar:
        hyp = np.broadcast_to(hyp[:, None, None], (len(hyp), h, w)).copy()
    if np.any(np.diff(hyp, axis=0) <= 0):
        raise ValueError("depth hypotheses must be strictly increasing")
    d = hyp.shape[0]
    flat = reshape(transpose(maps, (0, 2, 3, 1)), (v, h * w, c))
    others = [i for i in range(v) if i != ref]
    idx, wts, mask = _warp_taps(cams, ref, others, hyp, scale, h, w, cache=planar)
    src = stack([flat[i] for i in others])
    cells = _volume_stats(flat[ref], src, idx, wts, mask, d)
    count = (1.0 + mask.sum(0)).reshape(d, h, w)
    degenerate = (count < 2).all(axis=(1, 2))
    return FeatureVolume(level=level, hypotheses=hyp, cells=reshape(cells, (d, h, w, 2 * c)),
                         count=count, degenerate=degenerate, ref=ref, scale=scale)


def uniform_hypotheses(near, far, count):
    return np.linspace(near, far, count)


def refine_hypotheses(vol: FeatureVolume, count, near, far, span):
    """Hypotheses for the next cascade level: ``count`` uniform planes over
    ``span`` centred on the variance-argmin depth, at twice the resolution."""
    cost = vol.cost()
    idx = np.argmin(cost, axis=0)
    centre = np.take_along_axis(vol.hypotheses, idx[None], axis=0)[0]
    centre = np.where(np.isfinite(cost).any(axis=0), centre, 0.5 * (near + far))
    centre = np.repeat(np.repeat(centre, 2, axis=0), 2, axis=1)
    start = np.clip(centre - 0.5 * span, near, far - span)
    return start[None] + np.linspace(0.0, span, count)[:, None, None]


def argmin_depth(vol: FeatureVolume):
    idx = np.argmin(vol.cost(), axis=0)
    return np.take_along_axis(vol.hypotheses, idx[None], axis=0)[0]


@dataclass
class SceneFeatures:
    cams: list
    maps: FeatureMaps
    spatial: list   # [level][ref] -> FeatureVolume
    freq: list      # [ref] -> FeatureVolume


def wmvs(cams, net: FeatureNet, cfg: ModelConfig) -> SceneFeatures:
    """Feature maps for every posed view plus, with each view as reference,
    the three cascaded spatial volumes and the frequency volume."""
    if len(cams) < 2:
        raise ValueError("wmvs needs at least two posed views")
    maps = net(np.stack([cam.image for cam in cams]))
    n = len(cams)
    spatial = [[None] * n for _ in range(3)]
    freq = []
    for ref, cam in enumerate(cams):
        hyp = uniform_hypotheses(cam.near, cam.far, cfg.depth_planes[0])
        span = cam.far - cam.near
        for lvl in range(3):
            vol = build_volume(maps.spatial[lvl], cams, ref, hyp, LEVEL_SCALES[lvl], lvl)
            spatial[lvl][ref] = vol
            if lvl < 2:
                span *= 0.5
                hyp = refine_hypotheses(vol, cfg.depth_planes[lvl + 1], cam.near, cam.far, span)
        freq.append(build_volume(maps.freq, cams, ref,
                                 uniform_hypotheses(cam.near, cam.far, cfg.freq_planes),
                                 FREQ_SCALE, "freq"))
    return SceneFeatures(cams=list(cams), maps=maps, spatial=spatial, freq=freq)


# -- sampling volumes at world points ----------------------------------------

def volume_matrix(vol: FeatureVolume, cam: CameraView, points, margin=0.5):
    """Sparse trilinear sampling matrix for world points in ``vol``'s frustum.

    Depth interpolation is done per corner pixel because the cascade levels
    carry per-pixel hypotheses.  Returns (matrix, inside-image mask,
    inside-depth-range mask).
    """
    d, h, w = vol.hypotheses.shape
    uv, z = cam.project(points, vol.scale)
    xy = to_grid(uv)
    x0, x1, fx, vx = F._axis_weights(xy[:, 0], w, margin)
    y0, y1, fy, vy = F._axis_weights(xy[:, 1], h, margin)
    front = z > 1e-9
    h0 = vol.hypotheses[0]
    step = vol.hypotheses[1] - vol.hypotheses[0]
    idx, wts = [], []
    depth_ok = np.ones(len(z), dtype=bool)
    for yi, wy in ((y0, 1 - fy), (y1, fy)):
        for xi, wx in ((x0, 1 - fx), (x1, fx)):
            dc = (z - h0[yi, xi]) / step[yi, xi]
            z0, z1, fz, vz = F._axis_weights(dc, d, margin)
            depth_ok &= vz
            for zi, wz in ((z0, 1 - fz), (z1, fz)):
                idx.append((zi * h + yi) * w + xi)
                wts.append(wz * wy * wx)
    mat = gather_matrix(np.stack(idx, 1), np.stack(wts, 1), d * h * w)
    return mat, vx & vy & front, depth_ok & front


def sample_volume(vol: FeatureVolume, cam: CameraView, points, margin=0.5):
    """(M, 2C) trilinear samples of ``vol`` at world points, plus masks."""
    mat, in_img, in_depth = volume_matrix(vol, cam, points, margin)
    d, h, w, c2 = vol.cells.shape
    return sparse_apply(mat, reshape(vol.cells, (d * h * w, c2))), in_img, in_depth
