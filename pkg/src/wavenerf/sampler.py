"""Stratified coarse sampling and frequency-guided fine sampling along rays.

All functions work on batches: depths are (B, N) arrays, one row per ray.
Random draws come from per-ray generators keyed by (seed, ray id, stream),
so results do not depend on how rays are batched.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mvs import volume_matrix

COARSE_STREAM, FINE_STREAM = 0, 1


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    pixel: tuple = (0, 0)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        self.direction = d / np.linalg.norm(d)
        if not self.near < self.far:
            raise ValueError(f"ray needs near < far, got {self.near}, {self.far}")


@dataclass
class Rays:
    """A batch of rays; ``ids`` key the per-ray random streams."""

    origins: np.ndarray     # (B, 3)
    dirs: np.ndarray        # (B, 3) unit
    near: np.ndarray        # (B,)
    far: np.ndarray         # (B,)
    ids: np.ndarray         # (B,) int

    def __len__(self):
        return len(self.ids)

    def points(self, z):
        return self.origins[:, None, :] + z[..., None] * self.dirs[:, None, :]

    def subset(self, sel):
        return Rays(self.origins[sel], self.dirs[sel], self.near[sel], self.far[sel],
                    self.ids[sel])

    @classmethod
    def from_camera(cls, cam, rows, cols, id_offset=0):
        o, d = cam.pixel_rays(rows, cols)
        n = len(o)
        ids = id_offset + np.asarray(rows) * cam.width + np.asarray(cols)
        return cls(o, d, np.full(n, cam.near), np.full(n, cam.far), ids.astype(np.int64))


def per_ray_uniform(seed, ids, n, stream):
    """(B, n) uniforms in [0, 1), row i drawn from the stream (seed, ids[i], stream).

    ``seed`` may be an int or a tuple of ints (e.g. (seed, step)).
    """
    key = [int(k) for k in np.atleast_1d(seed)]
    out = np.empty((len(ids), n))
    for i, rid in enumerate(np.asarray(ids)):
        out[i] = np.random.default_rng(key + [int(rid), int(stream)]).random(n)
    return out


def _uniforms(rng, shape):
    if isinstance(rng, np.ndarray):
        if rng.shape != shape:
            raise ValueError(f"expected uniform draws of shape {shape}, got {rng.shape}")
        return rng
    return rng.random(shape)


def sample_coarse(near, far, n_coarse, rng):
    """One uniform draw in each of ``n_coarse`` equal bins of [near, far].

    ``rng`` is a Generator or a pre-drawn (B, n_coarse) array of uniforms.
    """
    if n_coarse < 2:
        raise ValueError("n_coarse must be >= 2")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    u = _uniforms(rng, (len(near), n_coarse))
    k = np.arange(n_coarse)
    return near[:, None] + (far - near)[:, None] * (k + u) / n_coarse


def frequency_weights(points, freq_volumes, cams):
    """Per-point scalar frequency response along each ray.

    ``points`` is (B, N, 3).  Each point is sampled trilinearly from every
    view's frequency volume; the aggregated (mean) feature half is reduced by
    mean absolute value over channels, then averaged over the views in whose
    frustum the point lies.  Points seen by no view get weight 0.
    """
    b, n, _ = points.shape
    flat = points.reshape(-1, 3)
    total = np.zeros(len(flat))
    seen = np.zeros(len(flat))
    for vol, cam in zip(freq_volumes, cams):
        mat, in_img, in_depth = volume_matrix(vol, cam, flat)
        c = vol.channels
        d, h, w, _ = vol.cells.shape
        feats = vol.cells.data[..., c:].reshape(d * h * w, c)
        resp = np.abs(np.asarray(mat @ feats)).mean(axis=1)
        ok = in_img & in_depth
        total += np.where(ok, resp, 0.0)
        seen += ok
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(seen > 0, total / seen, 0.0)
    return w.reshape(b, n)


def build_pdf(weights, eps_floor=1e-3):
    """Piecewise-constant pdf over the N-1 bins between adjacent coarse points."""
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    mass = np.maximum(0.5 * (w[:, 1:] + w[:, :-1]), 0.0) + eps_floor
    return mass / mass.sum(axis=1, keepdims=True)


def sample_fine(pdf, coarse_z, n_fine, rng):
    """Inverse-CDF transform of ``n_fine`` stratified uniforms per ray.

    The CDF is piecewise linear between coarse points, so samples are
    uniform inside each bin.  Output rows are sorted.
    """
    pdf = np.atleast_2d(pdf)
    z = np.atleast_2d(coarse_z)
    b, nb = pdf.shape
    if z.shape[1] != nb + 1:
        raise ValueError(f"pdf has {nb} bins but {z.shape[1]} coarse depths")
    u = (np.arange(n_fine) + _uniforms(rng, (b, n_fine))) / n_fine
    cdf = np.concatenate([np.zeros((b, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    # vectorised per-row searchsorted: offset each row into its own interval
    offs = 2.0 * np.arange(b)[:, None]
    bins = np.searchsorted((cdf + offs).ravel(), (u + offs).ravel(), side="right") - 1
    bins = bins.reshape(b, n_fine) - (np.arange(b) * (nb + 1))[:, None]
    bins = np.clip(bins, 0, nb - 1)
    lo = np.take_along_axis(cdf, bins, axis=1)
    p = np.take_along_axis(pdf, bins, axis=1)
    z0 = np.take_along_axis(z, bins, axis=1)
    z1 = np.take_along_axis(z, bins + 1, axis=1)
    t = np.clip(np.where(p > 0, (u - lo) / np.where(p > 0, p, 1.0), 0.0), 0.0, 1.0)
    return np.sort(z0 + t * (z1 - z0), axis=1)


def merge(coarse_z, fine_z, tol=1e-12):
    """Sorted union of two sorted depth lists, collapsing near-duplicates."""
    z = np.sort(np.concatenate([np.asarray(coarse_z, float), np.asarray(fine_z, float)]))
    if len(z) == 0:
        return z
    keep = np.concatenate([[True], np.diff(z) > tol])
    return z[keep]


def merge_batch(coarse_z, fine_z):
    """Row-wise sorted union for batches.  Exact ties (measure zero) are
    separated by one ulp so every row stays strictly increasing."""
    z = np.sort(np.concatenate([coarse_z, fine_z], axis=1), axis=1)
    bad = np.diff(z, axis=1) <= 0
    while bad.any():
        rows, cols = np.nonzero(bad)
        z[rows, cols + 1] = np.nextafter(z[rows, cols], np.inf)
        bad = np.diff(z, axis=1) <= 0
    return z


@dataclass
class SampleSet:
    coarse_z: np.ndarray
    pdf: np.ndarray
    fine_z: np.ndarray
    merged_z: np.ndarray


def sample_rays(rays: Rays, n_coarse, n_fine, seed, strategy="fss", freq_volumes=None,
                cams=None, eps_floor=1e-3):
    """Coarse + fine depths for a ray batch under the ``fss`` or ``uniform`` strategy."""
    coarse = sample_coarse(rays.near, rays.far, n_coarse,
                           per_ray_uniform(seed, rays.ids, n_coarse, COARSE_STREAM))
    if strategy == "fss":
        weights = frequency_weights(rays.points(coarse), freq_volumes, cams)
    elif strategy == "uniform":
        weights = np.ones_like(coarse)
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    pdf = build_pdf(weights, eps_floor)
    fine = sample_fine(pdf, coarse, n_fine, per_ray_uniform(seed, rays.ids, n_fine, FINE_STREAM))
    return SampleSet(coarse, pdf, fine, merge_batch(coarse, fine))
