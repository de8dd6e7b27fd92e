"""Procedural scenes of textured spheres and boxes with an exact ray oracle.

Colour is emission only (view independent), so every oracle image is a
Lambertian rendering of the albedo field.  Depth is the distance along the
unit ray direction; rays that miss everything return the background colour
and the ray's far bound.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, SceneConfig
from .geometry import CameraView

BACKGROUND = np.zeros(3)


@dataclass
class Texture:
    base: np.ndarray       # (3,)
    amp: np.ndarray        # (3,)
    dirs: np.ndarray       # (2, 3) unit vectors
    phase: np.ndarray      # (3, 2)
    freq: float

    def __call__(self, p):
        s1 = np.sin(self.freq * (p @ self.dirs[0])[:, None] + self.phase[:, 0])
        s2 = np.sin(2.0 * self.freq * (p @ self.dirs[1])[:, None] + self.phase[:, 1])
        return np.clip(self.base + self.amp * (0.65 * s1 + 0.35 * s2), 0.02, 0.98)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    texture: Texture

    def intersect(self, o, d):
        oc = o - self.center
        b = np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
        disc = b * b - c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        return np.where(ok & (t > 1e-9), t, np.inf)


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    texture: Texture

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta, tb = (self.lo - o) * inv, (self.hi - o) * inv
        tmin = np.nanmax(np.minimum(ta, tb), axis=1)
        tmax = np.nanmin(np.maximum(ta, tb), axis=1)
        t = np.where(tmin > 1e-9, tmin, tmax)
        return np.where((tmax >= tmin) & (t > 1e-9), t, np.inf)


@dataclass
class Plane:
    """Backdrop z = ``z`` facing the rig."""

    z: float
    texture: Texture

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.z - o[:, 2]) / d[:, 2]
        return np.where(np.isfinite(t) & (t > 1e-9), t, np.inf)


@dataclass
class SyntheticScene:
    objects: list
    sources: list = field(default_factory=list)
    train_targets: list = field(default_factory=list)
    test_targets: list = field(default_factory=list)
    supersample: int = 1
    # oracle depth maps (H, W) keyed by camera name
    depths: dict = field(default_factory=dict)

    def cast(self, origins, dirs, far=np.inf):
        """Oracle (colour (M, 3), depth (M,), hit (M,)) for unit-direction rays."""
        origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        best = np.full(len(dirs), np.inf)
        which = np.full(len(dirs), -1)
        for k, obj in enumerate(self.objects):
            t = obj.intersect(origins, dirs)
            closer = t < best
            best = np.where(closer, t, best)
            which = np.where(closer, k, which)
        hit = np.isfinite(best)
        color = np.tile(BACKGROUND, (len(dirs), 1))
        for k, obj in enumerate(self.objects):
            sel = which == k
            if sel.any():
                color[sel] = obj.texture(origins[sel] + best[sel, None] * dirs[sel])
        far = np.broadcast_to(np.asarray(far, dtype=np.float64), best.shape)
        depth = np.where(hit, best, far)
        return color, depth, hit

    def render(self, cam: CameraView):
        """Oracle colour image (3, H, W) and depth map (H, W) for ``cam``."""
        h, w = cam.height, cam.width
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        o, d = cam.pixel_rays(rows.ravel(), cols.ravel())
        _, depth, _ = self.cast(o, d, far=cam.far)
        ss = self.supersample
        color = np.zeros((h * w, 3))
        for a in range(ss):
            for b in range(ss):
                off_r, off_c = (a + 0.5) / ss - 0.5, (b + 0.5) / ss - 0.5
                o, d = cam.pixel_rays(rows.ravel() + off_r, cols.ravel() + off_c)
                color += self.cast(o, d, far=cam.far)[0]
        color /= ss * ss
        return color.T.reshape(3, h, w), depth.reshape(h, w)

    @property
    def cameras(self):
        return self.sources + self.train_targets + self.test_targets


def _texture(rng, freq):
    dirs = rng.normal(size=(2, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return Texture(base=rng.uniform(0.3, 0.7, 3), amp=rng.uniform(0.15, 0.28, 3),
                   dirs=dirs, phase=rng.uniform(0, 2 * np.pi, (3, 2)), freq=freq)


def rig_camera(cfg: SceneConfig, azimuth_deg, elevation_deg, name):
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    r = cfg.rig_radius
    eye = np.array([r * np.sin(az) * np.cos(el), -r * np.sin(el), -r * np.cos(az) * np.cos(el)])
    return CameraView.look_at(eye, np.zeros(3), cfg.focal, cfg.image_size, cfg.image_size,
                              cfg.near, cfg.far, name=name)


def generate_scene(cfg: SceneConfig, seed=0, render=True) -> SyntheticScene:
    if cfg.n_spheres + cfg.n_boxes == 0 and not cfg.backdrop:
        raise ConfigError("scene spec has no geometry (no spheres, boxes or backdrop)")
    rng = np.random.default_rng(seed)
    objects = []
    for _ in range(cfg.n_spheres):
        center = np.array([rng.uniform(-0.9, 0.9), rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6)])
        objects.append(Sphere(center, rng.uniform(0.45, 0.8), _texture(rng, cfg.texture_freq)))
    for _ in range(cfg.n_boxes):
        c = np.array([rng.uniform(-0.8, 0.8), rng.uniform(-0.5, 0.5), rng.uniform(-0.4, 0.4)])
        half = rng.uniform(0.25, 0.5, 3)
        objects.append(Box(c - half, c + half, _texture(rng, cfg.texture_freq)))
    if cfg.backdrop:
        objects.append(Plane(1.6, _texture(rng, 0.8 * cfg.texture_freq)))
    scene = SyntheticScene(objects=objects, supersample=cfg.supersample)

    spread = cfg.source_spread_deg
    for i, az in enumerate(np.linspace(-spread, spread, cfg.n_sources)):
        scene.sources.append(rig_camera(cfg, az, 0.0, f"source{i}"))
    for i in range(cfg.n_train_targets):
        az = rng.uniform(-1.2 * spread, 1.2 * spread)
        el = rng.uniform(-0.5 * spread, 0.5 * spread)
        scene.train_targets.append(rig_camera(cfg, az, el, f"train{i}"))
    for i in range(cfg.n_test_targets):
        # held-out views interpolate inside the source baseline so every
        # pixel is observed by at least one source
        az = spread * (0.5 if i % 2 == 0 else -0.5) * (1 - i // 2 * 0.3)
        scene.test_targets.append(rig_camera(cfg, az, 0.0, f"test{i}"))
    if render:
        for cam in scene.cameras:
            cam.image, scene.depths[cam.name] = scene.render(cam)
    return scene
