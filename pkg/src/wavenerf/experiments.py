"""Scaled-down experiments shared by the scripts and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import wavelet
from .config import SceneConfig
from .mvs import FREQ_SCALE, build_volume, uniform_hypotheses
from .sampler import Rays, sample_rays
from .scene import Sphere, SyntheticScene, _texture, rig_camera


def sphere_scene(seed=0, image_size=64, texture_freq=12.0, radius=0.9, spread_deg=10.0):
    """One finely textured sphere in front of a black background, so the only
    high-frequency content is on the surface and its silhouette."""
    rng = np.random.default_rng(seed)
    cfg = SceneConfig(image_size=image_size, focal=80.0 * image_size / 64, n_test_targets=1,
                      source_spread_deg=spread_deg)
    scene = SyntheticScene([Sphere(np.zeros(3), radius, _texture(rng, texture_freq))])
    for i, az in enumerate(np.linspace(-cfg.source_spread_deg, cfg.source_spread_deg,
                                       cfg.n_sources)):
        scene.sources.append(rig_camera(cfg, az, 0.0, f"source{i}"))
    scene.test_targets.append(rig_camera(cfg, 0.5 * cfg.source_spread_deg, 2.0, "test0"))
    for cam in scene.cameras:
        cam.image, scene.depths[cam.name] = scene.render(cam)
    return scene


def raw_frequency_volumes(cams, planes=32):
    """Plane-sweep volumes over the compounded high-frequency maps themselves
    (no learned layers), one per reference view."""
    hf = np.stack([wavelet.compound_hf(wavelet.decompose(c.image)) for c in cams])
    return [build_volume(hf, cams, r, uniform_hypotheses(cams[r].near, cams[r].far, planes),
                         FREQ_SCALE, level="freq") for r in range(len(cams))]


@dataclass
class Concentration:
    fss: float          # share of fine samples near the surface under FSS
    uniform: float      # same under a uniform fine pdf
    n_rays: int
    fss_depths: np.ndarray
    uniform_depths: np.ndarray
    surface: np.ndarray

    @property
    def ratio(self):
        return self.fss / max(self.uniform, 1e-12)


def surface_concentration(scene, volumes, n_rays=1000, n_coarse=96, n_fine=32, band=0.025,
                          seed=0):
    """Fraction of fine samples within ``band`` of the depth range around the
    true surface, for rays of the first held-out view that hit geometry."""
    cam = scene.test_targets[0]
    depth = scene.depths[cam.name]
    hit = np.flatnonzero(depth.ravel() < cam.far)
    pix = np.random.default_rng(seed).choice(hit, size=min(n_rays, len(hit)), replace=False)
    rows, cols = np.divmod(np.sort(pix), cam.width)
    rays = Rays.from_camera(cam, rows, cols)
    surface = depth[rows, cols]
    half = band * (cam.far - cam.near)
    out = {}
    for strategy in ("fss", "uniform"):
        s = sample_rays(rays, n_coarse, n_fine, seed, strategy, volumes, scene.sources)
        near = np.abs(s.fine_z - surface[:, None]) <= half
        out[strategy] = (near.mean(), s.fine_z)
    return Concentration(out["fss"][0], out["uniform"][0], len(rays), out["fss"][1],
                         out["uniform"][1], surface)
