"""Reference PSNR for the toy-overfit threshold.

Renders the held-out views of the standard toy scene with oracle geometry:
each pixel's surface point (from the analytic depth) is projected into the
source views and their colours are blended.  Two variants: plain
angle-weighted blending, and the same with an oracle occlusion test.  A
renderer that blends source colours cannot beat the occlusion-aware number.

    python3 scripts/baseline_calibration.py [--seed 0]
"""
import argparse

import numpy as np

from wavenerf import functional as F
from wavenerf.config import SceneConfig
from wavenerf.geometry import in_image, to_grid
from wavenerf.metrics import psnr
from wavenerf.scene import generate_scene


def blend_view(scene, cam, depth, occlusion):
    h, w = cam.height, cam.width
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    o, d = cam.pixel_rays(rows.ravel(), cols.ravel())
    pts = o + depth.ravel()[:, None] * d
    acc = np.zeros((len(pts), 3))
    wsum = np.zeros(len(pts))
    if occlusion:
        # pixels no source sees un-occluded fall back to plain blending
        plain = blend_view(scene, cam, depth, False).reshape(3, -1).T
    for src in scene.sources:
        uv, z = src.project(pts)
        ok = (z > 0) & in_image(uv, h, w)
        mat, _ = F.bilinear_matrix(to_grid(uv), h, w)
        col = np.asarray(mat @ src.image.reshape(3, -1).T)
        if occlusion:
            seen = np.asarray(mat @ scene.depths[src.name].ravel())
            ok &= np.abs(np.linalg.norm(pts - src.center, axis=1) - seen) < 0.05
        sd = pts - src.center
        sd /= np.linalg.norm(sd, axis=1, keepdims=True)
        ang = np.arccos(np.clip((d * sd).sum(1), -1, 1))
        wt = np.where(ok, 1.0 / (ang + 1e-3), 0.0)
        acc += wt[:, None] * col
        wsum += wt
    fallback = plain if occlusion else np.zeros_like(acc)
    out = np.where(wsum[:, None] > 0, acc / np.maximum(wsum, 1e-12)[:, None], fallback)
    return out.T.reshape(3, h, w)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--views", type=int, default=2, help="held-out views to score")
    args = ap.parse_args()
    scene = generate_scene(SceneConfig(n_test_targets=args.views), args.seed)
    for cam in scene.test_targets:
        gt = cam.image
        depth = scene.depths[cam.name]
        for occ in (False, True):
            img = blend_view(scene, cam, depth, occ)
            tag = "oracle depth + occlusion" if occ else "oracle depth"
            print(f"{cam.name}: {tag:26s} PSNR {psnr(np.clip(img, 0, 1), gt):6.2f} dB")


if __name__ == "__main__":
    main()
