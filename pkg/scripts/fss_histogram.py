"""Compare where frequency-guided and uniform fine samples land relative to
the true surface, and print a depth histogram of both.

    python3 scripts/fss_histogram.py                       # raw wavelet volumes, sphere scene
    python3 scripts/fss_histogram.py --spread 30           # wider source baseline
    python3 scripts/fss_histogram.py --checkpoint runs/toy/model.wvnf   # learned volumes, toy scene
"""
import argparse
import time

import numpy as np

from wavenerf import experiments as X
from wavenerf.scene import generate_scene
from wavenerf.tensor import no_grad
from wavenerf.train import load_model


def histogram(c, bins=12, width=40):
    offsets = {"fss": c.fss_depths - c.surface[:, None],
               "uniform": c.uniform_depths - c.surface[:, None]}
    lo = min(o.min() for o in offsets.values())
    hi = max(o.max() for o in offsets.values())
    edges = np.linspace(lo, hi, bins + 1)
    counts = {k: np.histogram(o, edges)[0] / o.size for k, o in offsets.items()}
    top = max(v.max() for v in counts.values())
    print(f"{'depth - surface':>18}  {'fss':>6}  {'uniform':>7}")
    for i in range(bins):
        bar = "#" * int(round(width * counts["fss"][i] / top))
        print(f"{edges[i]:+8.2f}..{edges[i + 1]:+6.2f}  {counts['fss'][i]:6.3f}  "
              f"{counts['uniform'][i]:7.3f}  {bar}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rays", type=int, default=1000)
    ap.add_argument("--band", type=float, default=0.025, help="half width as a share of far-near")
    ap.add_argument("--spread", type=float, default=10.0, help="source azimuth spread in degrees")
    ap.add_argument("--planes", type=int, default=32)
    ap.add_argument("--checkpoint", default=None)
    ap.add_argument("--scene-seed", type=int, default=0)
    args = ap.parse_args()

    t0 = time.time()
    if args.checkpoint:
        model, cfg, _ = load_model(args.checkpoint)
        scene = generate_scene(cfg.scene, args.scene_seed)
        with no_grad():
            volumes = model.features(scene.sources).freq
        n_coarse, n_fine = cfg.sampler.n_coarse, cfg.sampler.n_fine
    else:
        scene = X.sphere_scene(spread_deg=args.spread)
        volumes = X.raw_frequency_volumes(scene.sources, args.planes)
        n_coarse, n_fine = 96, 32
    t1 = time.time()
    c = X.surface_concentration(scene, volumes, args.rays, n_coarse, n_fine, args.band)
    print(f"{c.n_rays} rays, band +-{args.band:.1%} of depth range")
    print(f"near-surface share: fss {c.fss:.4f}  uniform {c.uniform:.4f}  ratio {c.ratio:.2f}")
    histogram(c)
    print(f"volumes {t1 - t0:.1f}s, sampling {time.time() - t1:.1f}s")


if __name__ == "__main__":
    main()
