"""Overfit the reduced model on the standard 64x64 toy scene and report the
held-out PSNR as training progresses.

    python3 scripts/toy_overfit.py --steps 3000 --out runs/toy
"""
import argparse
import time

from wavenerf.config import toy_config
from wavenerf.scene import generate_scene
from wavenerf.train import train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--lr", type=float, default=None)
    ap.add_argument("--batch", type=int, default=None)
    ap.add_argument("--eval-every", type=int, default=250)
    ap.add_argument("--scene-seed", type=int, default=0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/toy")
    args = ap.parse_args()

    cfg = toy_config()
    cfg.train.seed = args.seed
    cfg.train.eval_every = args.eval_every
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.lr is not None:
        cfg.optim.lr = args.lr
    if args.batch is not None:
        cfg.train.batch_size = args.batch
    scene = generate_scene(cfg.scene, args.scene_seed)
    t0 = time.time()

    def progress(step, report, evals):
        if step % 50 == 0:
            print(f"step {step:5d}  total {report.total:.4f}  L_c {report.L_c:.5f}  "
                  f"L_D {report.L_D:.3f}  {time.time() - t0:7.1f}s", flush=True)
        if evals:
            text = "  ".join(f"{name} {p:.2f} dB" for _, name, p in evals)
            print(f"eval @ {step + 1}: {text}", flush=True)

    train(scene, cfg, args.out, progress)
    print(f"done in {time.time() - t0:.1f}s")


if __name__ == "__main__":
    main()
