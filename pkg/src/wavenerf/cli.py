"""Command-line entry point: decompose, train, render, sample-stats, eval.

Every command writes ``manifest.json`` into its output directory when it
starts and rewrites it with timings and results when it ends.  Exit codes:
0 success, 1 internal error, 2 bad input.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
import traceback
from importlib import metadata
from pathlib import Path

import numpy as np

from . import io, wavelet
from .config import ConfigError, load_config, save_config
from .metrics import evaluate, psnr
from .nn import CheckpointVersionError
from .renderer import render_view
from .sampler import Rays
from .scene import generate_scene
from .tensor import ShapeError, no_grad

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2
BAD_INPUT = (ConfigError, ShapeError, CheckpointVersionError, FileNotFoundError, ValueError,
             KeyError)


class InputError(Exception):
    pass


def code_version():
    try:
        return metadata.version("wavenerf")
    except metadata.PackageNotFoundError:
        return "unknown"


class Manifest:
    def __init__(self, out_dir, command, args):
        self.path = Path(out_dir) / "manifest.json"
        self.start = time.time()
        self.data = {
            "command": command,
            "argv": sys.argv[1:],
            "config": args.config,
            "seed": args.seed,
            "version": code_version(),
            "out": str(Path(out_dir).resolve()),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "status": "running",
            "timings": {},
            "results": {},
        }
        self.write()

    def write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=1, default=str))

    def finish(self, status, code, error=None):
        self.data["status"] = status
        self.data["exit_code"] = code
        self.data["timings"]["total_s"] = time.time() - self.start
        if error:
            self.data["error"] = error
        self.write()


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _seed(args, cfg=None):
    if args.seed is not None:
        return args.seed
    return cfg.train.seed if cfg is not None else 0


# -- commands ----------------------------------------------------------------

def cmd_decompose(args, out, manifest):
    src = Path(args.image)
    if not src.exists():
        raise InputError(f"cannot read image {src}")
    image = io.read_png(src)
    p = wavelet.decompose(image)              # raises before any file is written
    stem = src.stem
    files = [out / f"{stem}.L.pfm"]
    io.write_pfm(files[0], p.low)
    for lvl, bands in enumerate(p.high, start=1):
        for name, band in zip(("LH", "HL", "HH"), bands):
            files.append(out / f"{stem}.l{lvl}.{name}.pfm")
            io.write_pfm(files[-1], band)
    manifest.data["results"]["bands"] = [f.name for f in files]
    if args.reconstruct:
        low = io.read_pfm(files[0])
        high = [tuple(io.read_pfm(out / f"{stem}.l{lvl}.{n}.pfm") for n in ("LH", "HL", "HH"))
                for lvl in (1, 2)]
        rec = wavelet.reconstruct(wavelet.WaveletPyramid(low, high))
        rec_path = out / f"{stem}.reconstructed.png"
        io.write_png(rec_path, rec)
        lsb = _lsb_error(src, rec_path)
        manifest.data["results"]["reconstruction_max_lsb"] = lsb
        print(f"reconstructed {rec_path} (max error {lsb} LSB)")
    print(f"wrote {len(files)} band files to {out}")


def _lsb_error(a, b):
    from PIL import Image

    with Image.open(a) as ia, Image.open(b) as ib:
        x = np.asarray(ia.convert("RGB"), dtype=np.int64)
        y = np.asarray(ib.convert("RGB"), dtype=np.int64)
    return int(np.abs(x - y).max())


def _scene(args, cfg, out):
    spec = args.scene or cfg.scene.spec_file
    if spec:
        if not Path(spec).exists():
            raise InputError(f"scene file not found: {spec}")
        return io.load_scene(spec), str(spec)
    scene = generate_scene(cfg.scene, _seed(args, cfg))
    path = io.save_scene(out / "scene", scene)
    return scene, str(path)


def cmd_train(args, out, manifest):
    from .train import evaluate_views, train

    cfg = _config(args)
    spec = args.scene or cfg.scene.spec_file
    if spec and not Path(spec).exists():
        raise InputError(f"scene file not found: {spec}")
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.dry_run:
        manifest.data["results"]["dry_run"] = True
        print("config OK")
        return
    save_config(cfg, out / "config.ini")
    t0 = time.time()
    scene, scene_path = _scene(args, cfg, out)
    manifest.data["results"]["scene"] = scene_path
    manifest.data["timings"]["scene_s"] = time.time() - t0

    def progress(step, report, evals):
        if evals:
            print(f"step {step + 1}: " + ", ".join(f"{n} {p:.2f} dB" for _, n, p in evals))
        elif (step + 1) % max(1, args.log_every) == 0:
            print(f"step {step + 1}: total {report.total:.5f}")

    t0 = time.time()
    res = train(scene, cfg, out, progress)
    manifest.data["timings"]["train_s"] = time.time() - t0
    manifest.data["results"]["checkpoints"] = [p.name for p in res.checkpoints]
    if scene.test_targets and cfg.train.steps > 0:
        rows = evaluate_views(res.model, scene, cfg, cfg.train.steps)
        manifest.data["results"]["heldout_psnr"] = {n: p for _, n, p in rows}
        for _, n, p in rows:
            print(f"held-out {n}: {p:.2f} dB")


def _load(checkpoint):
    from .train import load_model

    path = Path(checkpoint)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    return load_model(path)


def _targets(scene):
    return scene.test_targets + scene.train_targets


def cmd_render(args, out, manifest):
    model, cfg, meta = _load(args.checkpoint)
    if not Path(args.cameras).exists():
        raise InputError(f"camera file not found: {args.cameras}")
    scene = io.load_scene(args.cameras)
    seed = _seed(args, cfg)
    results = {}
    with no_grad():
        feats = model.features(scene.sources)
        for cam in _targets(scene):
            t0 = time.time()
            view = render_view(model, feats, cam, cfg.sampler, seed, cfg.train.chunk)
            io.write_png(out / f"{cam.name}.png", view.color)
            io.write_pfm(out / f"{cam.name}.depth.pfm", view.depth)
            io.write_pfm(out / f"{cam.name}.freq.pfm", np.linalg.norm(view.freq, axis=0))
            entry = {"seconds": time.time() - t0}
            if cam.image is not None:
                entry["psnr"] = psnr(np.clip(view.color, 0, 1), cam.image)
                print(f"{cam.name}: {entry['psnr']:.2f} dB")
            results[cam.name] = entry
    manifest.data["results"]["views"] = results
    manifest.data["results"]["checkpoint_step"] = meta.get("step")


def cmd_sample_stats(args, out, manifest):
    model, cfg, _ = _load(args.checkpoint)
    if not Path(args.cameras).exists():
        raise InputError(f"camera file not found: {args.cameras}")
    scene = io.load_scene(args.cameras)
    targets = _targets(scene)
    if not targets:
        raise InputError(f"{args.cameras}: no target views to cast rays from")
    cam = targets[0]
    seed = _seed(args, cfg)
    rng = np.random.default_rng(seed)
    pix = rng.choice(cam.height * cam.width, size=min(args.rays, cam.height * cam.width),
                     replace=False)
    rows, cols = np.divmod(np.sort(pix), cam.width)
    rays = Rays.from_camera(cam, rows, cols)
    path = out / args.csv
    means = {}
    with no_grad(), open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ray", "depth", "sigma", "strategy"])
        feats = model.features(scene.sources)
        for strategy in ("uniform", "fss"):
            res = model.render(feats, rays, cfg.sampler, seed, strategy)
            sigma = res.sigma.data
            means[strategy] = float(sigma.mean())
            for r, rid in enumerate(rays.ids):
                for z, s in zip(res.z[r], sigma[r]):
                    writer.writerow([int(rid), repr(float(z)), repr(float(s)), strategy])
    manifest.data["results"]["mean_sigma"] = means
    manifest.data["results"]["csv"] = path.name
    print(f"wrote {path}; mean sigma " + ", ".join(f"{k} {v:.4g}" for k, v in means.items()))


def cmd_eval(args, out, manifest):
    gt_dir, rd_dir = Path(args.gt_dir), Path(args.rendered_dir)
    for d in (gt_dir, rd_dir):
        if not d.is_dir():
            raise InputError(f"not a directory: {d}")
    gt = {p.name for p in gt_dir.glob("*.png")}
    rd = {p.name for p in rd_dir.glob("*.png")}
    warnings = [f"{name} has no counterpart in {rd_dir}" for name in sorted(gt - rd)]
    warnings += [f"{name} has no counterpart in {gt_dir}" for name in sorted(rd - gt)]
    rows = []
    for name in sorted(gt & rd):
        a, b = io.read_png(gt_dir / name), io.read_png(rd_dir / name)
        if a.shape != b.shape:
            warnings.append(f"{name}: extents differ {a.shape} vs {b.shape}")
            continue
        m = evaluate(a, b)
        rows.append([name, m["psnr"], m["ssim"], m["hfiv"]])
    if not rows:
        warnings.append("no image pairs to evaluate")
    for w in warnings:
        io.warn(w)
    path = out / args.csv
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "psnr", "ssim", "hfiv"])
        for r in rows:
            writer.writerow([r[0]] + [repr(float(x)) for x in r[1:]])
        if rows:
            mean = np.mean([r[1:] for r in rows], axis=0)
            writer.writerow(["mean"] + [repr(float(x)) for x in mean])
    manifest.data["results"].update({"pairs": len(rows), "warnings": len(warnings),
                                     "csv": path.name})
    print(f"evaluated {len(rows)} pairs, {len(warnings)} warnings -> {path}")


# -- parser ------------------------------------------------------------------

def build_parser():
    # global flags are accepted before or after the subcommand; SUPPRESS keeps
    # the subparser from overwriting a value given before it
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="random seed (overrides config)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI config file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker threads")

    parser = argparse.ArgumentParser(prog="wavenerf", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", parents=[common], help="two-level Haar bands as PFM")
    p.add_argument("image")
    p.add_argument("--reconstruct", action="store_true",
                   help="rebuild the image from the written bands")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("train", parents=[common], help="optimise a model on one scene")
    p.add_argument("--scene", default=None, help="camera file (default: generate from config)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--dry-run", action="store_true", help="validate the config and exit")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", parents=[common], help="render target views")
    p.add_argument("checkpoint")
    p.add_argument("cameras")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("sample-stats", parents=[common],
                       help="per-sample depth and density under both strategies")
    p.add_argument("checkpoint")
    p.add_argument("cameras")
    p.add_argument("--rays", type=int, default=256)
    p.add_argument("--csv", default="sample_stats.csv")
    p.set_defaults(func=cmd_sample_stats)

    p = sub.add_parser("eval", parents=[common], help="PSNR, SSIM and HFIV per image pair")
    p.add_argument("gt_dir")
    p.add_argument("rendered_dir")
    p.add_argument("--csv", default="eval.csv")
    p.set_defaults(func=cmd_eval)
    return parser


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise InputError("--threads must be >= 1")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("seed", "config", "out", "threads"):
        if not hasattr(args, name):
            setattr(args, name, None)
    out = Path(args.out or Path("runs") / args.command)
    manifest = Manifest(out, args.command, args)
    try:
        _set_threads(args.threads)
        args.func(args, out, manifest)
    except (InputError, *BAD_INPUT) as exc:
        msg = str(exc) if not isinstance(exc, KeyError) else f"missing key {exc}"
        print(f"error: {msg}", file=sys.stderr)
        manifest.finish("failed", EXIT_INPUT, msg)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        traceback.print_exc()
        manifest.finish("crashed", EXIT_INTERNAL, repr(exc))
        return EXIT_INTERNAL
    manifest.finish("ok", EXIT_OK)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
