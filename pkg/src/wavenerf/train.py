"""Optimisation loop: ray batches from the training targets, chunked
rendering with exact gradient accumulation, Adam with cosine decay,
CSV metric log and WVNF checkpoints."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config, config_from_dict
from .losses import LossReport, compute_losses, freq_target
from .mvs import FeatureMaps, FeatureVolume, SceneFeatures
from .nn import Adam, load_checkpoint, save_checkpoint
from .metrics import psnr
from .renderer import WaveNeRF, render_view
from .sampler import Rays
from .tensor import Tensor, concat, no_grad, tsum

LOG_HEADER = ["step", "L_c", "L_fb", "L_fw", "L_D", "total", "psnr_train"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RayBatch:
    rays: Rays
    c_gt: np.ndarray     # (B, 3)
    f_gt: np.ndarray     # (B, F)
    d_gt: np.ndarray     # (B,)

    def __len__(self):
        return len(self.rays)

    def subset(self, sel):
        return RayBatch(self.rays.subset(sel), self.c_gt[sel], self.f_gt[sel], self.d_gt[sel])


class TargetSet:
    """Supervision views with per-pixel colour, wavelet and depth targets."""

    def __init__(self, cams, depths):
        self.cams = list(cams)
        self.images = np.stack([c.image for c in self.cams])
        self.freqs = np.stack([freq_target(c.image) for c in self.cams])
        self.depths = np.stack([np.asarray(d, dtype=np.float64) for d in depths])
        _, _, self.h, self.w = self.images.shape

    @property
    def n_pixels(self):
        return len(self.cams) * self.h * self.w

    def batch(self, flat_ids):
        """Rays and targets for global pixel ids (view * H * W + row * W + col)."""
        flat_ids = np.asarray(flat_ids, dtype=np.int64)
        view, pix = np.divmod(flat_ids, self.h * self.w)
        rows, cols = np.divmod(pix, self.w)
        o = np.empty((len(flat_ids), 3))
        d = np.empty((len(flat_ids), 3))
        near, far = np.empty(len(flat_ids)), np.empty(len(flat_ids))
        for v in np.unique(view):
            sel = view == v
            cam = self.cams[v]
            o[sel], d[sel] = cam.pixel_rays(rows[sel], cols[sel])
            near[sel], far[sel] = cam.near, cam.far
        rays = Rays(o, d, near, far, flat_ids)
        return RayBatch(rays, self.images[view, :, rows, cols], self.freqs[view, :, rows, cols],
                        self.depths[view, rows, cols])


def draw_pixels(n_pixels, batch_size, seed, step):
    rng = np.random.default_rng([int(seed), int(step), 7])
    return rng.choice(n_pixels, size=min(batch_size, n_pixels), replace=False)


def lr_at(step, cfg: Config):
    o = cfg.optim
    if not o.cosine or cfg.train.steps <= 0:
        return o.lr
    frac = min(step / cfg.train.steps, 1.0)
    r = o.lr_min_ratio
    return o.lr * (r + (1.0 - r) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def psnr_from_mse(mse):
    return 99.0 if mse <= 0 else min(99.0, -10.0 * math.log10(mse))


# -- gradient accumulation over ray chunks -----------------------------------

def _detached_features(feats: SceneFeatures):
    """Copy of ``feats`` whose learned tensors are fresh leaves, so several
    renderer graphs can accumulate into them before one backward through
    the feature network.  Returns (copy, [(original, leaf), ...])."""
    pairs = []

    def leaf(t):
        new = Tensor(t.data, requires_grad=t.requires_grad)
        pairs.append((t, new))
        return new

    def vol(v: FeatureVolume):
        return FeatureVolume(v.level, v.hypotheses, leaf(v.cells), v.count, v.degenerate,
                             v.ref, v.scale)

    maps = FeatureMaps([leaf(t) for t in feats.maps.spatial], leaf(feats.maps.freq),
                       feats.maps.hf, feats.maps.images)
    copy = SceneFeatures(feats.cams, maps, [[vol(v) for v in lvl] for lvl in feats.spatial],
                         [vol(v) for v in feats.freq])
    return copy, pairs


def _backprop_leaves(pairs):
    seeds = [tsum(orig * leaf.grad) for orig, leaf in pairs
             if orig.requires_grad and leaf.grad is not None]
    if seeds:
        total = seeds[0]
        for s in seeds[1:]:
            total = total + s
        total.backward()


def _chunks(n, size):
    return [np.arange(i, min(i + size, n)) for i in range(0, n, size)]


def loss_and_grads(model: WaveNeRF, sources, batch: RayBatch, cfg: Config, sample_seed,
                   backward=True, z=None):
    """Loss report for one batch; with ``backward`` the parameter gradients
    are left in ``.grad``.

    Batches larger than ``cfg.train.chunk`` are handled in two passes: a
    forward pass without graph to evaluate the full-batch loss and its
    gradient w.r.t. the per-ray outputs, then one graph per chunk seeded
    with those output gradients.  The result equals a single-graph backward.
    """
    feats = model.features(sources)
    if z is None:
        z = model.sample(feats, batch.rays, cfg.sampler, sample_seed).merged_z
    chunks = _chunks(len(batch), max(1, cfg.train.chunk))
    if len(chunks) == 1:
        out = model.renderer(feats, batch.rays, z)
        total, report = compute_losses(out.color, out.freq, out.depth, out.opacity,
                                       batch.c_gt, batch.f_gt, batch.d_gt, cfg.loss)
        if backward:
            total.backward()
        return report

    with no_grad():
        outs = [model.renderer(feats, batch.rays.subset(c), z[c]) for c in chunks]
    color = Tensor(np.concatenate([o.color.data for o in outs]), requires_grad=True)
    freq = Tensor(np.concatenate([o.freq.data for o in outs]), requires_grad=True)
    depth = Tensor(np.concatenate([o.depth.data for o in outs]), requires_grad=True)
    opacity = np.concatenate([o.opacity for o in outs])
    total, report = compute_losses(color, freq, depth, opacity, batch.c_gt, batch.f_gt,
                                   batch.d_gt, cfg.loss)
    if not backward:
        return report
    total.backward()
    leaf_feats, pairs = _detached_features(feats)
    for c in chunks:
        out = model.renderer(leaf_feats, batch.rays.subset(c), z[c])
        seed = (tsum(out.color * color.grad[c]) + tsum(out.freq * freq.grad[c])
                + tsum(out.depth * depth.grad[c]))
        seed.backward()
    _backprop_leaves(pairs)
    return report


# -- checkpoints -------------------------------------------------------------

def checkpoint_paths(path):
    path = Path(path)
    return path, path.with_suffix(".json")


def save_model(path, model: WaveNeRF, cfg: Config, step, extra=None):
    """WVNF parameter file plus a JSON sidecar holding the config and step."""
    path, side = checkpoint_paths(path)
    save_checkpoint(path, model.state_dict())
    meta = {"step": int(step), "config": cfg.to_dict()}
    meta.update(extra or {})
    side.write_text(json.dumps(meta, indent=1))


def load_model(path, cfg: Config = None):
    """Rebuild a model from a checkpoint; the sidecar config is used when
    ``cfg`` is not given.  Returns (model, config, meta)."""
    path, side = checkpoint_paths(path)
    state = load_checkpoint(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    if cfg is None:
        if "config" not in meta:
            raise ValueError(f"{path}: no config given and no sidecar {side.name}")
        cfg = config_from_dict(meta["config"])
    model = WaveNeRF(cfg.model, seed=cfg.train.seed)
    model.load_state_dict(state)
    return model, cfg, meta


# -- loop --------------------------------------------------------------------

@dataclass
class TrainResult:
    model: WaveNeRF
    log_path: Path
    checkpoints: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    evals: list = field(default_factory=list)     # (step, view name, psnr)
    steps: int = 0                                 # optimiser steps taken


def _fmt(x):
    return repr(float(x))


def step_batch(targets: TargetSet, cfg: Config, step):
    return targets.batch(draw_pixels(targets.n_pixels, cfg.train.batch_size, cfg.train.seed,
                                     step))


def train(scene, cfg: Config, out_dir, progress=None) -> TrainResult:
    """Optimise a fresh model on ``scene``'s training targets.

    Writes ``log.csv``, ``ckpt_<step>.wvnf`` every ``checkpoint_every`` steps
    (step 0 always) and ``model.wvnf`` at the end of a non-empty run.  A non-finite loss aborts
    with a ``diverged.wvnf`` snapshot.  ``progress(step, report, evals)``
    is called after every step and after every evaluation; returning True
    ends the run early.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tc = cfg.train
    model = WaveNeRF(cfg.model, seed=tc.seed)
    params = model.parameters()
    opt = Adam(params, cfg.optim.lr, (cfg.optim.beta1, cfg.optim.beta2), cfg.optim.eps)
    targets = TargetSet(scene.train_targets, [scene.depths[c.name] for c in scene.train_targets])
    sources = scene.sources
    log_path = out_dir / "log.csv"
    result = TrainResult(model, log_path)

    def checkpoint(step, name=None):
        path = out_dir / (name or f"ckpt_{step:06d}.wvnf")
        save_model(path, model, cfg, step)
        result.checkpoints.append(path)

    checkpoint(0)
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for step in range(tc.steps):
            batch = step_batch(targets, cfg, step)
            opt.zero_grad()
            report = loss_and_grads(model, sources, batch, cfg, (tc.seed, step))
            psnr = psnr_from_mse(report.L_c / 3.0)
            writer.writerow([step] + [_fmt(x) for x in report.row()] + [_fmt(psnr)])
            fh.flush()
            result.reports.append(report)
            if not np.isfinite(report.total):
                save_model(out_dir / "diverged.wvnf", model, cfg, step,
                           {"losses": report.row()})
                raise TrainingDiverged(
                    f"non-finite loss at step {step}: {report.row()}; "
                    f"snapshot written to {out_dir / 'diverged.wvnf'}")
            opt.step(lr_at(step, cfg))
            result.steps = step + 1
            stop = progress is not None and progress(step, report, None)
            if tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0:
                checkpoint(step + 1)
            if tc.eval_every and (step + 1) % tc.eval_every == 0:
                result.evals.extend(evaluate_views(model, scene, cfg, step + 1))
                if progress is not None:
                    stop = progress(step, report, result.evals[-len(scene.test_targets):]) or stop
            if stop:
                break
    if result.steps > 0:
        checkpoint(result.steps, "model.wvnf")
    if tc.eval_every and scene.test_targets:
        with open(out_dir / "eval.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "view", "psnr"])
            writer.writerows([s, v, _fmt(p)] for s, v, p in result.evals)
    return result


def evaluate_views(model, scene, cfg: Config, step=None, cams=None):
    """Held-out PSNR per view as (step, name, psnr) tuples."""
    cams = scene.test_targets if cams is None else cams
    with no_grad():
        feats = model.features(scene.sources)
        rows = []
        for cam in cams:
            out = render_view(model, feats, cam, cfg.sampler, cfg.train.seed, cfg.train.chunk)
            rows.append((step, cam.name, psnr(np.clip(out.color, 0.0, 1.0), cam.image)))
    return rows


def recompute_step_loss(checkpoint, scene, cfg: Config, step=0) -> LossReport:
    """Loss of ``step``'s batch under the parameters stored in ``checkpoint``."""
    model, _, _ = load_model(checkpoint, cfg)
    targets = TargetSet(scene.train_targets, [scene.depths[c.name] for c in scene.train_targets])
    batch = step_batch(targets, cfg, step)
    with no_grad():
        return loss_and_grads(model, scene.sources, batch, cfg, (cfg.train.seed, step),
                              backward=False)
