"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v -s``.  The toy
overfit criterion trains a model for several minutes.
"""
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from conftest import micro_model_config, shifted_camera
from fdcheck import check_grads, rel_error
from wavenerf import experiments as X
from wavenerf import functional as F
from wavenerf import losses as L
from wavenerf import metrics as M
from wavenerf import mvs
from wavenerf import renderer as R
from wavenerf import tensor as T
from wavenerf import wavelet as W
from wavenerf.cli import main
from wavenerf.config import LossConfig, SamplerConfig, SceneConfig, toy_config
from wavenerf.losses import compute_losses, freq_target
from wavenerf.sampler import Rays
from wavenerf.scene import generate_scene
from wavenerf.tensor import Tensor, no_grad
from wavenerf.train import train

MICRO_INI = Path(__file__).resolve().parent.parent / "configs" / "micro.ini"


@pytest.fixture
def verdict(capsys):
    def emit(n, name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n} {name}: {detail}")
        assert ok, detail
    return emit


# 1 -------------------------------------------------------------------------

def test_c1_wavelet(verdict):
    t0 = time.time()
    rng = np.random.default_rng(0)
    rt = en = 0.0
    for _ in range(100):
        x = rng.uniform(size=(3, 64, 64))
        bands = W.dwt2(x)
        rt = max(rt, np.abs(W.idwt2(*bands) - x).max())
        p = W.decompose(x)
        rt = max(rt, np.abs(W.reconstruct(p) - x).max())
        e = np.sum(x ** 2)
        en = max(en, abs(sum(np.sum(b ** 2) for b in bands) - e) / e,
                 abs(p.energy() - e) / e)
    const = W.decompose(np.full((3, 64, 64), 0.37))
    hf = max(np.abs(b).max() for trip in const.high for b in trip)
    hf = max(hf, max(np.abs(b).max() for b in W.dwt2(np.full((3, 64, 64), 0.37))[1:]))
    dt = time.time() - t0
    ok = rt < 1e-10 and en < 1e-9 and hf < 1e-12 and dt < 10
    verdict(1, "wavelet", ok, f"round trip {rt:.1e}, energy {en:.1e}, constant HF {hf:.1e}, "
                              f"{dt:.2f}s")


# 2 -------------------------------------------------------------------------

def _op_cases():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    kinkfree = np.where(np.abs(a) < 1e-2, 0.5, a)
    mask = rng.uniform(size=(3, 4)) > 0.5
    smask = np.array([[True, True, False, True], [True, False, True, True],
                      [True, True, True, True]])
    sparse = F.bilinear_matrix(rng.uniform(0, 3, (5, 2)), 4, 4)[0]
    xy = rng.uniform(0, 3, (5, 2))
    iwb = W.InverseWaveletBlock(2, 6, 3, np.random.default_rng(1))
    att = R.Attention(4, 2, 6, np.random.default_rng(2))
    ae = R.RayAutoEncoder(3, 2, np.random.default_rng(3))
    emb = R.TokenEmbed(3, 4, np.random.default_rng(4))
    valid = np.array([[True, True, False], [True, True, True]])
    cams = [shifted_camera(x, size=4, focal=3.0) for x in (0.0, 0.1, -0.12)]
    xyz = rng.uniform(0, 2, (5, 3))
    zc = np.array([[1.0, 1.4, 2.0, 2.7], [1.2, 1.3, 2.2, 3.1]])
    return [
        ("add/sub", lambda u, v: u + v - v * 2.0, [a, b]),
        ("mul/div", lambda u, v: u * v / (v * v + 1.0), [a, b]),
        ("power", lambda u: T.power(u, 3.0), [pos]),
        ("exp", T.exp, [a]),
        ("log", T.log, [pos]),
        ("sqrt", T.sqrt, [pos]),
        ("abs", T.tabs, [kinkfree]),
        ("relu", T.relu, [kinkfree]),
        ("elu", T.elu, [kinkfree]),
        ("softplus", T.softplus, [a]),
        ("where", lambda u, v: T.where(mask, u, v), [a, b]),
        ("sum/mean", lambda u: T.tsum(u, axis=0) + T.tmean(u, axis=1).reshape((3, 1)), [a]),
        ("reshape/transpose", lambda u: T.transpose(T.reshape(u, (2, 6)), (1, 0)), [a]),
        ("getitem", lambda u: u[1:, ::2], [a]),
        ("concat/stack", lambda u, v: T.stack([T.concat([u, v], axis=1)[:, 2:6], u * v], 0),
         [a, b]),
        ("cumsum", lambda u: T.cumsum(u, axis=1), [a]),
        ("matmul", lambda u, v: T.matmul(u, T.transpose(v)), [a, b]),
        ("linear", lambda u, w, c: T.linear(u, w, c), [a, rng.normal(size=(4, 2)),
                                                       rng.normal(size=2)]),
        ("sparse_apply", lambda u: T.sparse_apply(sparse, u), [rng.normal(size=(16, 2))]),
        ("softmax+mask", lambda u: T.softmax(u, axis=1, mask=smask), [a]),
        ("pad2d", lambda u: T.pad2d(u, (1, 2), (2, 1), "symmetric"), [rng.normal(size=(2, 3, 3))]),
        ("conv2d", lambda u, w: F.conv2d(u, w, stride=2, padding=1, padding_mode="symmetric"),
         [rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3))]),
        ("deconv2d", lambda u, w: F.deconv2d(u, w, stride=2, padding=1, output_padding=1),
         [rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3, 3))]),
        ("bilinear", lambda m: F.interpolate_bilinear(m, xy)[0],
         [rng.normal(size=(2, 4, 4))]),
        ("trilinear", lambda v: F.interpolate_trilinear(v, xyz)[0],
         [rng.normal(size=(3, 2, 4, 4))]),
        ("upsample2x", F.upsample2x, [rng.normal(size=(2, 3, 3))]),
        ("inverse wavelet block", lambda f, h: iwb(f, h),
         [rng.uniform(size=(2, 3, 3)), rng.normal(size=(6, 3, 3))]),
        ("plane-sweep volume", lambda m: mvs.build_volume(m, cams, 0, [1.3, 2.1, 3.2], 1.0).cells,
         [rng.normal(size=(3, 2, 4, 4))]),
        ("token embed", lambda x: T.concat([emb(x, valid)[0].reshape((2, 1, 4)),
                                            emb(x, valid)[1]], axis=1),
         [rng.normal(size=(2, 3, 3))]),
        ("attention", lambda g, v: att(g, v, valid)[1] + att(g, v, valid)[0].reshape((2, 1, 4)),
         [rng.normal(size=(2, 4)), rng.normal(size=(2, 3, 4))]),
        ("ray auto-encoder", lambda x: ae(x, np.ones((2, 6), bool)), [rng.normal(size=(2, 6, 3))]),
        ("composite", lambda s, c, f: (lambda o: T.concat([o.color, o.freq, o.depth.reshape((2, 1))],
                                                          axis=1))(R.composite(s, zc, 3.5, c, f)),
         [rng.uniform(0.1, 2, (2, 4)), rng.uniform(size=(2, 4, 3)), rng.normal(size=(2, 4, 2))]),
        ("losses", lambda c, f, d: compute_losses(c, f, d, np.array([0.9, 0.2, 0.8]),
                                                  np.full((3, 3), 0.3), np.ones((3, 2)),
                                                  np.array([2.0, 1.0, 1.5]))[0],
         [rng.uniform(size=(3, 3)), rng.normal(size=(3, 2)), rng.uniform(1, 3, 3)]),
    ]


def _end_to_end_error():
    """Worst relative error over sampled parameters of the micro instance:
    2 source views, 8x8 images, 4 samples per ray."""
    scene = generate_scene(SceneConfig(image_size=8, focal=10.0, n_sources=2, n_train_targets=1), 3)
    model = R.WaveNeRF(micro_model_config(), seed=2)
    rng = np.random.default_rng(0)
    for p in model.parameters():
        if p.ndim == 1:
            p.data += rng.normal(scale=0.1, size=p.shape)
    cam = scene.train_targets[0]
    rows, cols = np.array([1, 4, 6]), np.array([2, 4, 5])
    rays = Rays.from_camera(cam, rows, cols)
    z = rays.near[:, None] + (rays.far - rays.near)[:, None] * (np.arange(4) + 0.5) / 4
    c_gt = cam.image[:, rows, cols].T
    f_gt = freq_target(cam.image)[:, rows, cols].T
    d_gt = scene.depths[cam.name][rows, cols]

    def loss():
        out = model.renderer(model.features(scene.sources), rays, z)
        return compute_losses(out.color, out.freq, out.depth, out.opacity, c_gt, f_gt, d_gt,
                              LossConfig())[0]

    loss().backward()
    eps, worst = 1e-6, 0.0
    for name, p in model.named_parameters():
        flat = p.data.reshape(-1)
        pick = np.random.default_rng(len(name)).choice(flat.size, min(2, flat.size), replace=False)
        num = []
        with no_grad():
            for i in pick:
                old = flat[i]
                flat[i] = old + eps
                fp = float(loss().data)
                flat[i] = old - eps
                fm = float(loss().data)
                flat[i] = old
                num.append((fp - fm) / (2 * eps))
        ana = np.zeros(flat.size) if p.grad is None else p.grad.reshape(-1)
        if np.any(num) or np.any(ana[pick]):
            worst = max(worst, rel_error(ana[pick], num))
    return worst


def test_c2_gradients(verdict):
    t0 = time.time()
    errs = {name: check_grads(build, arrays) for name, build, arrays in _op_cases()}
    name, op_err = max(errs.items(), key=lambda kv: kv[1])
    e2e = _end_to_end_error()
    dt = time.time() - t0
    ok = op_err < 1e-4 and e2e < 1e-3 and dt < 120
    verdict(2, "gradients", ok, f"{len(errs)} ops worst {op_err:.1e} ({name}), "
                                f"end-to-end {e2e:.1e}, {dt:.1f}s")


# 3 -------------------------------------------------------------------------

def test_c3_compositing(verdict):
    rng = np.random.default_rng(0)
    b, n = 10_000, 16
    z = 1.0 + np.cumsum(rng.uniform(1e-3, 0.5, (b, n)), axis=1)
    far = z[:, -1] + rng.uniform(1e-3, 0.5, b)
    sigma = rng.exponential(1.0, (b, n)) * rng.choice([0.0, 0.1, 1.0, 30.0], (b, 1))
    out = R.composite(sigma, z, far, np.zeros((b, n, 3)), np.zeros((b, n, 1)))
    alpha = out.alpha.data
    total = (sigma * R.interval_lengths(z, far)).sum(axis=1)
    ident = np.abs(alpha.sum(axis=1) - (1 - np.exp(-total))).max()
    in_range = alpha.min() >= 0 and alpha.max() <= 1
    hand = R.composite(np.array([[np.log(2.0), np.log(2.0)]]), np.array([[1.0, 2.0]]), 3.0,
                       np.array([[[1.0, 0, 0], [0, 1.0, 0]]]), np.zeros((1, 2, 2)))
    exact = (np.array_equal(hand.alpha.data, [[0.5, 0.25]])
             and np.array_equal(hand.color.data, [[0.5, 0.25, 0.0]])
             and hand.depth.data[0] == 1.0)
    ok = in_range and ident < 1e-9 and exact
    verdict(3, "compositing", ok, f"alpha in [{alpha.min():.2g}, {alpha.max():.2g}], "
                                  f"sum identity {ident:.1e}, hand case exact={exact}")


# 4 -------------------------------------------------------------------------

def test_c4_fss_concentration(verdict):
    scene = X.sphere_scene()
    vols = X.raw_frequency_volumes(scene.sources)
    t0 = time.time()
    c = X.surface_concentration(scene, vols, n_rays=1000)
    dt = time.time() - t0
    ok = c.ratio >= 2.0 and dt < 60
    verdict(4, "FSS concentration", ok, f"near-surface share fss {c.fss:.4f} vs uniform "
                                        f"{c.uniform:.4f}, ratio {c.ratio:.2f} (need >= 2), "
                                        f"{c.n_rays} rays, {dt:.1f}s")


# 5 -------------------------------------------------------------------------

def test_c5_toy_overfit(verdict, tmp_path):
    cfg = toy_config()
    cfg.train.steps = 20_000
    cfg.train.eval_every = 250
    cfg.train.checkpoint_every = 0
    scene = generate_scene(cfg.scene, 0)
    t0 = time.time()
    best = {"psnr": -np.inf, "step": 0}

    def progress(step, report, evals):
        if evals:
            worst = min(p for _, _, p in evals)
            if worst > best["psnr"]:
                best.update(psnr=worst, step=step + 1)
            return worst >= 25.0
        return time.time() - t0 > 7200

    train(scene, cfg, tmp_path, progress)
    dt = time.time() - t0
    ok = best["psnr"] >= 25.0 and dt <= 7200
    verdict(5, "toy overfit", ok, f"held-out {best['psnr']:.2f} dB at step {best['step']}, "
                                  f"{dt / 60:.1f} min")


# 6 -------------------------------------------------------------------------

def test_c6_loss_identities(verdict):
    rng = np.random.default_rng(0)
    c, f, d = rng.uniform(size=(8, 3)), rng.normal(size=(8, 18)), rng.uniform(1, 4, 8)
    op = rng.uniform(0.6, 1, 8)
    zero, rep0 = compute_losses(c, f, d, op, c, f, d)
    zero_ok = zero.item() == 0.0 and rep0.row() == [0.0] * 5
    worst = 0.0
    for seed in range(200):
        r = np.random.default_rng(seed)
        args = (r.uniform(size=(8, 3)), r.normal(size=(8, 18)), r.uniform(1, 4, 8),
                r.uniform(size=8), r.uniform(size=(8, 3)), r.normal(size=(8, 18)),
                r.uniform(1, 4, 8))
        _, rep = compute_losses(*args)
        worst = max(worst, abs(rep.total - (rep.L_c + 0.1 * rep.L_fb + 0.5 * rep.L_fw
                                            + 0.1 * rep.L_D)))
    wfl = L.loss_wfl(rng.uniform(size=(8, 3)), rng.uniform(size=(8, 3)), np.zeros((8, 18))).item()
    ok = zero_ok and worst <= 1e-12 and wfl == 0.0
    verdict(6, "loss identities", ok, f"zero-error losses zero={zero_ok}, weighted total "
                                      f"{worst:.1e}, WFL on zero frequency {wfl}")


# 7 -------------------------------------------------------------------------

def test_c7_hfiv(verdict):
    rng = np.random.default_rng(2)
    size = 64
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.stack([0.5 + 0.2 * np.sin(2 * np.pi * (k + 3) * xx) * np.cos(2 * np.pi * 5 * yy)
                    for k in range(3)]) + rng.uniform(-0.15, 0.15, (3, size, size))
    img = np.clip(img, 0, 1)
    self_score = M.hfiv(img, img)
    scores = [M.hfiv(img, gaussian_filter(img, (0, r, r), mode="reflect")) for r in (1, 2, 4)]
    mono = 0 < scores[0] < scores[1] < scores[2]
    scale = max(abs(M.hf_proportion(a * img) - M.hf_proportion(img))
                for a in (1e-3, 0.37, 2.0, 1e3))
    ok = self_score == 0 and mono and scale < 1e-12
    verdict(7, "HFIV", ok, f"hfiv(x,x)={self_score}, blur r=1,2,4 -> "
                           f"{', '.join(f'{s:.4f}' for s in scores)}, scale drift {scale:.1e}")


# 8 -------------------------------------------------------------------------

def test_c8_lt_degenerate(verdict):
    scene = generate_scene(SceneConfig(image_size=16, focal=20.0), 1)
    cam = scene.train_targets[0]
    rays = Rays.from_camera(cam, *np.divmod(np.arange(0, 256, 3), 16))
    scfg = SamplerConfig(n_coarse=8, n_fine=4)
    same = True
    for seed in (0, 1, 2):
        model = R.WaveNeRF(micro_model_config(), seed=seed)
        model.renderer.lt.fc2.weight.data[...] = 0
        model.renderer.lt.fc2.bias.data[...] = 0
        with no_grad():
            feats = model.features(scene.sources)
            a = model.render(feats, rays, scfg, seed, use_lt=True)
            b = model.render(feats, rays, scfg, seed, use_lt=False)
        same &= all(np.array_equal(x.data, y.data) for x, y in
                    ((a.color, b.color), (a.freq, b.freq), (a.depth, b.depth), (a.alpha, b.alpha)))
    verdict(8, "zero LT layer", same, f"bit-identical to plain weighted colour on seeds 0-2: {same}")


# 9 -------------------------------------------------------------------------

def test_c9_determinism(verdict, tmp_path):
    runs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert main(["train", "--config", str(MICRO_INI), "--seed", "7", "--out", str(out / "t")]) == 0
        assert main(["render", str(out / "t" / "model.wvnf"), str(out / "t" / "scene" / "cameras.json"),
                     "--out", str(out / "r")]) == 0
        runs.append(out)
    files = [p.relative_to(runs[0]) for p in sorted(runs[0].rglob("*"))
             if p.is_file() and p.name != "manifest.json"]
    differ = [str(f) for f in files if (runs[0] / f).read_bytes() != (runs[1] / f).read_bytes()]
    key = [str(f) for f in files if f.name in ("log.csv", "model.wvnf") or f.parent.name == "r"]
    ok = not differ and len(key) >= 5
    verdict(9, "determinism", ok, f"{len(files)} files compared (log, checkpoints, renders), "
                                  f"differing: {differ or 'none'}")
