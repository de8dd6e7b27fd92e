import math

import numpy as np
import pytest

from conftest import micro_model_config
from wavenerf import train as T
from wavenerf.config import Config, SamplerConfig, SceneConfig
from wavenerf.losses import LossReport
from wavenerf.renderer import WaveNeRF
from wavenerf.scene import generate_scene


def micro_config(steps=3):
    cfg = Config()
    cfg.scene = SceneConfig(image_size=8, focal=10.0, n_train_targets=2)
    cfg.model = micro_model_config()
    cfg.sampler = SamplerConfig(n_coarse=6, n_fine=2)
    cfg.train.steps = steps
    cfg.train.batch_size = 10
    cfg.train.chunk = 4
    cfg.train.checkpoint_every = 2
    return cfg


@pytest.fixture(scope="module")
def scene():
    return generate_scene(micro_config().scene, 0)


def test_zero_steps_writes_initial_checkpoint_only(scene, tmp_path):
    res = T.train(scene, micro_config(0), tmp_path)
    assert [p.name for p in res.checkpoints] == ["ckpt_000000.wvnf"]
    assert sorted(p.name for p in tmp_path.glob("*.wvnf")) == ["ckpt_000000.wvnf"]
    assert (tmp_path / "log.csv").read_text().strip() == ",".join(T.LOG_HEADER)


def test_log_and_checkpoints(scene, tmp_path):
    res = T.train(scene, micro_config(3), tmp_path)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,L_c,L_fb,L_fw,L_D,total,psnr_train"
    assert len(lines) == 4
    assert [p.name for p in res.checkpoints] == ["ckpt_000000.wvnf", "ckpt_000002.wvnf",
                                                 "model.wvnf"]


def test_step_zero_loss_matches_reloaded_checkpoint(scene, tmp_path):
    cfg = micro_config(2)
    res = T.train(scene, cfg, tmp_path)
    again = T.recompute_step_loss(tmp_path / "ckpt_000000.wvnf", scene, cfg, 0)
    assert again.row() == res.reports[0].row()


def test_seed_gives_identical_logs(scene, tmp_path):
    T.train(scene, micro_config(3), tmp_path / "a")
    T.train(scene, micro_config(3), tmp_path / "b")
    assert (tmp_path / "a" / "log.csv").read_bytes() == (tmp_path / "b" / "log.csv").read_bytes()
    assert (tmp_path / "a" / "model.wvnf").read_bytes() == (tmp_path / "b" / "model.wvnf").read_bytes()


def test_reload_uses_sidecar_config(scene, tmp_path):
    cfg = micro_config(1)
    T.train(scene, cfg, tmp_path)
    model, cfg2, meta = T.load_model(tmp_path / "model.wvnf")
    assert meta["step"] == 1 and cfg2.model == cfg.model
    assert model.state_dict().keys() == WaveNeRF(cfg.model).state_dict().keys()


def test_divergence_aborts_with_snapshot(scene, tmp_path, monkeypatch):
    real = T.loss_and_grads

    def poisoned(model, sources, batch, cfg, seed, **kw):
        rep = real(model, sources, batch, cfg, seed, **kw)
        if seed[1] == 1:
            rep.total = math.nan
        return rep

    monkeypatch.setattr(T, "loss_and_grads", poisoned)
    with pytest.raises(T.TrainingDiverged):
        T.train(scene, micro_config(4), tmp_path)
    assert (tmp_path / "diverged.wvnf").exists()
    assert len((tmp_path / "log.csv").read_text().splitlines()) == 3


def test_chunked_gradients_equal_single_graph(scene):
    cfg = micro_config()
    targets = T.TargetSet(scene.train_targets, [scene.depths[c.name] for c in scene.train_targets])
    batch = targets.batch(T.draw_pixels(targets.n_pixels, 10, 0, 0))
    model = WaveNeRF(cfg.model, seed=3)
    feats = model.features(scene.sources)
    z = model.sample(feats, batch.rays, cfg.sampler, (0, 0)).merged_z

    def grads(chunk):
        cfg.train.chunk = chunk
        for p in model.parameters():
            p.grad = None
        rep = T.loss_and_grads(model, scene.sources, batch, cfg, (0, 0), z=z)
        return rep, [np.zeros(p.shape) if p.grad is None else p.grad.copy()
                     for p in model.parameters()]

    rep1, g1 = grads(100)
    rep3, g3 = grads(3)
    assert rep1.total == pytest.approx(rep3.total, rel=1e-12)
    for a, b in zip(g1, g3):
        np.testing.assert_allclose(b, a, rtol=1e-9, atol=1e-12)


def test_cosine_schedule():
    cfg = micro_config(100)
    assert T.lr_at(0, cfg) == cfg.optim.lr
    assert T.lr_at(100, cfg) == pytest.approx(cfg.optim.lr * cfg.optim.lr_min_ratio)
    assert T.lr_at(30, cfg) > T.lr_at(60, cfg)


def test_pixel_draws_deterministic():
    a = T.draw_pixels(1000, 64, 0, 5)
    assert np.array_equal(a, T.draw_pixels(1000, 64, 0, 5))
    assert len(np.unique(a)) == 64
    assert not np.array_equal(a, T.draw_pixels(1000, 64, 0, 6))


def test_report_row_order():
    r = LossReport(1.0, 2.0, 3.0, 4.0, 5.0)
    assert r.row() == [1.0, 2.0, 3.0, 4.0, 5.0]
