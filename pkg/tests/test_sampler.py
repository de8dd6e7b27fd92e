import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from conftest import shifted_camera
from wavenerf import sampler
from wavenerf.mvs import FeatureVolume
from wavenerf.sampler import Ray, Rays
from wavenerf.tensor import Tensor


class TestRay:
    def test_direction_normalised(self):
        r = Ray([0, 0, 0], [3.0, 4.0, 0.0], 1.0, 2.0)
        assert np.linalg.norm(r.direction) == pytest.approx(1.0, abs=1e-12)

    def test_rejects_empty_range(self):
        with pytest.raises(ValueError):
            Ray([0, 0, 0], [0, 0, 1.0], 2.0, 2.0)


class TestCoarse:
    def test_one_sample_per_bin(self):
        z = sampler.sample_coarse(0.0, 4.0, 4, np.random.default_rng(0))[0]
        assert np.all((z >= np.arange(4)) & (z < np.arange(1, 5)))

    def test_deterministic(self):
        a = sampler.sample_coarse(0.0, 1.0, 8, np.random.default_rng(5))
        b = sampler.sample_coarse(0.0, 1.0, 8, np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_pooled_samples_uniform(self):
        z = sampler.sample_coarse(np.zeros(1000), np.ones(1000), 100, np.random.default_rng(1))
        assert z.size == 100_000
        assert stats.kstest(z.ravel(), "uniform").statistic < 0.01

    def test_rejects_single_sample(self):
        with pytest.raises(ValueError):
            sampler.sample_coarse(0.0, 1.0, 1, np.random.default_rng(0))

    def test_per_ray_streams_independent_of_batching(self):
        ids = np.array([4, 17, 9])
        full = sampler.per_ray_uniform((3, 2), ids, 5, sampler.COARSE_STREAM)
        part = sampler.per_ray_uniform((3, 2), ids[1:], 5, sampler.COARSE_STREAM)
        assert np.array_equal(full[1:], part)
        other = sampler.per_ray_uniform((3, 2), ids, 5, sampler.FINE_STREAM)
        assert not np.array_equal(full, other)


class TestPdf:
    def test_equal_weights_uniform(self):
        np.testing.assert_allclose(sampler.build_pdf(np.full(6, 0.3)), np.full((1, 5), 0.2))

    def test_zero_weights_uniform(self):
        np.testing.assert_allclose(sampler.build_pdf(np.zeros(5)), np.full((1, 4), 0.25))

    def test_hand_case(self):
        eps = 1e-3
        expect = np.array([eps, eps + 0.5, eps + 0.5])
        np.testing.assert_allclose(sampler.build_pdf([0, 0, 1, 0], eps)[0],
                                   expect / expect.sum(), atol=1e-15)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.integers(2, 40), elements=st.floats(0, 1e6)))
    def test_normalised_with_floor(self, w):
        eps = 1e-3
        pdf = sampler.build_pdf(w, eps)[0]
        assert abs(pdf.sum() - 1.0) < 1e-12
        raw = np.maximum(0.5 * (w[1:] + w[:-1]), 0) + eps
        assert np.all(pdf >= eps / raw.sum() * (1 - 1e-12))


class TestFine:
    def test_uniform_pdf_gives_uniform_samples(self):
        b, n = 5000, 20
        coarse = np.broadcast_to(np.linspace(0, 1, 9), (b, 9))
        pdf = np.full((b, 8), 1 / 8)
        z = sampler.sample_fine(pdf, coarse, n, np.random.default_rng(2))
        assert z.size == 100_000
        assert stats.kstest(z.ravel(), "uniform").statistic < 0.02

    def test_concentrated_pdf(self):
        k, eps = 10, 1e-3
        pdf = np.full(k, eps)
        pdf[6] = 1 - (k - 1) * eps
        coarse = np.linspace(2.0, 6.0, k + 1)
        z = sampler.sample_fine(np.tile(pdf, (3000, 1)), np.tile(coarse, (3000, 1)), 32,
                                np.random.default_rng(3))
        inside = (z >= coarse[6]) & (z <= coarse[7])
        assert inside.mean() >= 0.95

    def test_count_sorted_in_range(self):
        rng = np.random.default_rng(4)
        coarse = np.sort(rng.uniform(1, 5, (7, 96)), axis=1)
        pdf = sampler.build_pdf(rng.uniform(size=(7, 96)))
        z = sampler.sample_fine(pdf, coarse, 32, rng)
        assert z.shape == (7, 32)
        assert np.all(np.diff(z, axis=1) >= 0)
        assert np.all((z >= coarse[:, :1]) & (z <= coarse[:, -1:]))

    def test_repeatable(self):
        pdf = sampler.build_pdf(np.random.default_rng(0).uniform(size=(2, 12)))
        coarse = np.tile(np.linspace(0, 1, 12), (2, 1))
        a = sampler.sample_fine(pdf, coarse, 8, np.random.default_rng(9))
        b = sampler.sample_fine(pdf, coarse, 8, np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_bin_count_mismatch(self):
        with pytest.raises(ValueError):
            sampler.sample_fine(np.full((1, 3), 1 / 3), np.zeros((1, 3)), 4,
                                np.random.default_rng(0))


class TestMerge:
    def test_interleave(self):
        assert sampler.merge([1.0, 3.0], [2.0]).tolist() == [1.0, 2.0, 3.0]

    def test_empty_fine(self):
        assert sampler.merge([1.0, 3.0], []).tolist() == [1.0, 3.0]

    def test_duplicates_collapse(self):
        assert sampler.merge([1.0, 2.0], [2.0 + 1e-13]).tolist() == [1.0, 2.0]

    def test_no_collision_length(self):
        rng = np.random.default_rng(5)
        c, f = np.sort(rng.uniform(size=96)), np.sort(rng.uniform(size=32))
        assert len(sampler.merge(c, f)) == 128

    def test_batch_strictly_increasing_with_ties(self):
        c = np.array([[1.0, 2.0, 3.0]])
        f = np.array([[2.0, 2.0]])
        z = sampler.merge_batch(c, f)
        assert z.shape == (1, 5)
        assert np.all(np.diff(z) > 0)


def _volume(cells, near=1.0, far=4.0, size=4):
    d = cells.shape[0]
    hyp = np.broadcast_to(np.linspace(near, far, d)[:, None, None], (d, size, size)).copy()
    return FeatureVolume("freq", hyp, Tensor(cells), np.full((d, size, size), 2.0),
                         np.zeros(d, bool), 0, 1.0)


def _rig():
    return [shifted_camera(0.0, size=4, focal=3.0), shifted_camera(0.2, size=4, focal=3.0)]


def _frustum_points(n, seed):
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.5, 4.5, n)
    xy = rng.uniform(-1.0, 1.0, (n, 2)) * z[:, None] * 0.8
    return np.column_stack([xy, z])


class TestFrequencyWeights:
    def test_zero_volume(self):
        cams = _rig()
        vols = [_volume(np.zeros((4, 4, 4, 6))) for _ in cams]
        w = sampler.frequency_weights(_frustum_points(50, 0)[None], vols, cams)
        assert np.all(w == 0)

    def test_single_cell_support(self):
        cams = _rig()
        cells = np.zeros((4, 4, 4, 6))
        cells[2, 1, 2, 3:] = 1.0                       # mean half only
        vols = [_volume(cells), _volume(np.zeros_like(cells))]
        pts = _frustum_points(4000, 1)
        w = sampler.frequency_weights(pts[None], vols, cams)[0]
        uv, z = cams[0].project(pts)
        gx, gy, gz = uv[:, 0] - 0.5, uv[:, 1] - 0.5, z - 1.0
        support = (np.abs(gx - 2) < 1) & (np.abs(gy - 1) < 1) & (np.abs(gz - 2) < 1)
        assert support.sum() > 20
        assert np.all(w[support] > 0)
        assert np.all(w[~support] == 0)

    def test_variance_half_ignored(self):
        cams = _rig()
        cells = np.zeros((4, 4, 4, 6))
        cells[..., :3] = 5.0
        w = sampler.frequency_weights(_frustum_points(30, 2)[None],
                                      [_volume(cells), _volume(cells)], cams)
        assert np.all(w == 0)

    def test_view_order_invariant(self):
        cams = _rig()
        rng = np.random.default_rng(3)
        vols = [_volume(rng.normal(size=(4, 4, 4, 6))) for _ in cams]
        pts = _frustum_points(200, 4)[None]
        a = sampler.frequency_weights(pts, vols, cams)
        b = sampler.frequency_weights(pts, vols[::-1], cams[::-1])
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_missing_every_frustum(self):
        cams = _rig()
        vols = [_volume(np.ones((4, 4, 4, 6))) for _ in cams]
        behind = np.array([[[0.0, 0.0, -2.0], [5.0, 0.0, 2.0]]])
        assert np.all(sampler.frequency_weights(behind, vols, cams) == 0)


class TestSampleRays:
    def _rays(self, n=6):
        cam = shifted_camera(0.0)
        rows, cols = np.divmod(np.arange(n) * 7, 16)
        return Rays.from_camera(cam, rows, cols), cam

    def test_shapes_and_invariants(self):
        rays, cam = self._rays()
        vol = _volume(np.random.default_rng(0).uniform(size=(4, 16, 16, 4)), size=16)
        s = sampler.sample_rays(rays, 12, 6, 0, "fss", [vol], [cam])
        assert s.merged_z.shape == (6, 18)
        assert np.all(np.diff(s.merged_z, axis=1) > 0)
        assert np.all((s.merged_z >= 1.0) & (s.merged_z <= 4.0))
        np.testing.assert_allclose(s.pdf.sum(axis=1), 1.0, atol=1e-12)

    def test_deterministic_per_seed(self):
        rays, _ = self._rays()
        a = sampler.sample_rays(rays, 8, 4, (1, 2), "uniform")
        b = sampler.sample_rays(rays, 8, 4, (1, 2), "uniform")
        c = sampler.sample_rays(rays, 8, 4, (1, 3), "uniform")
        assert np.array_equal(a.merged_z, b.merged_z)
        assert not np.array_equal(a.merged_z, c.merged_z)

    def test_unknown_strategy(self):
        rays, _ = self._rays()
        with pytest.raises(ValueError):
            sampler.sample_rays(rays, 8, 4, 0, "importance")
