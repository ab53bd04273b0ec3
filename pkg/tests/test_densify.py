import numpy as np
import pytest

from fewsplat.densify import (
    DensifyConfig,
    accumulate_stats,
    densify,
    mean_stats,
    prune_by_opacity,
    retention_policy,
)
from fewsplat.errors import ValidationError
from fewsplat.scene import GaussianCloud, logit, sigmoid


def small_cloud(n=6, extent=10.0, log_scale=-4.0, rng=None):
    rng = rng or np.random.default_rng(0)
    return GaussianCloud(
        positions=rng.normal(size=(n, 3)),
        log_scales=np.full((n, 3), log_scale),
        rotations=np.tile([1.0, 0, 0, 0], (n, 1)),
        opacity_logits=logit(np.full(n, 0.4)),
        sh=rng.normal(scale=0.1, size=(n, 3, 4)),
        scene_extent=extent,
    )


class TestConfig:
    def test_defaults(self):
        cfg = DensifyConfig()
        assert cfg.grad_threshold == 2e-4
        assert cfg.percent_dense == 0.01
        assert (cfg.start_iter, cfg.stop_iter, cfg.interval) == (500, 5000, 100)
        assert cfg.split_factor == 1.6 and cfg.split_count == 2

    def test_schedule_window(self):
        cfg = DensifyConfig()
        assert cfg.active_at(500)
        assert cfg.active_at(4900)
        assert not cfg.active_at(5000)  # stop is exclusive
        assert not cfg.active_at(400)
        assert not cfg.active_at(550)  # off-interval

    def test_invalid(self):
        with pytest.raises(ValidationError):
            DensifyConfig(start_iter=100, stop_iter=100)
        with pytest.raises(ValidationError):
            DensifyConfig(grad_threshold=0.0)


class TestAccumulateStats:
    def test_invisible_unchanged(self):
        cloud = small_cloud()
        visible = np.array([True, True, False, True, True, True])
        accumulate_stats(cloud, np.full(6, 0.1), visible)
        assert cloud.grad_accum[2] == 0.0 and cloud.grad_count[2] == 0
        assert cloud.grad_accum[0] == pytest.approx(0.1)

    def test_running_mean(self):
        cloud = small_cloud()
        visible = np.ones(6, bool)
        accumulate_stats(cloud, np.full(6, 0.1), visible)
        accumulate_stats(cloud, np.full(6, 0.1), visible)
        np.testing.assert_allclose(mean_stats(cloud), 0.1, atol=1e-15)

    def test_mean_matches_independent_recomputation(self):
        rng = np.random.default_rng(3)
        cloud = small_cloud()
        seq = rng.uniform(size=(10, 6))
        vis = rng.uniform(size=(10, 6)) > 0.3
        for norms, v in zip(seq, vis):
            accumulate_stats(cloud, norms, v)
        expected = np.zeros(6)
        for i in range(6):
            hits = seq[vis[:, i], i]
            expected[i] = hits.sum() / max(len(hits), 1)
        np.testing.assert_allclose(mean_stats(cloud), expected, atol=1e-12)


class TestDensify:
    def test_below_threshold_unchanged_and_stats_reset(self):
        cloud = small_cloud()
        accumulate_stats(cloud, np.full(6, 1e-5), np.ones(6, bool))
        res = densify(cloud, DensifyConfig(), np.random.default_rng(0))
        assert res.cloud.count == 6
        assert res.n_cloned == 0 and res.n_split == 0
        np.testing.assert_array_equal(res.cloud.positions, cloud.positions)
        assert not res.cloud.grad_accum.any() and not res.cloud.grad_count.any()

    def test_clone_small_gaussian(self):
        cloud = small_cloud(log_scale=-4.0, extent=10.0)  # scale .018 < .01*10
        norms = np.zeros(6)
        norms[2] = 1.0  # only index 2 exceeds the threshold
        accumulate_stats(cloud, norms, np.ones(6, bool))
        res = densify(cloud, DensifyConfig(), np.random.default_rng(0))
        assert res.cloud.count == 7
        assert res.n_cloned == 1 and res.n_split == 0
        clone_row = 6  # appended after the originals
        np.testing.assert_array_equal(res.cloud.positions[clone_row], cloud.positions[2])
        np.testing.assert_array_equal(res.cloud.sh[clone_row], cloud.sh[2])
        assert res.source_rows[clone_row] == 2
        assert res.fresh[clone_row] and not res.fresh[:6].any()

    def test_split_large_gaussian(self):
        cloud = small_cloud(log_scale=0.0, extent=10.0)  # scale 1 >= .01*10
        norms = np.zeros(6)
        norms[1] = 1.0
        accumulate_stats(cloud, norms, np.ones(6, bool))
        cfg = DensifyConfig()
        res = densify(cloud, cfg, np.random.default_rng(7))
        # one parent removed, two children appended
        assert res.cloud.count == 7
        assert res.n_split == 1 and res.n_cloned == 0
        children = res.cloud.log_scales[5:]
        expected = np.exp(cloud.log_scales[1]) / cfg.split_factor
        np.testing.assert_allclose(np.exp(children), np.broadcast_to(expected, (2, 3)), rtol=1e-12)
        assert res.fresh[5:].all()
        np.testing.assert_array_equal(res.source_rows[5:], [1, 1])
        # parent row 1 is gone from the survivors
        np.testing.assert_array_equal(res.source_rows[:5], [0, 2, 3, 4, 5])

    def test_deterministic_given_seed(self):
        cloud = small_cloud(log_scale=0.0)
        accumulate_stats(cloud, np.ones(6), np.ones(6, bool))
        a = densify(cloud.copy(), DensifyConfig(), np.random.default_rng(3))
        b = densify(cloud.copy(), DensifyConfig(), np.random.default_rng(3))
        np.testing.assert_array_equal(a.cloud.positions, b.cloud.positions)

    def test_children_sampled_from_parent_distribution(self):
        # with many children, their sample mean approaches the parent position
        cloud = small_cloud(n=1, log_scale=-2.0)
        accumulate_stats(cloud, np.ones(1), np.ones(1, bool))
        cfg = DensifyConfig(percent_dense=1e-9, split_count=4000)
        res = densify(cloud, cfg, np.random.default_rng(11))
        children = res.cloud.positions[:]
        offset = children.mean(axis=0) - cloud.positions[0]
        assert np.linalg.norm(offset) < 4 * np.exp(-2.0) / np.sqrt(4000) * 3 + 1e-3


class TestRetention:
    def test_low_opacity_retained(self):
        cloud = small_cloud()
        cloud.opacity_logits[:] = logit(0.001)
        kept, mask = retention_policy(cloud)
        assert kept is cloud
        assert mask.all()

    def test_nan_splat_culled_with_warning(self, caplog):
        cloud = small_cloud()
        cloud.positions[3, 1] = np.nan
        with caplog.at_level("WARNING"):
            kept, mask = retention_policy(cloud)
        assert kept.count == 5
        assert not mask[3] and mask.sum() == 5
        assert "cull" in caplog.text

    def test_idempotent(self):
        cloud = small_cloud()
        cloud.positions[0, 0] = np.inf
        once, _ = retention_policy(cloud)
        twice, mask = retention_policy(once)
        assert twice is once
        assert mask.all()

    def test_opacity_never_reset(self):
        cloud = small_cloud()
        before = cloud.opacity_logits.copy()
        retention_policy(cloud)
        np.testing.assert_array_equal(cloud.opacity_logits, before)


class TestPruneBaseline:
    def test_prunes_low_opacity(self):
        cloud = small_cloud()
        cloud.opacity_logits[2] = logit(0.001)
        pruned, keep = prune_by_opacity(cloud, min_opacity=0.005)
        assert pruned.count == 5
        assert not keep[2]
        assert np.all(sigmoid(pruned.opacity_logits) >= 0.005)

    def test_keeps_all_above_threshold(self):
        cloud = small_cloud()
        pruned, keep = prune_by_opacity(cloud)
        assert pruned is cloud and keep.all()
