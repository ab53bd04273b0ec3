import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewsplat.losses import (
    d_ssim_loss,
    l1_loss,
    scale_invariant_depth_loss,
    ssim_value,
    total_loss,
)
from fewsplat.errors import ValidationError


class TestL1:
    def test_identical_zero(self):
        img = np.random.default_rng(0).uniform(size=(8, 8, 3))
        value, adj = l1_loss(img, img)
        assert value == 0.0
        assert not adj.any()

    def test_constant_offset(self):
        rng = np.random.default_rng(1)
        target = rng.uniform(size=(6, 7, 3))
        value, adj = l1_loss(target + 0.1, target)
        assert value == pytest.approx(0.1, abs=1e-12)
        np.testing.assert_allclose(adj, 1.0 / target.size, atol=1e-15)

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(size=(5, 5, 3))
        b = rng.uniform(size=(5, 5, 3))
        value, _ = l1_loss(a, b)
        oracle = sum(abs(float(x) - float(y)) for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert value == pytest.approx(oracle, abs=1e-12)

    def test_adjoint_fd(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0.2, 0.8, size=(4, 4, 3))
        b = rng.uniform(0.2, 0.8, size=(4, 4, 3))
        _, adj = l1_loss(a, b)
        h = 1e-7
        for idx in [(0, 0, 0), (2, 3, 1), (3, 1, 2)]:
            ap = a.copy()
            ap[idx] += h
            am = a.copy()
            am[idx] -= h
            fd = (l1_loss(ap, b)[0] - l1_loss(am, b)[0]) / (2 * h)
            assert fd == pytest.approx(adj[idx], rel=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            l1_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestDssim:
    def test_identical_zero(self):
        img = np.random.default_rng(0).uniform(size=(16, 16, 3))
        value, adj = d_ssim_loss(img, img)
        assert value == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(adj, 0.0, atol=1e-9)

    def test_checkerboard_inversion_near_one(self):
        i, j = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
        target = ((i + j) % 2).astype(np.float64)[..., None] * np.ones(3)
        rendered = 1.0 - target
        value, _ = d_ssim_loss(rendered, target)
        assert value > 0.95  # SSIM near -1 region-wise

    def test_matches_independent_skimage(self):
        skimage = pytest.importorskip("skimage.metrics")
        rng = np.random.default_rng(4)
        a = rng.uniform(size=(32, 32, 3))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
        ours = ssim_value(a, b)
        theirs = skimage.structural_similarity(
            a, b, channel_axis=2, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, data_range=1.0,
        )
        assert ours == pytest.approx(theirs, abs=1e-7)

    def test_value_in_unit_interval(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            a = rng.uniform(size=(12, 12, 3))
            b = rng.uniform(size=(12, 12, 3))
            value, _ = d_ssim_loss(a, b)
            assert 0.0 <= value <= 1.0

    def test_adjoint_fd(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(0.1, 0.9, size=(16, 16, 3))
        b = rng.uniform(0.1, 0.9, size=(16, 16, 3))
        _, adj = d_ssim_loss(a, b)
        h = 1e-6
        worst = 0.0
        for idx in [(0, 0, 0), (8, 8, 1), (15, 15, 2), (3, 12, 0), (11, 5, 2)]:
            ap = a.copy()
            ap[idx] += h
            am = a.copy()
            am[idx] -= h
            fd = (d_ssim_loss(ap, b)[0] - d_ssim_loss(am, b)[0]) / (2 * h)
            denom = max(abs(fd), abs(adj[idx]), 1e-6)
            worst = max(worst, abs(fd - adj[idx]) / denom)
        assert worst <= 1e-4

    def test_too_small_image(self):
        with pytest.raises(ValidationError):
            d_ssim_loss(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


class TestDepthLoss:
    def test_identical_depths_zero(self):
        rng = np.random.default_rng(0)
        y = rng.uniform(1, 5, size=(8, 8))
        value, adj, _ = scale_invariant_depth_loss(y, y)
        assert value == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(adj, 0.0, atol=1e-12)

    def test_global_scale_gives_zero(self):
        rng = np.random.default_rng(1)
        y = rng.uniform(0.5, 4, size=(6, 6))
        for c in (0.1, 3.0, 77.0):
            value, _, _ = scale_invariant_depth_loss(c * y, y)
            assert value == pytest.approx(0.0, abs=1e-12)

    def test_hand_computed_two_pixel_case(self):
        # y = (1, 1), y* = (1, e): d = (0, -1), alpha = 0.5, L = 0.125
        y = np.array([[1.0, 1.0]])
        y_star = np.array([[1.0, np.e]])
        value, adj, _ = scale_invariant_depth_loss(y, y_star)
        assert value == pytest.approx(0.125, abs=1e-12)
        # adjoint: r = (0.5, -0.5); dL/dy_i = r_i / (n y_i)
        np.testing.assert_allclose(adj, [[0.25, -0.25]], atol=1e-12)

    @given(c=st.floats(0.01, 100.0))
    @settings(max_examples=60, deadline=None)
    def test_scale_invariance_property(self, c):
        rng = np.random.default_rng(7)
        y = rng.uniform(0.2, 8, size=(10, 10))
        ystar = rng.uniform(0.2, 8, size=(10, 10))
        base, _, _ = scale_invariant_depth_loss(y, ystar)
        scaled_prior, _, _ = scale_invariant_depth_loss(y, c * ystar)
        scaled_render, _, _ = scale_invariant_depth_loss(c * y, ystar)
        assert abs(base - scaled_prior) <= 1e-10
        assert abs(base - scaled_render) <= 1e-10

    def test_nonnegative_and_zero_iff_constant_ratio(self):
        rng = np.random.default_rng(2)
        y = rng.uniform(0.5, 2, size=(5, 5))
        ystar = rng.uniform(0.5, 2, size=(5, 5))
        value, _, _ = scale_invariant_depth_loss(y, ystar)
        assert value > 0
        value2, _, _ = scale_invariant_depth_loss(2.7 * ystar, ystar)
        assert value2 == pytest.approx(0.0, abs=1e-12)

    def test_empty_mask(self):
        y = np.ones((4, 4))
        value, adj, mask = scale_invariant_depth_loss(y, y, mask=np.zeros((4, 4), bool))
        assert value == 0.0
        assert not adj.any() and not mask.any()

    def test_adjoint_fd(self):
        rng = np.random.default_rng(3)
        y = rng.uniform(0.5, 4, size=(8, 8))
        ystar = rng.uniform(0.5, 4, size=(8, 8))
        mask = rng.uniform(size=(8, 8)) > 0.3
        _, adj, _ = scale_invariant_depth_loss(y, ystar, mask=mask)
        h = 1e-6
        worst = 0.0
        for idx in [(0, 0), (3, 3), (7, 5), (2, 6)]:
            if not mask[idx]:
                assert adj[idx] == 0.0
                continue
            yp = y.copy()
            yp[idx] += h
            ym = y.copy()
            ym[idx] -= h
            fd = (
                scale_invariant_depth_loss(yp, ystar, mask=mask)[0]
                - scale_invariant_depth_loss(ym, ystar, mask=mask)[0]
            ) / (2 * h)
            denom = max(abs(fd), abs(adj[idx]), 1e-9)
            worst = max(worst, abs(fd - adj[idx]) / denom)
        assert worst <= 1e-4

    def test_uniform_log_scaling_direction_is_null(self):
        # sum over mask of y_i dL/dy_i == 0 (scale invariance consequence)
        rng = np.random.default_rng(4)
        y = rng.uniform(0.5, 4, size=(9, 9))
        ystar = rng.uniform(0.5, 4, size=(9, 9))
        mask = rng.uniform(size=(9, 9)) > 0.4
        _, adj, _ = scale_invariant_depth_loss(y, ystar, mask=mask)
        assert abs(float((y * adj)[mask].sum())) <= 1e-12

    def test_centered_log_prior_path_matches_raw(self):
        rng = np.random.default_rng(5)
        y = rng.uniform(0.5, 4, size=(8, 8))
        ystar = rng.uniform(0.5, 4, size=(8, 8))
        mask = rng.uniform(size=(8, 8)) > 0.2
        raw, _, _ = scale_invariant_depth_loss(y, ystar, mask=mask)
        lstar = np.zeros_like(y)
        lstar[mask] = np.log(ystar[mask]) - np.log(ystar[mask]).mean()
        centered, _, _ = scale_invariant_depth_loss(y, mask=mask, prior_log=lstar)
        assert centered == pytest.approx(raw, abs=1e-12)


class FakeRender:
    def __init__(self, color, depth, alpha):
        self.color = color
        self.depth = depth
        self.alpha = alpha


def make_view(rng, h=16, w=16):
    from fewsplat.camera import CameraModel
    from fewsplat.dataset import TrainView

    cam = CameraModel(fx=20.0, fy=20.0, cx=w / 2, cy=h / 2, width=w, height=h,
                      rotation_w2c=np.eye(3), translation_w2c=np.zeros(3))
    return TrainView(
        camera=cam,
        image=rng.uniform(size=(h, w, 3)),
        prior_depth=rng.uniform(1.0, 4.0, size=(h, w)),
        valid_mask=np.ones((h, w), bool),
        name="fake",
    )


class TestTotalLoss:
    def test_zero_lambda_depth_reduces_to_photometric(self):
        rng = np.random.default_rng(0)
        view = make_view(rng)
        rendered = FakeRender(
            color=rng.uniform(size=(16, 16, 3)),
            depth=rng.uniform(1, 4, size=(16, 16)),
            alpha=np.ones((16, 16)),
        )
        bundle = total_loss(rendered, view, lam=0.2, lam_depth=0.0)
        l1, _ = l1_loss(rendered.color, view.image)
        dssim, _ = d_ssim_loss(rendered.color, view.image)
        assert bundle.total == pytest.approx(0.8 * l1 + 0.2 * dssim, abs=1e-12)
        assert not bundle.dL_ddepth.any()

    def test_all_terms_zero(self):
        rng = np.random.default_rng(1)
        view = make_view(rng)
        depth = view.prior_depth.copy()
        rendered = FakeRender(color=view.image.copy(), depth=depth, alpha=np.ones((16, 16)))
        bundle = total_loss(rendered, view, lam=0.2, lam_depth=0.005)
        assert bundle.total == pytest.approx(0.0, abs=1e-12)
        assert np.abs(bundle.dL_dcolor).max() <= 1e-9
        assert np.abs(bundle.dL_ddepth).max() <= 1e-12

    def test_weighted_sum_of_component_oracles(self):
        rng = np.random.default_rng(2)
        view = make_view(rng)
        rendered = FakeRender(
            color=rng.uniform(size=(16, 16, 3)),
            depth=rng.uniform(1, 4, size=(16, 16)),
            alpha=rng.uniform(0.4, 1.0, size=(16, 16)),
        )
        lam, lam_depth = 0.2, 0.005
        bundle = total_loss(rendered, view, lam=lam, lam_depth=lam_depth)
        l1, _ = l1_loss(rendered.color, view.image)
        dssim, _ = d_ssim_loss(rendered.color, view.image)
        mask = view.valid_mask & (rendered.alpha >= 0.5) & (rendered.depth > 1e-6)
        depth, _, _ = scale_invariant_depth_loss(
            rendered.depth, mask=mask, prior_log=view.prior_log
        )
        assert bundle.l1 == pytest.approx(l1, abs=1e-15)
        assert bundle.d_ssim == pytest.approx(dssim, abs=1e-15)
        assert bundle.depth == pytest.approx(depth, abs=1e-15)
        assert bundle.total == pytest.approx(
            (1 - lam) * l1 + lam * dssim + lam_depth * depth, abs=1e-12
        )

    def test_linear_in_weights(self):
        rng = np.random.default_rng(3)
        view = make_view(rng)
        rendered = FakeRender(
            color=rng.uniform(size=(16, 16, 3)),
            depth=rng.uniform(1, 4, size=(16, 16)),
            alpha=np.ones((16, 16)),
        )
        b1 = total_loss(rendered, view, lam=0.0, lam_depth=0.0)
        b2 = total_loss(rendered, view, lam=1.0, lam_depth=0.0)
        b3 = total_loss(rendered, view, lam=0.0, lam_depth=1.0)
        mixed = total_loss(rendered, view, lam=0.3, lam_depth=0.01)
        expected = 0.7 * b1.l1 + 0.3 * b2.d_ssim + 0.01 * b3.depth
        assert mixed.total == pytest.approx(expected, abs=1e-12)

    def test_low_coverage_pixels_excluded(self):
        rng = np.random.default_rng(4)
        view = make_view(rng)
        alpha = np.ones((16, 16))
        alpha[0, :] = 0.2  # below the 0.5 coverage threshold
        rendered = FakeRender(
            color=rng.uniform(size=(16, 16, 3)),
            depth=rng.uniform(1, 4, size=(16, 16)),
            alpha=alpha,
        )
        bundle = total_loss(rendered, view, lam=0.2, lam_depth=0.005)
        assert not bundle.depth_mask[0, :].any()
        assert bundle.depth_mask[1:, :].all()
        assert not bundle.dL_ddepth[0, :].any()
