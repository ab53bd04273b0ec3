"""Training objective: L1 + D-SSIM photometric terms plus the
scale-invariant log-space depth term, each with analytic per-pixel adjoints.

The combined loss is (1 - lam) * L1 + lam * D-SSIM + lam_depth * L_depth.
The depth term is half the population variance of the per-pixel log-depth
residuals over the supervised mask, which makes it invariant to a global
multiplicative scale on either depth map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import NDArray

from .errors import ValidationError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

DEPTH_EPS = 1e-6
DEFAULT_ALPHA_MIN = 0.5  # required rendered-alpha coverage for depth supervision


@dataclass
class LossBundle:
    l1: float
    d_ssim: float
    depth: float
    total: float
    dL_dcolor: NDArray  # (H, W, 3)
    dL_ddepth: NDArray  # (H, W)
    depth_mask: NDArray  # (H, W) pixels the depth term actually used

    def validate(self):
        terms = (self.l1, self.d_ssim, self.depth, self.total)
        if not all(np.isfinite(t) for t in terms):
            raise ValidationError(f"non-finite loss terms: {terms}")
        if min(self.l1, self.d_ssim, self.depth) < 0:
            raise ValidationError("loss terms must be non-negative")


def l1_loss(rendered, target):
    """Mean absolute error over pixel-channels; returns (value, adjoint)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValidationError(f"shape mismatch {rendered.shape} vs {target.shape}")
    diff = rendered - target
    value = float(np.abs(diff).mean())
    adjoint = np.sign(diff) / diff.size
    return value, adjoint


def _gaussian_kernel_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA):
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-(t**2) / (2 * sigma**2))
    return k / k.sum()


_KERNEL = _gaussian_kernel_1d()


def _filter_valid(x):
    """Separable 11x11 Gaussian window means, valid positions only."""
    t = sliding_window_view(x, SSIM_WINDOW, axis=0) @ _KERNEL
    return sliding_window_view(t, SSIM_WINDOW, axis=1) @ _KERNEL


def _filter_adjoint(z):
    """Adjoint of _filter_valid (zero-padded full correlation)."""
    pad = SSIM_WINDOW - 1
    return _filter_valid(np.pad(z, pad))


def ssim_statistics(x, y):
    """Windowed means/variances/covariance for one channel pair."""
    mu_x = _filter_valid(x)
    mu_y = _filter_valid(y)
    var_x = _filter_valid(x * x) - mu_x**2
    var_y = _filter_valid(y * y) - mu_y**2
    cov = _filter_valid(x * y) - mu_x * mu_y
    return mu_x, mu_y, var_x, var_y, cov


def ssim_map(x, y):
    """Per-window SSIM for one channel (dynamic range 1)."""
    mu_x, mu_y, var_x, var_y, cov = ssim_statistics(x, y)
    n1 = 2 * mu_x * mu_y + SSIM_C1
    n2 = 2 * cov + SSIM_C2
    d1 = mu_x**2 + mu_y**2 + SSIM_C1
    d2 = var_x + var_y + SSIM_C2
    return (n1 * n2) / (d1 * d2)


def ssim_value(rendered, target) -> float:
    """Mean SSIM over valid window positions, averaged over channels."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValidationError(f"shape mismatch {rendered.shape} vs {target.shape}")
    if rendered.ndim == 2:
        rendered = rendered[..., None]
        target = target[..., None]
    h, w = rendered.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValidationError(f"image {h}x{w} smaller than the {SSIM_WINDOW}-pixel SSIM window")
    return float(
        np.mean([ssim_map(rendered[..., c], target[..., c]).mean() for c in range(rendered.shape[2])])
    )


def d_ssim_loss(rendered, target):
    """Structural dissimilarity (1 - SSIM) / 2; returns (value, adjoint)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValidationError(f"shape mismatch {rendered.shape} vs {target.shape}")
    h, w, channels = rendered.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValidationError(f"image {h}x{w} smaller than the {SSIM_WINDOW}-pixel SSIM window")

    total = 0.0
    adjoint = np.zeros_like(rendered)
    n_windows = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1)
    ds_weight = -1.0 / (2.0 * n_windows * channels)  # dL/ds for L = (1 - mean s)/2
    for c in range(channels):
        x = rendered[..., c]
        y = target[..., c]
        mu_x, mu_y, var_x, var_y, cov = ssim_statistics(x, y)
        n1 = 2 * mu_x * mu_y + SSIM_C1
        n2 = 2 * cov + SSIM_C2
        d1 = mu_x**2 + mu_y**2 + SSIM_C1
        d2 = var_x + var_y + SSIM_C2
        s = (n1 * n2) / (d1 * d2)
        total += s.mean()

        ds_dmu = ds_weight * (2 * mu_y * n2 / (d1 * d2) - 2 * mu_x * s / d1)
        ds_dvar = ds_weight * (-s / d2)
        ds_dcov = ds_weight * (2 * n1 / (d1 * d2))
        adjoint[..., c] = (
            _filter_adjoint(ds_dmu)
            + 2 * x * _filter_adjoint(ds_dvar)
            - 2 * _filter_adjoint(ds_dvar * mu_x)
            + y * _filter_adjoint(ds_dcov)
            - _filter_adjoint(ds_dcov * mu_y)
        )
    value = float((1.0 - total / channels) / 2.0)
    return value, adjoint


def scale_invariant_depth_loss(rendered_depth, prior_depth=None, mask=None, prior_log=None,
                               eps: float = DEPTH_EPS):
    """Half the population variance of log-depth residuals over the mask.

    The prior enters either as a raw depth map or as a precomputed centered
    log map (prior_log) -- the trainer uses the latter so that a global
    rescale of the prior files cannot perturb even the last bit of the
    computation. Returns (value, adjoint on rendered_depth, mask used).
    """
    y = np.asarray(rendered_depth, dtype=np.float64)
    if mask is None:
        mask = np.ones(y.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    if prior_log is None:
        if prior_depth is None:
            raise ValidationError("need prior_depth or prior_log")
        prior = np.asarray(prior_depth, dtype=np.float64)
        if prior.shape != y.shape:
            raise ValidationError(f"shape mismatch {y.shape} vs {prior.shape}")
        lstar = np.zeros_like(y)
        lstar[mask] = np.log(np.maximum(prior[mask], eps))
    else:
        lstar = np.asarray(prior_log, dtype=np.float64)
        if lstar.shape != y.shape:
            raise ValidationError(f"shape mismatch {y.shape} vs {lstar.shape}")

    adjoint = np.zeros_like(y)
    n = int(mask.sum())
    if n == 0:
        return 0.0, adjoint, mask  # no supervisable pixels

    ym = np.maximum(y[mask], eps)
    d = np.log(ym) - lstar[mask]
    alpha = -d.mean()
    r = d + alpha
    value = float((r * r).sum() / (2 * n))
    grads = np.where(y[mask] > eps, r / (n * ym), 0.0)
    adjoint[mask] = grads
    return value, adjoint, mask


def total_loss(rendered, view, lam: float, lam_depth: float,
               alpha_min: float = DEFAULT_ALPHA_MIN, eps: float = DEPTH_EPS) -> LossBundle:
    """Weighted combination of the three terms with summed adjoints.

    Depth supervision is restricted to pixels that are valid in the prior,
    have rendered alpha coverage >= alpha_min (un-normalized blended depth is
    biased toward zero at low coverage) and positive rendered depth.
    """
    if rendered.color.shape != view.image.shape:
        raise ValidationError(
            f"render {rendered.color.shape} does not match view image {view.image.shape}"
        )
    l1, l1_adj = l1_loss(rendered.color, view.image)
    dssim, dssim_adj = d_ssim_loss(rendered.color, view.image)
    mask = view.valid_mask & (rendered.alpha >= alpha_min) & (rendered.depth > eps)
    depth, depth_adj, mask = scale_invariant_depth_loss(
        rendered.depth, mask=mask, prior_log=view.prior_log, eps=eps
    )
    total = (1.0 - lam) * l1 + lam * dssim + lam_depth * depth
    # non-finite terms are not raised here: the trainer aborts with a
    # diagnostic dump of the offending iteration instead
    return LossBundle(
        l1=l1,
        d_ssim=dssim,
        depth=depth,
        total=total,
        dL_dcolor=(1.0 - lam) * l1_adj + lam * dssim_adj,
        dL_ddepth=lam_depth * depth_adj,
        depth_mask=mask,
    )
