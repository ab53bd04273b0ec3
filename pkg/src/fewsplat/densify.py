"""Adaptive density control with the few-shot retention policy.

Gaussians whose mean accumulated view-space positional gradient exceeds the
threshold are densified: small ones are cloned in place, large ones are
split into children sampled from the parent distribution. Under the
few-shot policy nothing is ever pruned by opacity and opacity is never
reset; the only removal is a safety cull of non-finite parameters, since a
single NaN splat poisons every subsequent render.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .scene import GaussianCloud, quaternion_to_rotation, normalize_quaternions

log = logging.getLogger(__name__)


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4
    percent_dense: float = 0.01  # fraction of scene_extent separating clone from split
    interval: int = 100
    start_iter: int = 500
    stop_iter: int = 5000
    split_factor: float = 1.6
    split_count: int = 2

    def __post_init__(self):
        if min(self.grad_threshold, self.percent_dense, self.split_factor) <= 0:
            raise ValidationError("densify thresholds must be positive")
        if self.interval <= 0 or self.split_count <= 0:
            raise ValidationError("densify interval and split_count must be positive")
        if not 0 <= self.start_iter < self.stop_iter:
            raise ValidationError("need 0 <= start_iter < stop_iter")

    def active_at(self, iteration: int) -> bool:
        return (
            self.start_iter <= iteration < self.stop_iter
            and iteration % self.interval == 0
        )


@dataclass
class DensifyResult:
    cloud: GaussianCloud
    source_rows: np.ndarray  # (new_count,) originating row in the old cloud
    fresh: np.ndarray  # (new_count,) rows needing zeroed optimizer moments
    n_cloned: int = 0
    n_split: int = 0


def accumulate_stats(cloud: GaussianCloud, view_norms, visible):
    """Add the latest view-space positional gradient norms into the stats.

    Only Gaussians visible in the rendered view (not culled) accumulate.
    """
    view_norms = np.asarray(view_norms, dtype=np.float64)
    visible = np.asarray(visible, dtype=bool)
    if view_norms.shape != (cloud.count,) or visible.shape != (cloud.count,):
        raise ValidationError("stat arrays must be cloud-sized")
    cloud.grad_accum[visible] += view_norms[visible]
    cloud.grad_count[visible] += 1


def mean_stats(cloud: GaussianCloud) -> np.ndarray:
    counts = np.maximum(cloud.grad_count, 1)
    return cloud.grad_accum / counts


def densify(cloud: GaussianCloud, config: DensifyConfig, rng: np.random.Generator) -> DensifyResult:
    """Clone/split high-gradient Gaussians; resets the stats afterward."""
    n = cloud.count
    mean = mean_stats(cloud)
    candidates = (mean >= config.grad_threshold) & (cloud.grad_count > 0)
    max_scale = np.exp(np.asarray(cloud.log_scales, dtype=np.float64)).max(axis=1)
    size_limit = config.percent_dense * cloud.scene_extent
    clone_mask = candidates & (max_scale < size_limit)
    split_mask = candidates & ~clone_mask

    keep = ~split_mask  # split parents are replaced by their children
    keep_idx = np.flatnonzero(keep)
    clone_idx = np.flatnonzero(clone_mask)
    split_idx = np.flatnonzero(split_mask)

    parts = {name: [getattr(cloud, name)[keep_idx]] for name in
             ("positions", "log_scales", "rotations", "opacity_logits", "sh")}
    source_rows = [keep_idx]
    fresh = [np.zeros(len(keep_idx), dtype=bool)]

    if len(clone_idx):
        for name in parts:
            parts[name].append(getattr(cloud, name)[clone_idx])
        source_rows.append(clone_idx)
        fresh.append(np.ones(len(clone_idx), dtype=bool))

    if len(split_idx):
        m = len(split_idx)
        reps = np.repeat(split_idx, config.split_count)
        qn, _ = normalize_quaternions(cloud.rotations[split_idx], floor=True)
        R = quaternion_to_rotation(qn)
        scales = np.exp(np.asarray(cloud.log_scales[split_idx], dtype=np.float64))
        # children sampled from the parent Gaussian: mu + R @ (s * eps)
        eps = rng.standard_normal((m, config.split_count, 3))
        local = scales[:, None, :] * eps
        offsets = np.einsum("pij,pcj->pci", R, local)
        child_pos = (
            np.asarray(cloud.positions[split_idx], dtype=np.float64)[:, None, :] + offsets
        ).reshape(m * config.split_count, 3)
        child_ls = (
            np.asarray(cloud.log_scales[reps], dtype=np.float64) - np.log(config.split_factor)
        )
        dt = cloud.dtype
        parts["positions"].append(child_pos.astype(dt))
        parts["log_scales"].append(child_ls.astype(dt))
        parts["rotations"].append(cloud.rotations[reps])
        parts["opacity_logits"].append(cloud.opacity_logits[reps])
        parts["sh"].append(cloud.sh[reps])
        source_rows.append(reps)
        fresh.append(np.ones(m * config.split_count, dtype=bool))

    new_cloud = GaussianCloud(
        positions=np.concatenate(parts["positions"], axis=0),
        log_scales=np.concatenate(parts["log_scales"], axis=0),
        rotations=np.concatenate(parts["rotations"], axis=0),
        opacity_logits=np.concatenate(parts["opacity_logits"], axis=0),
        sh=np.concatenate(parts["sh"], axis=0),
        scene_extent=cloud.scene_extent,
    )
    return DensifyResult(
        cloud=new_cloud,
        source_rows=np.concatenate(source_rows),
        fresh=np.concatenate(fresh),
        n_cloned=len(clone_idx),
        n_split=len(split_idx),
    )


def _finite_mask(cloud: GaussianCloud) -> np.ndarray:
    return (
        np.isfinite(cloud.positions).all(axis=1)
        & np.isfinite(cloud.log_scales).all(axis=1)
        & np.isfinite(cloud.rotations).all(axis=1)
        & np.isfinite(cloud.opacity_logits)
        & np.isfinite(cloud.sh).all(axis=(1, 2))
    )


def retention_policy(cloud: GaussianCloud):
    """Few-shot retention: keep every splat regardless of opacity.

    The only permitted removal is the non-finite safety cull. Returns
    (cloud, kept_mask); the cloud is unchanged (same object) when nothing
    was culled, which makes the policy idempotent.
    """
    finite = _finite_mask(cloud)
    if finite.all():
        return cloud, finite
    log.warning("safety cull: removing %d non-finite Gaussians", int((~finite).sum()))
    return _select(cloud, finite), finite


def prune_by_opacity(cloud: GaussianCloud, min_opacity: float = 0.005):
    """Baseline pruning used by the retention ablation (--prune)."""
    from .scene import sigmoid

    keep = _finite_mask(cloud) & (sigmoid(cloud.opacity_logits) >= min_opacity)
    if keep.all():
        return cloud, keep
    return _select(cloud, keep), keep


def _select(cloud: GaussianCloud, mask) -> GaussianCloud:
    return GaussianCloud(
        positions=cloud.positions[mask],
        log_scales=cloud.log_scales[mask],
        rotations=cloud.rotations[mask],
        opacity_logits=cloud.opacity_logits[mask],
        sh=cloud.sh[mask],
        scene_extent=cloud.scene_extent,
        grad_accum=cloud.grad_accum[mask],
        grad_count=cloud.grad_count[mask],
    )
