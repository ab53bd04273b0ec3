"""Optimization loop: render, loss, backward, Adam, density control.

One view is rendered per iteration, drawn from a seeded shuffled cycle over
the training views so all five get equal exposure. The position learning
rate is scaled by the scene extent and decays log-linearly to its final
value over the run. Runs are bit-reproducible for a fixed (config, dataset,
seed), and a checkpoint restores the exact mid-run state (parameters,
optimizer moments, RNG) so resumed runs match straight-through runs.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DatasetSplit
from .densify import DensifyConfig, accumulate_stats, densify, prune_by_opacity, retention_policy
from .errors import NonFiniteLossError, ValidationError
from .losses import total_loss
from .metrics import EvalReport, evaluate
from .rasterizer import render, render_backward
from .scene import GaussianCloud, save_ply

log = logging.getLogger(__name__)

METRICS_COLUMNS = [
    "iter", "l1", "d_ssim", "depth", "total",
    "test_psnr", "test_ssim", "gaussian_count", "wall_ms",
]

PARAM_GROUPS = ("positions", "log_scales", "rotations", "opacity_logits", "sh_dc", "sh_rest")


@dataclass
class TrainConfig:
    iterations: int = 10000
    lam: float = 0.2
    lam_depth: float = 0.005
    sh_degree: int = 1
    lr_position_init: float = 1.6e-4  # multiplied by scene_extent
    lr_position_final: float = 1.6e-6
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 2.5e-3 / 20.0
    lr_opacity: float = 5e-2
    lr_log_scale: float = 5e-3
    lr_rotation: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    resolution_divisor: int = 1
    checkpoint_interval: int = 1000
    eval_interval: int = 1000
    alpha_min: float = 0.5
    depth_eps: float = 1e-6
    retain_all: bool = True  # False switches to the opacity-pruning baseline
    prune_min_opacity: float = 0.005
    densify: DensifyConfig = field(default_factory=DensifyConfig)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError(f"lam must be in [0,1], got {self.lam}")
        if self.lam_depth < 0:
            raise ValidationError("lam_depth must be >= 0")
        if self.sh_degree != 1:
            raise ValidationError("only degree-1 spherical harmonics are supported")

    def position_lr(self, iteration: int, scene_extent: float) -> float:
        """Log-linear interpolation from init to final by iteration fraction."""
        if self.iterations == 0:
            return self.lr_position_init * scene_extent
        f = min(max(iteration / self.iterations, 0.0), 1.0)
        lr = np.exp((1 - f) * np.log(self.lr_position_init) + f * np.log(self.lr_position_final))
        return float(lr) * scene_extent


class AdamOptimizer:
    """Adam with bias correction over the named parameter groups.

    sh_dc and sh_rest address slices of the cloud's sh array so the DC and
    linear coefficients get their own learning rates. Moment arrays stay
    index-aligned with the cloud across densification.
    """

    def __init__(self, cloud: GaussianCloud, config: TrainConfig):
        self.config = config
        self.step_count = 0
        self.m = {name: np.zeros_like(self._view(cloud, name), dtype=np.float64)
                  for name in PARAM_GROUPS}
        self.v = {name: np.zeros_like(self._view(cloud, name), dtype=np.float64)
                  for name in PARAM_GROUPS}

    @staticmethod
    def _view(cloud: GaussianCloud, name: str):
        if name == "sh_dc":
            return cloud.sh[:, :, 0]
        if name == "sh_rest":
            return cloud.sh[:, :, 1:]
        return getattr(cloud, name)

    @staticmethod
    def _grad_view(grads: dict, name: str):
        if name == "sh_dc":
            return grads["sh"][:, :, 0]
        if name == "sh_rest":
            return grads["sh"][:, :, 1:]
        return grads[name]

    def group_lrs(self, iteration: int, scene_extent: float) -> dict:
        c = self.config
        return {
            "positions": c.position_lr(iteration, scene_extent),
            "log_scales": c.lr_log_scale,
            "rotations": c.lr_rotation,
            "opacity_logits": c.lr_opacity,
            "sh_dc": c.lr_sh_dc,
            "sh_rest": c.lr_sh_rest,
        }

    def step(self, cloud: GaussianCloud, grads: dict, iteration: int):
        self.step_count += 1
        lrs = self.group_lrs(iteration, cloud.scene_extent)
        c = self.config
        for name in PARAM_GROUPS:
            p = self._view(cloud, name)
            g = np.asarray(self._grad_view(grads, name), dtype=np.float64)
            m = self.m[name]
            v = self.v[name]
            m *= c.adam_beta1
            m += (1 - c.adam_beta1) * g
            v *= c.adam_beta2
            v += (1 - c.adam_beta2) * g * g
            m_hat = m / (1 - c.adam_beta1**self.step_count)
            v_hat = v / (1 - c.adam_beta2**self.step_count)
            update = lrs[name] * m_hat / (np.sqrt(v_hat) + c.adam_eps)
            p[...] = (p.astype(np.float64) - update).astype(p.dtype)

    def realign(self, source_rows, fresh):
        """Re-index moments after densification; new rows start at zero."""
        for name in PARAM_GROUPS:
            self.m[name] = self.m[name][source_rows]
            self.v[name] = self.v[name][source_rows]
            self.m[name][fresh] = 0.0
            self.v[name][fresh] = 0.0

    def select(self, keep_mask):
        """Drop moment rows for pruned/culled Gaussians."""
        for name in PARAM_GROUPS:
            self.m[name] = self.m[name][keep_mask]
            self.v[name] = self.v[name][keep_mask]

    def check_alignment(self, cloud: GaussianCloud):
        for name in PARAM_GROUPS:
            if len(self.m[name]) != cloud.count:
                raise ValidationError(f"optimizer state for {name} out of sync with cloud")


def adam_reference_step(param, grad, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-15):
    """One standalone Adam update (used for small experiments and tests)."""
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**step)
    v_hat = v / (1 - beta2**step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


@dataclass
class TrainResult:
    cloud: GaussianCloud
    history: list
    final_report: EvalReport | None = None


class Trainer:
    def __init__(self, split: DatasetSplit, cloud: GaussianCloud, config: TrainConfig,
                 out_dir=None):
        if cloud.count == 0:
            raise ValidationError("cannot train an empty cloud")
        self.split = split
        self.cloud = cloud
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.optimizer = AdamOptimizer(cloud, config)
        self.rng = np.random.default_rng(config.seed)
        self.iteration = 0  # completed steps
        self.view_order = np.arange(len(split.train_views))
        self.history: list[dict] = []
        self._csv_fh = None
        self._csv = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "checkpoints").mkdir(exist_ok=True)

    # --- view sampling -----------------------------------------------------

    def _next_view(self):
        n = len(self.split.train_views)
        slot = self.iteration % n
        if slot == 0:
            self.view_order = self.rng.permutation(n)
        return self.split.train_views[int(self.view_order[slot])]

    # --- logging -----------------------------------------------------------

    def _open_csv(self, resume: bool):
        if self.out_dir is None:
            return
        path = self.out_dir / "metrics.csv"
        mode = "a" if resume and path.exists() else "w"
        self._csv_fh = open(path, mode, newline="")
        self._csv = csv.writer(self._csv_fh)
        if mode == "w":
            self._csv.writerow(METRICS_COLUMNS)

    def _log_row(self, row: dict):
        self.history.append(row)
        if self._csv is not None:
            formatted = []
            for c in METRICS_COLUMNS:
                v = row.get(c)
                if v is None:
                    formatted.append("")
                elif isinstance(v, float):
                    formatted.append(repr(v))
                else:
                    formatted.append(v)
            self._csv.writerow(formatted)
            self._csv_fh.flush()

    # --- core step ---------------------------------------------------------

    def train_step(self, view):
        """One render/loss/backward/update cycle on a single view."""
        cfg = self.config
        out = render(self.cloud, view.camera, cfg.background)
        bundle = total_loss(out, view, cfg.lam, cfg.lam_depth, cfg.alpha_min, cfg.depth_eps)
        if not np.isfinite(bundle.total):
            self._dump_abort(view, bundle)
            raise NonFiniteLossError(
                f"non-finite loss at iteration {self.iteration}", iteration=self.iteration
            )
        grads, view_norms = render_backward(out, bundle.dL_dcolor, bundle.dL_ddepth, None)
        self.optimizer.step(self.cloud, grads, self.iteration)
        visible = np.zeros(self.cloud.count, dtype=bool)
        visible[out.splats.source_index] = True
        accumulate_stats(self.cloud, view_norms, visible)
        return bundle

    def _dump_abort(self, view, bundle):
        if self.out_dir is None:
            return
        info = {
            "iteration": self.iteration,
            "view": view.name,
            "l1": float(bundle.l1),
            "d_ssim": float(bundle.d_ssim),
            "depth": float(bundle.depth),
            "total": float(bundle.total),
            "gaussian_count": self.cloud.count,
        }
        (self.out_dir / f"abort_iter{self.iteration:06d}.json").write_text(
            json.dumps(info, indent=2)
        )

    def _maybe_densify(self, step_1based: int):
        cfg = self.config
        if not cfg.densify.active_at(step_1based):
            return
        if cfg.retain_all:
            result = densify(self.cloud, cfg.densify, self.rng)
            self.cloud = result.cloud
            self.optimizer.realign(result.source_rows, result.fresh)
            culled, mask = retention_policy(self.cloud)
            if culled is not self.cloud:
                self.cloud = culled
                self.optimizer.select(mask)
        else:
            result = densify(self.cloud, cfg.densify, self.rng)
            self.cloud = result.cloud
            self.optimizer.realign(result.source_rows, result.fresh)
            pruned, mask = prune_by_opacity(self.cloud, cfg.prune_min_opacity)
            if pruned is not self.cloud:
                self.cloud = pruned
                self.optimizer.select(mask)
        self.optimizer.check_alignment(self.cloud)

    # --- run loop ----------------------------------------------------------

    def run(self, resume: bool = False) -> TrainResult:
        cfg = self.config
        self._open_csv(resume)
        report = None
        try:
            while self.iteration < cfg.iterations:
                t0 = time.perf_counter()
                view = self._next_view()
                bundle = self.train_step(view)
                step = self.iteration + 1
                self._maybe_densify(step)

                row = {
                    "iter": step,
                    "l1": float(bundle.l1),
                    "d_ssim": float(bundle.d_ssim),
                    "depth": float(bundle.depth),
                    "total": float(bundle.total),
                    "gaussian_count": self.cloud.count,
                }
                if cfg.eval_interval and self.split.test_views and (
                    step % cfg.eval_interval == 0 or step == cfg.iterations
                ):
                    report = evaluate(self.cloud, self.split.test_views, cfg.background)
                    row["test_psnr"] = report.mean_psnr
                    row["test_ssim"] = report.mean_ssim
                row["wall_ms"] = f"{(time.perf_counter() - t0) * 1e3:.3f}"
                self.iteration = step
                self._log_row(row)

                if self.out_dir is not None and cfg.checkpoint_interval and (
                    step % cfg.checkpoint_interval == 0 or step == cfg.iterations
                ):
                    self.save_checkpoint()
        finally:
            if self._csv_fh is not None:
                self._csv_fh.close()
                self._csv_fh = None
                self._csv = None
        if report is None and self.split.test_views:
            report = evaluate(self.cloud, self.split.test_views, cfg.background)
        return TrainResult(cloud=self.cloud, history=self.history, final_report=report)

    # --- checkpointing -----------------------------------------------------

    def checkpoint_paths(self, iteration=None):
        it = self.iteration if iteration is None else iteration
        base = self.out_dir / "checkpoints" / f"iter_{it:06d}"
        return base.with_suffix(".ply"), base.with_suffix(".state.npz")

    def save_checkpoint(self):
        ply_path, state_path = self.checkpoint_paths()
        save_ply(self.cloud, ply_path)
        payload = {
            "iteration": np.int64(self.iteration),
            "step_count": np.int64(self.optimizer.step_count),
            "scene_extent": np.float64(self.cloud.scene_extent),
            "view_order": self.view_order,
            "grad_accum": self.cloud.grad_accum,
            "grad_count": self.cloud.grad_count,
            "rng_state": np.frombuffer(
                json.dumps(self.rng.bit_generator.state).encode(), dtype=np.uint8
            ),
        }
        for name in ("positions", "log_scales", "rotations", "opacity_logits", "sh"):
            payload[f"param_{name}"] = getattr(self.cloud, name)
        for name in PARAM_GROUPS:
            payload[f"adam_m_{name}"] = self.optimizer.m[name]
            payload[f"adam_v_{name}"] = self.optimizer.v[name]
        np.savez(state_path, **payload)
        log.info("checkpoint written: %s", ply_path)

    def load_checkpoint(self, state_path):
        data = np.load(state_path)
        self.cloud = GaussianCloud(
            positions=data["param_positions"],
            log_scales=data["param_log_scales"],
            rotations=data["param_rotations"],
            opacity_logits=data["param_opacity_logits"],
            sh=data["param_sh"],
            scene_extent=float(data["scene_extent"]),
            grad_accum=data["grad_accum"].copy(),
            grad_count=data["grad_count"].copy(),
        )
        self.iteration = int(data["iteration"])
        self.optimizer = AdamOptimizer(self.cloud, self.config)
        self.optimizer.step_count = int(data["step_count"])
        for name in PARAM_GROUPS:
            self.optimizer.m[name] = data[f"adam_m_{name}"].copy()
            self.optimizer.v[name] = data[f"adam_v_{name}"].copy()
        self.view_order = data["view_order"].copy()
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = json.loads(bytes(data["rng_state"]).decode())
        self.optimizer.check_alignment(self.cloud)


def train(split: DatasetSplit, cloud: GaussianCloud, config: TrainConfig,
          out_dir=None, resume_state=None) -> TrainResult:
    """Train the cloud on the split; see Trainer for the mechanics."""
    trainer = Trainer(split, cloud, config, out_dir=out_dir)
    if resume_state is not None:
        trainer.load_checkpoint(resume_state)
    return trainer.run(resume=resume_state is not None)
