"""Image-quality metrics and test-set evaluation reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .losses import ssim_value
from .rasterizer import render
from .scene import GaussianCloud

PSNR_CAP_DB = 100.0


def psnr(rendered, target) -> float:
    """10 log10(1 / MSE) over all pixel-channels, capped at 100 dB."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValidationError(f"shape mismatch {rendered.shape} vs {target.shape}")
    mse = float(np.mean((rendered - target) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def ssim(rendered, target) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5, dynamic range 1)."""
    return ssim_value(rendered, target)


@dataclass
class ViewMetrics:
    name: str
    psnr: float
    ssim: float
    extrapolated: bool
    lpips: float | None = None  # merged from an external file when available


@dataclass
class EvalReport:
    rows: list[ViewMetrics] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows]))

    def _extra(self):
        return [r for r in self.rows if r.extrapolated]

    @property
    def extrapolated_psnr(self) -> float | None:
        extra = self._extra()
        return float(np.mean([r.psnr for r in extra])) if extra else None

    @property
    def extrapolated_ssim(self) -> float | None:
        extra = self._extra()
        return float(np.mean([r.ssim for r in extra])) if extra else None


def evaluate(cloud: GaussianCloud, test_views, background=(0.0, 0.0, 0.0)) -> EvalReport:
    """Render every test view (training background) and score PSNR/SSIM.

    Rendered colors are clamped to [0,1] (display convention) before scoring.
    """
    report = EvalReport()
    for view in test_views:
        out = render(cloud, view.camera, background)
        img = np.clip(out.color, 0.0, 1.0)
        report.rows.append(
            ViewMetrics(
                name=view.name,
                psnr=psnr(img, view.image),
                ssim=ssim(img, view.image),
                extrapolated=bool(getattr(view, "extrapolated", False)),
            )
        )
    return report


def merge_lpips(report: EvalReport, path):
    """Attach externally computed LPIPS values (CSV with name,lpips columns)."""
    table = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            table[row["name"]] = float(row["lpips"])
    for row in report.rows:
        if row.name in table:
            row.lpips = table[row.name]
    return report


def report_to_csv(report: EvalReport, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "psnr", "ssim", "extrapolated", "lpips"])
        for r in report.rows:
            writer.writerow(
                [r.name, repr(r.psnr), repr(r.ssim), int(r.extrapolated),
                 "" if r.lpips is None else repr(r.lpips)]
            )
        writer.writerow(["mean", repr(report.mean_psnr), repr(report.mean_ssim), "", ""])
        if report.extrapolated_psnr is not None:
            writer.writerow(
                ["mean_extrapolated", repr(report.extrapolated_psnr),
                 repr(report.extrapolated_ssim), "", ""]
            )


def report_table(report: EvalReport) -> str:
    """Human-readable per-view table with overall and extrapolated averages."""
    lines = [f"{'view':<24}{'PSNR':>8}{'SSIM':>8}{'LPIPS':>8}  extrapolated"]
    for r in report.rows:
        lp = f"{r.lpips:.3f}" if r.lpips is not None else "-"
        lines.append(
            f"{r.name:<24}{r.psnr:>8.2f}{r.ssim:>8.3f}{lp:>8}  {'yes' if r.extrapolated else 'no'}"
        )
    lines.append(f"{'average':<24}{report.mean_psnr:>8.2f}{report.mean_ssim:>8.3f}")
    if report.extrapolated_psnr is not None:
        lines.append(
            f"{'average (extrapolated)':<24}{report.extrapolated_psnr:>8.2f}"
            f"{report.extrapolated_ssim:>8.3f}"
        )
    return "\n".join(lines)
