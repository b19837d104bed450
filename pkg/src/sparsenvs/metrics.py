"""PSNR / SSIM and per-view-set metric reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

REPORT_SCHEMA = "sparsenvs.metric_report/1"


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, mask=None) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; ``inf`` when identical.

    With ``mask`` (H x W) only masked pixels are compared.
    """
    a, b = _pair(a, b)
    err = (a - b) ** 2
    if mask is not None:
        m = np.asarray(mask) > 0
        if not m.any():
            return float("nan")
        err = err[m]
    mse = float(err.mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a, b, window: int = 8, c1: float = 0.01**2, c2: float = 0.03**2) -> float:
    """Mean SSIM over all ``window`` x ``window`` uniform windows (stride 1), per channel.

    Window statistics are population moments (weights 1/window^2).
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[:2]} smaller than the {window}x{window} window")
    wa = sliding_window_view(a, (window, window), axis=(0, 1))
    wb = sliding_window_view(b, (window, window), axis=(0, 1))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = (wa**2).mean(axis=(-1, -2)) - mu_a**2
    var_b = (wb**2).mean(axis=(-1, -2)) - mu_b**2
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.clip(num / den, -1.0, 1.0).mean())


@dataclass
class MetricReport:
    psnr: list[float]
    ssim: list[float]
    view_ids: list = field(default_factory=list)
    lpips: list[float] | None = None  # reserved, never computed here
    config: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.psnr)

    @property
    def mean_psnr(self) -> float:
        # identical views contribute inf; the mean is then inf as well
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_dict(self) -> dict:
        rows = [
            {"view": vid, "psnr": _num(p), "psnr_infinite": math.isinf(p), "ssim": s}
            for vid, p, s in zip(self.view_ids or range(self.count), self.psnr, self.ssim)
        ]
        return {
            "schema": REPORT_SCHEMA,
            "ssim": {"window": "uniform", "size": self.config.get("ssim_window", 8)},
            "config": self.config,
            "count": self.count,
            "rows": rows,
            "mean": {"psnr": _num(self.mean_psnr), "psnr_infinite": math.isinf(self.mean_psnr), "ssim": self.mean_ssim},
            "lpips": self.lpips,
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _num(x: float):
    return None if math.isinf(x) else x


def evaluate(pred_views: Sequence, gt_views: Sequence, window: int = 8, c1: float = 0.01**2, c2: float = 0.03**2, view_ids=None, config=None) -> MetricReport:
    if len(pred_views) != len(gt_views):
        raise ValueError(f"{len(pred_views)} predictions for {len(gt_views)} ground-truth views")
    ps, ss = [], []
    for p, g in zip(pred_views, gt_views):
        p = getattr(p, "image", p)
        g = getattr(g, "image", g)
        ps.append(psnr(p, g))
        ss.append(ssim(p, g, window, c1, c2))
    cfg = {"ssim_window": window, "ssim_c1": c1, "ssim_c2": c2, **(config or {})}
    return MetricReport(ps, ss, list(view_ids) if view_ids is not None else list(range(len(ps))), None, cfg)
