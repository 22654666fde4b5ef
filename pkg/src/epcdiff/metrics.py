"""Image quality metrics on normalised volumes, HU line profiles and CSV reports."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import convolve2d

from .phantom import hu_denormalize
from .tomo import Volume

DATA_RANGE = 2.0  # the normalised window [-1, 1]
PSNR_CAP = 300.0  # reported for identical inputs
DB_FLOOR = -300.0  # reported for MAE / MSE of exactly zero
METRIC_FIELDS = ("psnr", "ssim", "mae", "mae_db", "mse", "mse_db")


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    mae: float
    mae_db: float
    mse: float
    mse_db: float
    per_slice: list[dict] = field(default_factory=list)

    def row(self) -> list[float]:
        return [getattr(self, k) for k in METRIC_FIELDS]


def psnr(mse: float, data_range: float = DATA_RANGE) -> float:
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range ** 2 / mse))


def _db(value: float, factor: float) -> float:
    return DB_FLOOR if value <= 0.0 else max(DB_FLOOR, factor * math.log10(value))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim_2d(a: np.ndarray, b: np.ndarray, data_range: float = DATA_RANGE,
            k1: float = 0.01, k2: float = 0.03, win: np.ndarray | None = None) -> float:
    """Mean SSIM over all valid positions of an 11x11 Gaussian window."""
    win = gaussian_window() if win is None else win
    if a.shape[0] < win.shape[0] or a.shape[1] < win.shape[1]:
        raise ValueError(f"slice {a.shape} smaller than the SSIM window {win.shape}")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def f(img):
        return convolve2d(img, win, mode="valid")

    mu_a, mu_b = f(a), f(b)
    var_a = f(a * a) - mu_a ** 2
    var_b = f(b * b) - mu_b ** 2
    cov = f(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _values(v) -> np.ndarray:
    if isinstance(v, Volume):
        if v.unit != "normalized":
            raise ValueError(f"metrics expect normalized volumes, got {v.unit!r}")
        return v.values
    return np.asarray(v, dtype=np.float64)


def compute_metrics(x_hat, x0) -> MetricReport:
    """PSNR / SSIM / MAE / MSE of ``x_hat`` against ``x0`` (range 2.0).

    SSIM is computed per axial slice and averaged. Identical inputs report
    PSNR = 300 dB; zero MAE or MSE report -300 dB on the log scale.
    """
    a, b = _values(x_hat), _values(x0)
    if a.shape != b.shape:
        raise ValueError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    diff = a - b
    mse = float(np.mean(diff ** 2))
    mae = float(np.mean(np.abs(diff)))
    if mse == 0.0:
        per = [{"slice": k, "psnr": PSNR_CAP, "ssim": 1.0} for k in range(a.shape[0])]
    else:
        per = [{"slice": k, "psnr": psnr(float(np.mean(diff[k] ** 2))),
                "ssim": ssim_2d(a[k], b[k])} for k in range(a.shape[0])]
    ssim = float(np.mean([p["ssim"] for p in per]))
    return MetricReport(psnr(mse), ssim, mae, _db(mae, 20.0), mse, _db(mse, 10.0), per)


def line_profile(v, slice_index: int | None = None, row_index: int | None = None) -> np.ndarray:
    """(column, HU) pairs along one row; defaults to the middle slice and middle row."""
    if isinstance(v, Volume):
        hu = v.values if v.unit == "HU" else hu_denormalize(_values(v))
    else:
        hu = hu_denormalize(np.asarray(v, dtype=np.float64))
    S, N, M = hu.shape
    k = S // 2 if slice_index is None else slice_index
    r = N // 2 if row_index is None else row_index
    if not (0 <= k < S and 0 <= r < N):
        raise IndexError(f"profile indices (slice {k}, row {r}) outside volume {hu.shape}")
    return np.column_stack([np.arange(M, dtype=np.float64), hu[k, r]])


def aggregate(reports: Sequence[MetricReport]) -> tuple[list[float], list[float]]:
    """Per-field mean and sample standard deviation (ddof = 1; 0 for a single pair)."""
    m = np.array([r.row() for r in reports], dtype=np.float64)
    mean = m.mean(axis=0)
    std = m.std(axis=0, ddof=1) if len(reports) > 1 else np.zeros(m.shape[1])
    return mean.tolist(), std.tolist()


def write_metrics_csv(path, ids: Sequence[str], reports: Sequence[MetricReport]) -> Path:
    """One row per pair, then ``mean`` and ``std`` aggregate rows."""
    if len(ids) != len(reports):
        raise ValueError("ids and reports differ in length")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id",) + METRIC_FIELDS)
        for pid, r in zip(ids, reports):
            w.writerow([pid] + [repr(float(v)) for v in r.row()])
        if reports:
            mean, std = aggregate(reports)
            w.writerow(["mean"] + [repr(float(v)) for v in mean])
            w.writerow(["std"] + [repr(float(v)) for v in std])
    return path
