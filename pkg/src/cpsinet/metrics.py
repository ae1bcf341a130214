"""Reconstruction quality metrics and their aggregation.

All metrics take the reconstruction first and the ground truth second and
accept either :class:`~cpsinet.volume.Volume` objects or plain 3D arrays.
They are computed in float64.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .volume import Volume, check_mask

__all__ = [
    "METRICS",
    "psnr",
    "rmse_percent",
    "hfen_percent",
    "log_kernel",
    "ssim",
    "ssim_map",
    "roi_mean",
    "evaluate_pair",
    "MetricsReport",
    "aggregate",
]

METRICS = ("psnr", "ssim", "rmse", "hfen")
_HEADERS = {"psnr": "PSNR (dB)", "ssim": "SSIM", "rmse": "RMSE (%)", "hfen": "HFEN (%)"}

HFEN_SIZE = 15
HFEN_SIGMA = 1.5
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(recon, gt):
    a = np.asarray(recon.data if isinstance(recon, Volume) else recon, dtype=np.float64)
    b = np.asarray(gt.data if isinstance(gt, Volume) else gt, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: recon {a.shape} vs ground truth {b.shape}")
    return a, b


def _dynamic_range(gt: np.ndarray) -> float:
    peak = float(gt.max() - gt.min())
    if peak == 0:
        raise ValueError("ground truth is constant; its dynamic range is zero")
    return peak


def psnr(recon, gt) -> float:
    """PSNR in dB with the ground-truth dynamic range as peak; ``inf`` for a perfect match."""
    a, b = _pair(recon, gt)
    peak = _dynamic_range(b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def rmse_percent(recon, gt) -> float:
    a, b = _pair(recon, gt)
    ref = float(np.linalg.norm(b))
    if ref == 0:
        raise ValueError("ground truth has zero norm")
    return 100.0 * float(np.linalg.norm(a - b)) / ref


def log_kernel(size: int = HFEN_SIZE, sigma: float = HFEN_SIGMA) -> np.ndarray:
    """3D Laplacian-of-Gaussian kernel shifted to sum to exactly zero."""
    r = np.arange(size) - (size - 1) / 2
    z, y, x = np.meshgrid(r, r, r, indexing="ij")
    rr = (z ** 2 + y ** 2 + x ** 2) / (sigma ** 2)
    k = (rr - 3.0) / sigma ** 2 * np.exp(-rr / 2)
    k = k / np.abs(k).sum()
    return k - k.mean()


def _circular_filter(v: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Centered circular convolution via the DFT (the kernel wraps if larger than v)."""
    full = np.zeros(v.shape)
    c = [(s - 1) // 2 for s in kernel.shape]
    idx = np.indices(kernel.shape).reshape(3, -1)
    pos = tuple((idx[i] - c[i]) % v.shape[i] for i in range(3))
    np.add.at(full, pos, kernel.reshape(-1))
    return np.fft.ifftn(np.fft.fftn(v) * np.fft.fftn(full)).real


def hfen_percent(recon, gt) -> float:
    a, b = _pair(recon, gt)
    if min(b.shape) < HFEN_SIZE:
        raise ValueError(f"HFEN needs every axis >= {HFEN_SIZE}, got {b.shape}")
    k = log_kernel()
    lb = _circular_filter(b, k)
    ref = float(np.linalg.norm(lb))
    if ref == 0:
        raise ValueError("LoG-filtered ground truth has zero norm")
    return 100.0 * float(np.linalg.norm(_circular_filter(a, k) - lb)) / ref


def _box_mean(v: np.ndarray, w: int) -> np.ndarray:
    """Mean over every fully contained w^3 window."""
    c = np.pad(v, ((1, 0), (1, 0), (1, 0))).cumsum(0).cumsum(1).cumsum(2)
    s = (c[w:, w:, w:] - c[:-w, w:, w:] - c[w:, :-w, w:] - c[w:, w:, :-w]
         + c[:-w, :-w, w:] + c[:-w, w:, :-w] + c[w:, :-w, :-w] - c[:-w, :-w, :-w])
    return s / w ** 3


def ssim(recon, gt, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all fully contained uniform ``window``^3 windows."""
    return float(np.mean(ssim_map(recon, gt, window)))


def ssim_map(recon, gt, window: int = SSIM_WINDOW) -> np.ndarray:
    """SSIM of every fully contained uniform ``window``^3 window.

    Local statistics are population (1/n) moments; ``L`` is the ground-truth
    dynamic range.
    """
    a, b = _pair(recon, gt)
    if min(b.shape) < window:
        raise ValueError(f"SSIM needs every axis >= {window}, got {b.shape}")
    L = _dynamic_range(b)
    c1, c2 = (SSIM_K1 * L) ** 2, (SSIM_K2 * L) ** 2
    # moments are taken about the gt mean for conditioning; the means are restored after
    shift = b.mean()
    a, b = a - shift, b - shift
    mu_a, mu_b = _box_mean(a, window), _box_mean(b, window)
    var_a = _box_mean(a * a, window) - mu_a * mu_a
    var_b = _box_mean(b * b, window) - mu_b * mu_b
    cov = _box_mean(a * b, window) - mu_a * mu_b
    mu_a, mu_b = mu_a + shift, mu_b + shift
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def roi_mean(v, mask) -> float:
    data = np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)
    m = check_mask(mask) if isinstance(mask, Volume) else np.asarray(mask).astype(bool)
    if m.shape != data.shape:
        raise ValueError(f"mask shape {m.shape} != volume shape {data.shape}")
    if not m.any():
        raise ValueError("ROI mask is empty")
    return float(data[m].mean())


def evaluate_pair(recon, gt) -> Dict[str, float]:
    return {"psnr": psnr(recon, gt), "ssim": ssim(recon, gt),
            "rmse": rmse_percent(recon, gt), "hfen": hfen_percent(recon, gt)}


@dataclass
class MetricsReport:
    """Per-sample rows, their mean (and sample SD when n >= 2), optional ROI means."""

    rows: List[dict]
    mean: Dict[str, float]
    sd: Optional[Dict[str, float]]
    roi_rows: List[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample"] + [_HEADERS[m] for m in METRICS])
        for row in self.rows:
            w.writerow([row["sample"]] + [repr(float(row[m])) for m in METRICS])
        w.writerow(["mean"] + [repr(self.mean[m]) for m in METRICS])
        if self.sd is not None:
            w.writerow(["sd"] + [repr(self.sd[m]) for m in METRICS])
        if self.roi_rows:
            w.writerow([])
            w.writerow(["roi", "sample", "mean chi (ppm)"])
            for r in self.roi_rows:
                w.writerow([r["roi"], r["sample"], repr(float(r["mean"]))])
        return buf.getvalue()

    def to_table(self) -> str:
        """Aligned text table in the column order PSNR, SSIM, RMSE, HFEN."""
        fmt = {"psnr": "{:.2f}", "ssim": "{:.4f}", "rmse": "{:.2f}", "hfen": "{:.2f}"}

        def cell(m, v, sd=None):
            s = "inf" if math.isinf(v) else fmt[m].format(v)
            if sd is not None:
                s += " ± " + ("nan" if math.isnan(sd) else fmt[m].format(sd))
            return s

        header = ["Sample"] + [_HEADERS[m] for m in METRICS]
        body = [[str(r["sample"])] + [cell(m, float(r[m])) for m in METRICS] for r in self.rows]
        body.append(["mean ± SD" if self.sd else "mean"] +
                    [cell(m, self.mean[m], self.sd[m] if self.sd else None) for m in METRICS])
        widths = [max(len(x[i]) for x in [header] + body) for i in range(len(header))]
        lines = ["  ".join(c.ljust(wd) for c, wd in zip(line, widths)).rstrip()
                 for line in [header] + body]
        if self.roi_rows:
            lines.append("")
            lines.append("ROI mean susceptibility (ppm)")
            for r in self.roi_rows:
                lines.append(f"  {r['roi']:<12} {r['sample']:<12} {r['mean']:.4f}")
        return "\n".join(lines) + "\n"


def aggregate(rows: Sequence[dict], roi_rows: Sequence[dict] = ()) -> MetricsReport:
    if not rows:
        raise ValueError("need at least one row")
    mean, sd = {}, {} if len(rows) >= 2 else None
    for m in METRICS:
        vals = np.array([float(r[m]) for r in rows])
        mean[m] = float(np.mean(vals))
        if sd is not None:
            sd[m] = float(np.std(vals, ddof=1)) if np.all(np.isfinite(vals)) else math.nan
    return MetricsReport(list(rows), mean, sd, list(roi_rows))
