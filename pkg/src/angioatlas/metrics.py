"""SSIM scoring, phantom target registration error and cohort statistics."""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imgcore import BinaryMask, GrayImage, atomic_write_bytes, atomic_write_text, raster
from .register.transforms import TransformPair

log = logging.getLogger(__name__)

HIST_BIN_WIDTH = 0.01
RESULTS_COLUMNS = ("case_id", "site", "view", "ssim_affine", "ssim_final", "tre_mean_px", "runtime_s")
SSIM_OPERANDS = "fixed mask {0,1} vs warped moving silhouette binarized at 0.5"


@dataclass(frozen=True)
class SSIMResult:
    mean_ssim: float
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    ssim_map: np.ndarray | None = field(default=None, repr=False, compare=False)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(r**2) / (2.0 * sigma**2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    pad = (len(win) - 1) // 2
    out = ndimage.correlate1d(img, win, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, win, axis=1, mode="reflect")
    return out[pad : img.shape[0] - pad, pad : img.shape[1] - pad]


def ssim(a: GrayImage | np.ndarray, b: GrayImage | np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, dynamic_range: float = 1.0) -> SSIMResult:
    """Mean structural similarity over the valid (unpadded) window positions."""
    x = np.asarray(raster(a), dtype=np.float64)
    y = np.asarray(raster(b), dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise ValueError(f"images smaller than the {window}x{window} window")
    win = gaussian_window(window, sigma)
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    mx = _filter_valid(x, win)
    my = _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    smap = np.clip(smap, -1.0, 1.0)
    return SSIMResult(float(smap.mean()), window, sigma, k1, k2, dynamic_range, smap)


def overlay_ssim(fixed_mask: BinaryMask, warped_silhouette: GrayImage | np.ndarray) -> float:
    """SSIM between the DSA mask and the warped atlas silhouette, both binary."""
    w = np.asarray(raster(warped_silhouette))
    return ssim(fixed_mask.data.astype(np.float64), (w > 0.5).astype(np.float64)).mean_ssim


def mask_sample_points(mask: BinaryMask | np.ndarray, step: int = 4) -> np.ndarray:
    """Pixel coordinates (col, row) on a uniform grid that fall inside the mask."""
    m = np.asarray(raster(mask))
    rows, cols = np.meshgrid(np.arange(0, m.shape[0], step), np.arange(0, m.shape[1], step), indexing="ij")
    keep = m[rows, cols]
    return np.stack([cols[keep], rows[keep]], axis=1).astype(np.float64)


def tre(truth: TransformPair | None, recovered: TransformPair, sample_points_px: np.ndarray,
        spacing: tuple[float, float]) -> tuple[float, float]:
    """Mean and max distance (px) between true and recovered point mappings."""
    if truth is None:
        raise ValueError("missing ground truth")
    pts = np.asarray(sample_points_px, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("no sample points")
    sp = np.asarray(spacing, dtype=np.float64)
    phys = pts * sp
    err = (truth.map(phys) - recovered.map(phys)) / sp
    dist = np.hypot(err[:, 0], err[:, 1])
    return float(dist.mean()), float(dist.max())


@dataclass(frozen=True)
class CohortStats:
    n: int
    mean: float
    std: float
    median: float
    counts: np.ndarray = field(repr=False)
    edges: np.ndarray = field(repr=False)
    clamped_below: int = 0


def histogram_edges() -> np.ndarray:
    return np.arange(101) / 100.0


def cohort_stats(values) -> CohortStats:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty list of SSIM values")
    if np.any(v < -1.0) or np.any(v > 1.0) or not np.all(np.isfinite(v)):
        raise ValueError("SSIM values must lie in [-1, 1]")
    edges = histogram_edges()
    # a value on an edge belongs to the bin above it
    idx = np.searchsorted(edges, v, side="right") - 1
    below = int(np.count_nonzero(idx < 0))
    if below:
        log.warning("%d negative SSIM values clamped into the first histogram bin", below)
    idx = np.clip(idx, 0, len(edges) - 2)
    counts = np.bincount(idx, minlength=len(edges) - 1)
    return CohortStats(
        n=int(v.size), mean=float(v.mean()), std=float(v.std()), median=float(np.median(v)),
        counts=counts, edges=edges, clamped_below=below,
    )


def skew_report(stats: CohortStats) -> str:
    side = "left-skewed (median >= mean)" if stats.median >= stats.mean else "not left-skewed (median < mean)"
    return f"n={stats.n} mean={stats.mean:.4f} std={stats.std:.4f} median={stats.median:.4f}: {side}"


# ---------------------------------------------------------------------------
# results CSV

def format_results_row(row: dict) -> dict:
    out = {}
    for col in RESULTS_COLUMNS:
        val = row.get(col, "")
        if isinstance(val, float):
            val = f"{val:.6f}" if col != "runtime_s" else f"{val:.3f}"
        out[col] = "" if val is None else val
    return out


def results_csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULTS_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(format_results_row(row))
    return buf.getvalue()


def write_results(rows, path: str | os.PathLike) -> None:
    atomic_write_text(path, results_csv_text(rows))


def read_results(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def histogram_figure(stats: CohortStats):
    """Matplotlib bar chart of the cohort histogram, one 0.01-wide bar per bin."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(stats.edges[:-1], stats.counts, width=HIST_BIN_WIDTH, align="edge",
           color="#4c72b0", edgecolor="none")
    ax.set_xlim(0.0, 1.0)
    ax.set_xlabel("SSIM")
    ax.set_ylabel("n")
    ax.set_title(f"SSIM histogram (n={stats.n}, mean={stats.mean:.2f}, median={stats.median:.2f})")
    return fig


def render_histogram(stats: CohortStats, out_stem: str | os.PathLike) -> list[Path]:
    """Write ``<stem>.svg`` and ``<stem>.png`` bar charts with 0.01-wide bins."""
    import matplotlib.pyplot as plt

    fig = histogram_figure(stats)
    out_stem = Path(out_stem)
    out_stem.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for ext, kw in (("svg", {"metadata": {"Date": None}}), ("png", {"metadata": {"Software": None}})):
        buf = io.BytesIO()
        fig.savefig(buf, format=ext, **kw)
        p = out_stem.with_suffix("." + ext)
        atomic_write_bytes(p, buf.getvalue())
        paths.append(p)
    plt.close(fig)
    return paths
