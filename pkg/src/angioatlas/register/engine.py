"""Multi-resolution MI registration: affine stage, then B-spline stage."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..imgcore import BinaryMask, GrayImage
from .optimizer import central_difference, lbfgs
from .similarity import (
    affine_histogram,
    bin_coords,
    bspline_fd_gradient,
    histogram_at_coords,
    mi_from_histogram,
)
from .transforms import Affine2, BSplineField2, TransformPair, _axis_weights

log = logging.getLogger(__name__)


class RegistrationError(ValueError):
    pass


@dataclass(frozen=True)
class RegistrationConfig:
    resolutions_affine: int = 20
    resolutions_bspline: int = 16
    max_step_length: float = 2.0
    histogram_bins: int = 32
    lbfgs_memory: int = 5
    max_iterations_per_level: int = 200
    convergence_tol: float = 1e-6
    auto_scale: bool = True
    fd_step: float = 1e-3
    min_level_size: int = 32
    bspline_initial_cells: int = 8
    bspline_min_spacing_px: float = 8.0
    initialization: str = "moments"
    bspline_edge_sigma_px: float = 1.0

    def __post_init__(self):
        for name in ("resolutions_affine", "resolutions_bspline", "histogram_bins", "lbfgs_memory",
                     "max_iterations_per_level", "min_level_size", "bspline_initial_cells"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.histogram_bins < 2:
            raise ValueError("histogram_bins must be >= 2")
        if self.max_step_length <= 0:
            raise ValueError("max_step_length must be > 0")
        if self.bspline_edge_sigma_px < 0:
            raise ValueError("bspline_edge_sigma_px must be >= 0")
        if self.initialization not in ("moments", "centroid"):
            raise ValueError(f"unknown initialization {self.initialization!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "RegistrationConfig":
        return cls(**doc)


def load_config(path: str | os.PathLike) -> RegistrationConfig:
    return RegistrationConfig.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# pyramid

def effective_levels(shape, requested: int, min_size: int = 32) -> int:
    """Number of factor-2 levels keeping the coarsest min dimension >= min_size."""
    n = 1
    h, w = shape
    while n < requested:
        h, w = (h + 1) // 2, (w + 1) // 2
        if min(h, w) < min_size:
            break
        n += 1
    return n


def gaussian_pyramid(image: GrayImage, levels: int) -> list[GrayImage]:
    """Coarse-to-fine list; each level is smoothed (sigma 1 px) and decimated by 2."""
    out = [image]
    cur = image
    for _ in range(levels - 1):
        data = ndimage.gaussian_filter(cur.data, 1.0, mode="nearest")[::2, ::2]
        cur = GrayImage(data, (cur.spacing[0] * 2, cur.spacing[1] * 2))
        out.append(cur)
    return out[::-1]


def _pyramid(image: GrayImage, levels: int) -> list[GrayImage]:
    vals = np.unique(image.data)
    pyr = gaussian_pyramid(image, levels)
    if vals.size != 2:
        return pyr
    lo, hi = float(vals[0]), float(vals[1])
    return [GrayImage(np.where(p.data > 0.5 * (lo + hi), hi, lo), p.spacing) for p in pyr]


def _levels(fixed: GrayImage, requested: int, min_size: int, stage: str) -> int:
    n = effective_levels(fixed.data.shape, requested, min_size)
    if n < requested:
        log.info("%s: %d resolutions requested, clamped to %d (coarsest level >= %d px)",
                 stage, requested, n, min_size)
    return n


# ---------------------------------------------------------------------------
# scales

def estimate_scales(kind: str, fixed: GrayImage, n_params: int | None = None) -> np.ndarray:
    """Per-parameter scales: RMS shift of the four fixed-image corners per unit change.

    ``kind`` is "affine" (a11, a12, a21, a22, tx, ty), "translation", or
    "bspline" (coefficients are local displacements, scale 1).
    """
    if kind == "translation":
        return np.ones(2)
    if kind == "bspline":
        if n_params is None:
            raise ValueError("bspline scales need n_params")
        return np.ones(n_params)
    if kind != "affine":
        raise ValueError(f"unknown transform kind {kind!r}")
    ex, ey = fixed.extent
    cx, cy = fixed.center
    dx = np.array([0.0, ex, 0.0, ex]) - cx
    dy = np.array([0.0, 0.0, ey, ey]) - cy
    rx = float(np.sqrt(np.mean(dx**2)))
    ry = float(np.sqrt(np.mean(dy**2)))
    return np.array([rx, ry, rx, ry, 1.0, 1.0])


# ---------------------------------------------------------------------------
# shared level state

@dataclass
class _Level:
    fixed: GrayImage
    fb: np.ndarray
    mov: np.ndarray
    mov_spacing: tuple[float, float]
    mlo: float
    mscale: float
    bins: int


def _prepare(fixed: GrayImage, moving: GrayImage, levels: int, bins: int) -> list[_Level]:
    flo, fhi = float(fixed.data.min()), float(fixed.data.max())
    mlo = min(0.0, float(moving.data.min()))
    mhi = float(moving.data.max())
    if mhi <= mlo:
        raise RegistrationError("moving image is constant")
    mscale = (bins - 1) / (mhi - mlo)
    # a two-valued fixed image (the DSA mask) stays two-valued at every level;
    # smoothed mask edges otherwise pull the coarse optimum towards a smaller scale
    out = []
    for f, m in zip(_pyramid(fixed, levels), gaussian_pyramid(moving, levels)):
        fb = np.ascontiguousarray(bin_coords(f.data, flo, fhi, bins))
        out.append(_Level(f, fb, np.ascontiguousarray(m.data), m.spacing, mlo, mscale, bins))
    return out


def _as_gray(img) -> GrayImage:
    return img.as_gray() if isinstance(img, BinaryMask) else img


def _check_fixed(fixed: GrayImage) -> None:
    if not np.any(fixed.data > 0):
        raise RegistrationError("empty fixed mask")
    if np.ptp(fixed.data) == 0:
        raise RegistrationError("constant fixed image")


def _affine_cost(level: _Level, params: np.ndarray, center) -> float:
    aff = Affine2.from_params(params, center)
    A, b = aff.A, aff.offset
    H = affine_histogram(level.fb, level.mov, level.bins, level.mlo, level.mscale,
                         level.fixed.spacing[0], level.fixed.spacing[1],
                         level.mov_spacing[0], level.mov_spacing[1],
                         A[0, 0], A[0, 1], A[1, 0], A[1, 1], b[0], b[1])
    return -float(mi_from_histogram(H))


def centroid_init(fixed: GrayImage, moving: GrayImage) -> Affine2:
    """Pure translation taking the fixed-mask centroid onto the moving silhouette centroid."""
    def centroid(img, thr):
        rows, cols = np.nonzero(img.data > thr)
        if rows.size == 0:
            return np.array(img.center)
        return np.array([cols.mean() * img.spacing[0], rows.mean() * img.spacing[1]])

    cf = centroid(fixed, 0.5 * float(fixed.data.max()))
    cm = centroid(moving, 0.0)
    return Affine2(translation=tuple(cm - cf), center=fixed.center)


def _moments(img: GrayImage, sel: np.ndarray):
    rows, cols = np.nonzero(sel)
    if rows.size < 3:
        return None
    pts = np.stack([cols * img.spacing[0], rows * img.spacing[1]])
    return pts.mean(axis=1), np.cov(pts)


def moment_init(fixed: GrayImage, moving: GrayImage, max_angle_deg: float = 20.0,
                min_elongation: float = 1.3) -> Affine2:
    """Similarity taking the fixed-mask region onto the moving silhouette.

    Centroids give the translation, the ratio of covariance determinants an
    isotropic scale, and the principal axes a rotation when both shapes are
    elongated enough for the axis to be defined and the angle is small.
    Falls back to :func:`centroid_init` on degenerate shapes.
    """
    mf = _moments(fixed, fixed.data > 0.5 * float(fixed.data.max()))
    mm = _moments(moving, moving.data > 0.0)
    if mf is None or mm is None:
        return centroid_init(fixed, moving)
    (cf, Cf), (cm, Cm) = mf, mm
    df, dm = np.linalg.det(Cf), np.linalg.det(Cm)
    if df <= 0 or dm <= 0:
        return centroid_init(fixed, moving)
    s = (dm / df) ** 0.25
    wf, vf = np.linalg.eigh(Cf)
    wm, vm = np.linalg.eigh(Cm)
    ang = 0.0
    if wf[1] > min_elongation * wf[0] and wm[1] > min_elongation * wm[0]:
        af = np.arctan2(vf[1, 1], vf[0, 1])
        am = np.arctan2(vm[1, 1], vm[0, 1])
        d = (am - af + np.pi / 2) % np.pi - np.pi / 2
        if abs(d) <= np.radians(max_angle_deg):
            ang = d
    c, si = np.cos(ang), np.sin(ang)
    M = s * np.array([[c, -si], [si, c]])
    ctr = np.array(fixed.center)
    t = cm - (M @ (cf - ctr) + ctr)
    return Affine2(matrix=tuple(M.ravel()), translation=tuple(t), center=fixed.center)


@dataclass
class StageResult:
    transform: object
    final_cost: float
    initial_cost: float
    levels: list[dict] = field(default_factory=list)

    @property
    def improved(self) -> bool:
        return self.final_cost < self.initial_cost


def register_affine(fixed, moving: GrayImage, config: RegistrationConfig = RegistrationConfig(),
                    init: Affine2 | None = None) -> StageResult:
    fixed = _as_gray(fixed)
    _check_fixed(fixed)
    n = _levels(fixed, config.resolutions_affine, config.min_level_size, "affine")
    levels = _prepare(fixed, moving, n, config.histogram_bins)
    if init is None:
        init = (moment_init if config.initialization == "moments" else centroid_init)(fixed, moving)
    center = init.center
    scales = estimate_scales("affine", fixed) if config.auto_scale else np.ones(6)
    z = init.params * scales
    log_rows = []
    initial_cost = None
    for li, level in enumerate(levels):
        def f(zz, level=level):
            return _affine_cost(level, zz / scales, center)

        def g(zz, f=f):
            return central_difference(f, zz, config.fd_step)

        res = lbfgs(f, g, z, memory=config.lbfgs_memory, max_iter=config.max_iterations_per_level,
                    max_step=config.max_step_length, tol=config.convergence_tol)
        if li == len(levels) - 1:
            initial_cost = f(init.params * scales)
        z = res.x
        log_rows.append({"stage": "affine", "level": li, "shape": list(level.fixed.data.shape),
                         "iterations": res.nit, "initial_cost": res.costs[0],
                         "final_cost": res.fun, "stop": res.stop})
    aff = Affine2.from_params(z / scales, center)
    final_cost = log_rows[-1]["final_cost"]
    if final_cost > initial_cost:
        # coarse levels can walk off a start that was already optimal at full resolution
        log.warning("affine stage did not improve on its initialization (cost %.9g > %.9g); keeping it",
                    final_cost, initial_cost)
        aff, final_cost = Affine2.from_params(init.params, center), initial_cost
    return StageResult(aff, final_cost, initial_cost, log_rows)


# ---------------------------------------------------------------------------
# B-spline stage

class _BSplineLevel:
    def __init__(self, level: _Level, field: BSplineField2, affine: Affine2):
        self.level = level
        self.field = field
        fx = level.fixed
        self.xs = np.arange(fx.width) * fx.spacing[0]
        self.ys = np.arange(fx.height) * fx.spacing[1]
        self.bx, self.by = field.axis_matrices(self.xs, self.ys)
        gx, gy = field.spacing
        cx, wx = _axis_weights(self.xs, field.domain[0], gx, field.ncells[0])
        cy, wy = _axis_weights(self.ys, field.domain[1], gy, field.ncells[1])
        self.cellx, self.wx = np.ascontiguousarray(cx), np.ascontiguousarray(wx)
        self.celly, self.wy = np.ascontiguousarray(cy), np.ascontiguousarray(wy)
        self.A = affine.A
        self.b = affine.offset
        msx, msy = level.mov_spacing
        self.jac = np.ascontiguousarray(self.A / np.array([[msx], [msy]]))
        self.X, self.Y = np.meshgrid(self.xs, self.ys)

    def coords(self, theta: np.ndarray):
        c = theta.reshape(self.field.coeffs.shape)
        dx = self.by @ c[..., 0] @ self.bx.T
        dy = self.by @ c[..., 1] @ self.bx.T
        X = self.X + dx
        Y = self.Y + dy
        msx, msy = self.level.mov_spacing
        qc = (self.A[0, 0] * X + self.A[0, 1] * Y + self.b[0]) / msx
        qr = (self.A[1, 0] * X + self.A[1, 1] * Y + self.b[1]) / msy
        return np.ascontiguousarray(qc), np.ascontiguousarray(qr)

    def histogram(self, theta):
        lv = self.level
        qc, qr = self.coords(theta)
        return histogram_at_coords(lv.fb, lv.mov, qc, qr, lv.mlo, lv.mscale, lv.bins), qc, qr

    def cost(self, theta) -> float:
        return -float(mi_from_histogram(self.histogram(theta)[0]))

    def grad(self, theta, step) -> np.ndarray:
        lv = self.level
        H0, qc, qr = self.histogram(theta)
        return bspline_fd_gradient(lv.fb, lv.mov, qc, qr, lv.mlo, lv.mscale, lv.bins, H0,
                                   self.cellx, self.wx, self.celly, self.wy,
                                   self.field.ncells[0], self.field.ncells[1], self.jac, step)


def bspline_schedule(fixed: GrayImage, config: RegistrationConfig) -> list[int]:
    """Control-grid cell counts per level, coarse to fine."""
    n = _levels(fixed, config.resolutions_bspline, config.min_level_size, "bspline")
    cells = [config.bspline_initial_cells]
    min_dim = min(fixed.width, fixed.height) - 1
    for _ in range(n - 1):
        nxt = cells[-1] * 2
        if min_dim / nxt < config.bspline_min_spacing_px:
            nxt = cells[-1]
        cells.append(nxt)
    return cells


def register_bspline(fixed, moving: GrayImage, config: RegistrationConfig = RegistrationConfig(),
                     affine: Affine2 | None = None, silhouette=None) -> StageResult:
    """Refine ``affine`` with a cubic B-spline field defined in fixed-image space.

    The moving image is sampled through ``affine(x + d(x))`` directly, so the
    affine-resampled image is never interpolated twice. When ``silhouette`` is
    given it replaces ``moving`` for this stage. Both images are smoothed with
    the same Gaussian (``bspline_edge_sigma_px``): MI between a sharp mask and
    a graded image rewards warps that stretch the graded edge band, while two
    equally blurred silhouettes share their optimum at exact overlap.
    """
    fixed = _as_gray(fixed)
    _check_fixed(fixed)
    if silhouette is not None:
        moving = _as_gray(silhouette)
    sigma = config.bspline_edge_sigma_px
    if sigma > 0:
        fixed = GrayImage(ndimage.gaussian_filter(fixed.data, sigma, mode="nearest"), fixed.spacing)
        moving = GrayImage(ndimage.gaussian_filter(moving.data, sigma, mode="nearest"), moving.spacing)
    affine = affine or Affine2(center=fixed.center)
    cells = bspline_schedule(fixed, config)
    levels = _prepare(fixed, moving, len(cells), config.histogram_bins)
    ex, ey = fixed.extent
    field = BSplineField2.zeros((0.0, 0.0, ex, ey), (cells[0], cells[0]))
    log_rows = []
    initial_cost = None
    for li, (level, nc) in enumerate(zip(levels, cells)):
        while field.ncells[0] < nc:
            field = field.refine()
        bl = _BSplineLevel(level, field, affine)
        theta0 = field.coeffs.ravel().copy()
        step = config.fd_step

        res = lbfgs(bl.cost, lambda th: bl.grad(th, step), theta0, memory=config.lbfgs_memory,
                    max_iter=config.max_iterations_per_level, max_step=config.max_step_length,
                    tol=config.convergence_tol)
        if li == len(levels) - 1:
            initial_cost = bl.cost(np.zeros_like(theta0))
        field = field.with_coeffs(res.x)
        log_rows.append({"stage": "bspline", "level": li, "shape": list(level.fixed.data.shape),
                         "grid": list(field.grid), "iterations": res.nit,
                         "initial_cost": res.costs[0], "final_cost": res.fun, "stop": res.stop})
    out = StageResult(field, log_rows[-1]["final_cost"], initial_cost, log_rows)
    if not out.improved:
        log.warning("bspline stage did not improve on its initialization (cost %.6g)", out.final_cost)
    return out


def register(fixed, moving: GrayImage, config: RegistrationConfig = RegistrationConfig(),
             stage: str = "bspline", silhouette=None) -> TransformPair:
    """Affine then (unless ``stage == "affine"``) B-spline registration.

    ``silhouette`` (binary projected atlas) is the moving image of the
    B-spline stage when given; the affine stage always uses ``moving``.
    """
    if stage not in ("affine", "bspline"):
        raise ValueError(f"unknown stage {stage!r}")
    aff = register_affine(fixed, moving, config)
    levels = list(aff.levels)
    bspline = None
    cost = aff.final_cost
    if stage == "bspline":
        bs = register_bspline(fixed, moving, config, aff.transform, silhouette)
        bspline = bs.transform
        cost = bs.final_cost
        levels += bs.levels
    return TransformPair(aff.transform, bspline, config.to_json(), cost, tuple(levels))
