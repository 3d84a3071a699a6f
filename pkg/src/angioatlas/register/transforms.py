"""2D affine and cubic B-spline transforms, resampling, JSON persistence.

All transforms map fixed-image physical points (mm) to moving-image
physical points. A TransformPair maps ``x -> affine(x + bspline(x))``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..imgcore import GrayImage, atomic_write_text

_SNAP = 1e-9


class SingularTransformError(ValueError):
    pass


@dataclass(frozen=True)
class Affine2:
    matrix: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 1.0)
    translation: tuple[float, float] = (0.0, 0.0)
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "matrix", tuple(float(v) for v in self.matrix))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))

    @classmethod
    def from_params(cls, params, center) -> "Affine2":
        p = [float(v) for v in params]
        return cls(tuple(p[:4]), tuple(p[4:6]), center)

    @classmethod
    def similarity(cls, angle_deg=0.0, scale=1.0, translation=(0.0, 0.0), center=(0.0, 0.0)) -> "Affine2":
        a = math.radians(angle_deg)
        c, s = scale * math.cos(a), scale * math.sin(a)
        return cls((c, -s, s, c), translation, center)

    @property
    def params(self) -> np.ndarray:
        return np.array(self.matrix + self.translation)

    @property
    def A(self) -> np.ndarray:
        return np.array(self.matrix).reshape(2, 2)

    @property
    def offset(self) -> np.ndarray:
        """``b`` in ``T(x) = A x + b``."""
        c = np.array(self.center)
        return c + np.array(self.translation) - self.A @ c

    def determinant(self) -> float:
        a11, a12, a21, a22 = self.matrix
        return a11 * a22 - a12 * a21

    def rotation_deg(self) -> float:
        a11, a12, a21, a22 = self.matrix
        return math.degrees(math.atan2(a21 - a12, a11 + a22))

    def map(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.A.T + self.offset


def bspline_weights(t):
    """Cubic uniform B-spline basis values for local coordinate ``t`` in [0, 1]."""
    t = np.asarray(t, dtype=np.float64)
    t2 = t * t
    t3 = t2 * t
    s = 1.0 - t
    return np.stack(
        [s * s * s / 6.0, (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0, (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0, t3 / 6.0],
        axis=-1,
    )


def _axis_weights(coord, lo, spacing, ncells):
    """Cell index and four basis weights along one axis for physical coords."""
    u = (np.asarray(coord, dtype=np.float64) - lo) / spacing
    u = np.clip(u, 0.0, float(ncells))
    cell = np.minimum(np.floor(u), ncells - 1).astype(np.int64)
    return cell, bspline_weights(u - cell)


@dataclass(frozen=True)
class BSplineField2:
    """Cubic B-spline displacement field on a uniform control grid.

    The domain ``[x0, x1] x [y0, y1]`` is split into ``ncells`` per axis; the
    grid carries one extra control point before and two after the domain on
    each axis, so ``grid = ncells + 3`` and ``origin = domain_lo - spacing``.
    ``coeffs`` has shape (rows, cols, 2), displacement in mm.
    """

    domain: tuple[float, float, float, float]
    ncells: tuple[int, int]
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.float64)
        nx, ny = int(self.ncells[0]), int(self.ncells[1])
        if c.shape != (ny + 3, nx + 3, 2):
            raise ValueError(f"coeffs shape {c.shape} does not match grid {(ny + 3, nx + 3, 2)}")
        if not np.all(np.isfinite(c)):
            raise ValueError("B-spline coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "ncells", (nx, ny))
        object.__setattr__(self, "domain", tuple(float(v) for v in self.domain))

    @classmethod
    def zeros(cls, domain, ncells) -> "BSplineField2":
        nx, ny = ncells
        return cls(domain, (nx, ny), np.zeros((ny + 3, nx + 3, 2)))

    @classmethod
    def for_image(cls, image: GrayImage, ncells: int | tuple[int, int]) -> "BSplineField2":
        if isinstance(ncells, int):
            ncells = (ncells, ncells)
        ex, ey = image.extent
        return cls.zeros((0.0, 0.0, ex, ey), ncells)

    @property
    def grid(self) -> tuple[int, int]:
        return (self.ncells[0] + 3, self.ncells[1] + 3)

    @property
    def spacing(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.domain
        return ((x1 - x0) / self.ncells[0], (y1 - y0) / self.ncells[1])

    @property
    def origin(self) -> tuple[float, float]:
        gx, gy = self.spacing
        return (self.domain[0] - gx, self.domain[1] - gy)

    def with_coeffs(self, coeffs) -> "BSplineField2":
        return BSplineField2(self.domain, self.ncells, np.asarray(coeffs).reshape(self.coeffs.shape))

    def axis_matrices(self, xs, ys):
        """Dense basis matrices Bx (len(xs), cols) and By (len(ys), rows)."""
        gx, gy = self.spacing
        cx, wx = _axis_weights(xs, self.domain[0], gx, self.ncells[0])
        cy, wy = _axis_weights(ys, self.domain[1], gy, self.ncells[1])
        bx = np.zeros((len(cx), self.grid[0]))
        by = np.zeros((len(cy), self.grid[1]))
        for k in range(4):
            bx[np.arange(len(cx)), cx + k] = wx[:, k]
            by[np.arange(len(cy)), cy + k] = wy[:, k]
        return bx, by

    def evaluate_grid(self, xs, ys) -> np.ndarray:
        """Displacement on the tensor grid ``ys x xs``; shape (len(ys), len(xs), 2)."""
        bx, by = self.axis_matrices(xs, ys)
        return np.stack([by @ self.coeffs[..., d] @ bx.T for d in range(2)], axis=-1)

    def evaluate(self, pts) -> np.ndarray:
        """Displacement at scattered points, shape (n, 2)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        gx, gy = self.spacing
        cx, wx = _axis_weights(pts[:, 0], self.domain[0], gx, self.ncells[0])
        cy, wy = _axis_weights(pts[:, 1], self.domain[1], gy, self.ncells[1])
        out = np.zeros((len(pts), 2))
        for a in range(4):
            for b in range(4):
                w = (wy[:, b] * wx[:, a])[:, None]
                out += w * self.coeffs[cy + b, cx + a]
        return out

    def refine(self) -> "BSplineField2":
        """Same field on a grid of half the spacing (exact knot insertion)."""
        c = self.coeffs
        c = _subdivide(c, axis=1)
        c = _subdivide(c, axis=0)
        return BSplineField2(self.domain, (2 * self.ncells[0], 2 * self.ncells[1]), c)


def _subdivide(c: np.ndarray, axis: int) -> np.ndarray:
    c = np.moveaxis(c, axis, 0)
    n = c.shape[0]  # ncells + 3
    ncells = n - 3
    out = np.empty((2 * ncells + 3,) + c.shape[1:])
    # new index 2k-1 sits on old control k, new index 2k halfway between k and k+1
    for m in range(out.shape[0]):
        if m % 2 == 1:
            k = (m + 1) // 2
            out[m] = (c[k - 1] + 6.0 * c[k] + c[k + 1]) / 8.0
        else:
            k = m // 2
            out[m] = (c[k] + c[k + 1]) / 2.0
    return np.moveaxis(out, 0, axis)


@dataclass(frozen=True)
class TransformPair:
    affine: Affine2
    bspline: BSplineField2 | None = None
    config: dict[str, Any] = field(default_factory=dict)
    final_cost: float = 0.0
    levels: tuple = ()

    def map(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        if self.bspline is not None:
            pts = pts + self.bspline.evaluate(pts)
        return self.affine.map(pts)


def identity_pair(center=(0.0, 0.0)) -> TransformPair:
    return TransformPair(Affine2(center=center))


# ---------------------------------------------------------------------------
# resampling

def _snap(c: np.ndarray) -> np.ndarray:
    r = np.rint(c)
    return np.where(np.abs(c - r) < _SNAP, r, c)


def sample_bilinear(data: np.ndarray, cols: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Bilinear lookup at fractional pixel coordinates; 0 outside the pixel-center hull."""
    h, w = data.shape
    cols = _snap(cols)
    rows = _snap(rows)
    inside = (cols >= 0) & (cols <= w - 1) & (rows >= 0) & (rows <= h - 1)
    c0 = np.clip(np.floor(cols), 0, max(w - 2, 0)).astype(np.int64)
    r0 = np.clip(np.floor(rows), 0, max(h - 2, 0)).astype(np.int64)
    fc = np.where(inside, cols - c0, 0.0)
    fr = np.where(inside, rows - r0, 0.0)
    c1 = np.minimum(c0 + 1, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    v = (
        data[r0, c0] * (1 - fc) * (1 - fr)
        + data[r0, c1] * fc * (1 - fr)
        + data[r1, c0] * (1 - fc) * fr
        + data[r1, c1] * fc * fr
    )
    return np.where(inside, v, 0.0)


def fixed_grid_points(shape, spacing) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    return np.arange(w) * spacing[0], np.arange(h) * spacing[1]


def mapped_coords(transform, shape, spacing) -> tuple[np.ndarray, np.ndarray]:
    """Moving-space physical coords (X, Y) for every fixed-grid pixel."""
    if isinstance(transform, Affine2):
        transform = TransformPair(transform)
    xs, ys = fixed_grid_points(shape, spacing)
    X, Y = np.meshgrid(xs, ys)
    if transform.bspline is not None:
        d = transform.bspline.evaluate_grid(xs, ys)
        X = X + d[..., 0]
        Y = Y + d[..., 1]
    A, b = transform.affine.A, transform.affine.offset
    return A[0, 0] * X + A[0, 1] * Y + b[0], A[1, 0] * X + A[1, 1] * Y + b[1]


def apply_transform(
    moving: GrayImage,
    transform: TransformPair | Affine2,
    shape: tuple[int, int] | None = None,
    spacing: tuple[float, float] | None = None,
) -> GrayImage:
    """Resample ``moving`` onto a fixed grid (default: the moving grid itself)."""
    affine = transform if isinstance(transform, Affine2) else transform.affine
    if abs(affine.determinant()) < 1e-12:
        raise SingularTransformError("singular affine matrix")
    shape = shape or moving.data.shape
    spacing = spacing or moving.spacing
    qx, qy = mapped_coords(transform, shape, spacing)
    out = sample_bilinear(moving.data, qx / moving.spacing[0], qy / moving.spacing[1])
    return GrayImage(out, spacing)


# ---------------------------------------------------------------------------
# JSON

def dumps_exact(obj) -> str:
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            raise ValueError("non-finite value in transform JSON")
        return format(v, ".17g")
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {dumps_exact(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(dumps_exact(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def pair_to_dict(pair: TransformPair) -> dict:
    aff = pair.affine
    doc: dict[str, Any] = {
        "affine": {
            "matrix": list(aff.matrix),
            "translation_mm": list(aff.translation),
            "center_mm": list(aff.center),
        }
    }
    if pair.bspline is not None:
        bs = pair.bspline
        doc["bspline"] = {
            "grid": list(bs.grid),
            "spacing_mm": list(bs.spacing),
            "origin_mm": list(bs.origin),
            "coeffs_mm": [[float(c[0]), float(c[1])] for c in bs.coeffs.reshape(-1, 2)],
        }
    doc["config"] = dict(pair.config)
    doc["final_cost"] = float(pair.final_cost)
    if pair.levels:
        doc["levels"] = [dict(lv) for lv in pair.levels]
    return doc


def dumps_pair(pair: TransformPair) -> str:
    return dumps_exact(pair_to_dict(pair)) + "\n"


def pair_from_dict(doc: dict) -> TransformPair:
    a = doc["affine"]
    affine = Affine2(tuple(a["matrix"]), tuple(a["translation_mm"]), tuple(a["center_mm"]))
    bspline = None
    if doc.get("bspline") is not None:
        b = doc["bspline"]
        cols, rows = (int(v) for v in b["grid"])
        gx, gy = (float(v) for v in b["spacing_mm"])
        ox, oy = (float(v) for v in b["origin_mm"])
        nx, ny = cols - 3, rows - 3
        domain = (ox + gx, oy + gy, ox + gx + nx * gx, oy + gy + ny * gy)
        coeffs = np.array(b["coeffs_mm"], dtype=np.float64).reshape(rows, cols, 2)
        bspline = BSplineField2(domain, (nx, ny), coeffs)
    return TransformPair(
        affine,
        bspline,
        dict(doc.get("config", {})),
        float(doc.get("final_cost", 0.0)),
        tuple(doc.get("levels", ())),
    )


def save_pair(pair: TransformPair, path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps_pair(pair))


def load_pair(path: str | os.PathLike) -> TransformPair:
    return pair_from_dict(json.loads(Path(path).read_text()))
