"""Cone-beam forward projection of labeled volumes.

World frame: isocenter at the origin, x toward patient right, y anterior,
z superior. The source sits at ``sid * p(primary, secondary)`` with
``p(0, 0) = (0, 1, 0)`` (AP) and ``p(90, 0) = (1, 0, 0)`` (lateral). Detector
rows run from superior (row 0) to inferior.

Path lengths are exact voxel chords from an incremental parametric
(Siddon / Amanatides-Woo) traversal.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .atlas import ViewLabel
from .imgcore import BinaryMask, GrayImage, LabelVolume, atomic_write_text

# DICOM attributes the sidecar fields are copied from
DICOM_TAGS = {
    "sid_mm": "(0018,1111) Distance Source to Patient",
    "sdd_mm": "(0018,1110) Distance Source to Detector",
    "primary_angle_deg": "(0018,1510) Positioner Primary Angle",
    "secondary_angle_deg": "(0018,1511) Positioner Secondary Angle",
    "det_spacing_mm": "(0018,1164) Imager Pixel Spacing",
}


@dataclass(frozen=True)
class ConeBeamGeometry:
    sid: float
    sdd: float
    primary_angle: float = 0.0
    secondary_angle: float = 0.0
    det_cols: int = 512
    det_rows: int = 512
    det_spacing: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        if not 0 < self.sid < self.sdd:
            raise ValueError(f"need 0 < sid < sdd, got sid={self.sid}, sdd={self.sdd}")
        if self.det_cols < 1 or self.det_rows < 1:
            raise ValueError("detector needs at least one pixel")
        if min(self.det_spacing) <= 0:
            raise ValueError("detector spacing must be > 0")
        object.__setattr__(self, "det_spacing", (float(self.det_spacing[0]), float(self.det_spacing[1])))

    @classmethod
    def for_view(cls, view: ViewLabel | str, **kwargs) -> "ConeBeamGeometry":
        """AP -> primary 0 deg, lateral -> primary 90 deg; kwargs override."""
        view = ViewLabel(view)
        kwargs.setdefault("primary_angle", 0.0 if view is ViewLabel.Anteroposterior else 90.0)
        kwargs.setdefault("secondary_angle", 0.0)
        return cls(**kwargs)

    def to_json(self) -> dict:
        return {
            "sid_mm": self.sid,
            "sdd_mm": self.sdd,
            "primary_angle_deg": self.primary_angle,
            "secondary_angle_deg": self.secondary_angle,
            "det_cols": self.det_cols,
            "det_rows": self.det_rows,
            "det_spacing_mm": list(self.det_spacing),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ConeBeamGeometry":
        return cls(
            sid=float(doc["sid_mm"]),
            sdd=float(doc["sdd_mm"]),
            primary_angle=float(doc.get("primary_angle_deg", 0.0)),
            secondary_angle=float(doc.get("secondary_angle_deg", 0.0)),
            det_cols=int(doc["det_cols"]),
            det_rows=int(doc["det_rows"]),
            det_spacing=tuple(doc["det_spacing_mm"]),
        )


def load_geometry(path: str | os.PathLike) -> ConeBeamGeometry:
    return ConeBeamGeometry.from_json(json.loads(Path(path).read_text()))


def save_geometry(g: ConeBeamGeometry, path: str | os.PathLike) -> None:
    atomic_write_text(path, json.dumps(g.to_json(), indent=2) + "\n")


@dataclass(frozen=True)
class DetectorFrame:
    source: np.ndarray
    center: np.ndarray
    u: np.ndarray
    v: np.ndarray


def place_geometry(g: ConeBeamGeometry) -> DetectorFrame:
    a = math.radians(g.primary_angle)
    b = math.radians(g.secondary_angle)
    p = np.array([math.sin(a) * math.cos(b), math.cos(a) * math.cos(b), math.sin(b)])
    u = np.array([math.cos(a), -math.sin(a), 0.0])
    v = np.cross(u, p)
    source = g.sid * p
    return DetectorFrame(source=source, center=source - g.sdd * p, u=u, v=v)


def magnification(g: ConeBeamGeometry) -> float:
    return g.sdd / g.sid


def pixel_centers(g: ConeBeamGeometry) -> np.ndarray:
    """World coordinates of detector pixel centers, shape (rows, cols, 3)."""
    frame = place_geometry(g)
    su, sv = g.det_spacing
    cu = (np.arange(g.det_cols) - (g.det_cols - 1) / 2.0) * su
    cv = ((g.det_rows - 1) / 2.0 - np.arange(g.det_rows)) * sv
    return (
        frame.center[None, None, :]
        + cu[None, :, None] * frame.u[None, None, :]
        + cv[:, None, None] * frame.v[None, None, :]
    )


@numba.njit(cache=True)
def _trace(sx, sy, sz, px, py, pz, labels, slot, bmin, vsz, n_slots, acc):
    """Accumulate per-slot chord lengths along segment S->P into ``acc``."""
    nz, ny, nx = labels.shape
    d = (px - sx, py - sy, pz - sz)
    s = (sx, sy, sz)
    n = (nx, ny, nz)
    ray_len = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    t0 = 0.0
    t1 = 1.0
    for ax in range(3):
        lo = bmin[ax]
        hi = bmin[ax] + n[ax] * vsz[ax]
        if d[ax] == 0.0:
            if s[ax] <= lo or s[ax] >= hi:
                return
        else:
            ta = (lo - s[ax]) / d[ax]
            tb = (hi - s[ax]) / d[ax]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    if t1 <= t0:
        return

    idx = np.empty(3, np.int64)
    step = np.empty(3, np.int64)
    tmax = np.empty(3)
    tdelta = np.empty(3)
    for ax in range(3):
        # voxel containing the entry point; on a plane, take the one ahead
        pos = s[ax] + t0 * d[ax]
        k = int(math.floor((pos - bmin[ax]) / vsz[ax]))
        if d[ax] < 0.0 and (pos - bmin[ax]) / vsz[ax] == k:
            k -= 1
        if k < 0:
            k = 0
        if k >= n[ax]:
            k = n[ax] - 1
        idx[ax] = k
        if d[ax] > 0.0:
            step[ax] = 1
            tmax[ax] = (bmin[ax] + (k + 1) * vsz[ax] - s[ax]) / d[ax]
            tdelta[ax] = vsz[ax] / d[ax]
        elif d[ax] < 0.0:
            step[ax] = -1
            tmax[ax] = (bmin[ax] + k * vsz[ax] - s[ax]) / d[ax]
            tdelta[ax] = -vsz[ax] / d[ax]
        else:
            step[ax] = 0
            tmax[ax] = np.inf
            tdelta[ax] = np.inf

    t = t0
    while t < t1:
        ax = 0
        if tmax[1] < tmax[ax]:
            ax = 1
        if tmax[2] < tmax[ax]:
            ax = 2
        tn = tmax[ax]
        if tn > t1:
            tn = t1
        lab = labels[idx[2], idx[1], idx[0]]
        if lab < slot.shape[0]:
            k = slot[lab]
            if k >= 0 and tn > t:
                acc[k] += (tn - t) * ray_len
        t = tn
        idx[ax] += step[ax]
        if idx[ax] < 0 or idx[ax] >= n[ax]:
            break
        tmax[ax] += tdelta[ax]


@numba.njit(parallel=True, cache=True)
def _project_kernel(labels, slot, n_slots, bmin, vsz, src, pix, out):
    rows, cols = pix.shape[0], pix.shape[1]
    for r in numba.prange(rows):
        acc = np.zeros(n_slots)
        for c in range(cols):
            acc[:] = 0.0
            _trace(src[0], src[1], src[2], pix[r, c, 0], pix[r, c, 1], pix[r, c, 2],
                   labels, slot, bmin, vsz, n_slots, acc)
            for k in range(n_slots):
                out[k, r, c] = acc[k]


def trace_ray(volume: LabelVolume, labels, start, end) -> float:
    """Total chord length (mm) of segment ``start -> end`` through selected labels."""
    labels = sorted(int(x) for x in labels)
    slot = _slot_table(volume, labels)
    acc = np.zeros(max(len(labels), 1))
    bmin, vsz = _bounds(volume)
    _trace(float(start[0]), float(start[1]), float(start[2]),
           float(end[0]), float(end[1]), float(end[2]),
           volume.data, slot, bmin, vsz, len(labels), acc)
    return float(acc.sum())


def _bounds(volume: LabelVolume):
    vsz = np.asarray(volume.spacing, dtype=np.float64)
    bmin = np.asarray(volume.origin, dtype=np.float64) - vsz / 2.0
    return bmin, vsz


def _slot_table(volume: LabelVolume, labels) -> np.ndarray:
    top = int(volume.data.max()) if volume.data.size else 0
    slot = np.full(top + 1, -1, dtype=np.int64)
    for k, lab in enumerate(labels):
        if 0 < lab <= top:
            slot[lab] = k
    return slot


@dataclass(frozen=True)
class Projection:
    integral: GrayImage
    silhouette: BinaryMask
    per_label: dict[int, BinaryMask]
    per_label_integral: dict[int, GrayImage]
    epsilon: float


def silhouette_epsilon(volume: LabelVolume) -> float:
    return 0.5 * min(volume.spacing)


def project(volume: LabelVolume, labels, g: ConeBeamGeometry) -> Projection:
    """Path-length projection of the voxels whose label is in ``labels``.

    Per-label integrals are produced in the same traversal. An empty label
    set yields an all-zero projection.
    """
    labels = sorted(int(x) for x in labels if int(x) != 0)
    frame = place_geometry(g)
    pix = pixel_centers(g)
    n_slots = max(len(labels), 1)
    out = np.zeros((n_slots, g.det_rows, g.det_cols))
    if labels:
        bmin, vsz = _bounds(volume)
        slot = _slot_table(volume, labels)
        _project_kernel(volume.data, slot, n_slots, bmin, vsz, frame.source, pix, out)
    eps = silhouette_epsilon(volume)
    total = out.sum(axis=0) if labels else np.zeros((g.det_rows, g.det_cols))
    spacing = g.det_spacing
    per_label = {lab: BinaryMask(out[k] > eps, spacing) for k, lab in enumerate(labels)}
    per_int = {lab: GrayImage(out[k], spacing) for k, lab in enumerate(labels)}
    return Projection(
        integral=GrayImage(total, spacing),
        silhouette=BinaryMask(total > eps, spacing),
        per_label=per_label,
        per_label_integral=per_int,
        epsilon=eps,
    )


def normalized_integral(proj: Projection) -> GrayImage:
    """Path-length image scaled onto [0, 1] (the registration moving image)."""
    top = proj.integral.data.max()
    data = proj.integral.data / top if top > 0 else proj.integral.data
    return GrayImage(data, proj.integral.spacing)

