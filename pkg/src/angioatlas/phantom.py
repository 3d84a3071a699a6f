"""Seeded synthetic cases with known geometry, warp and perfusion mask.

A phantom atlas is a set of disjoint superellipsoid blobs inside an
ellipsoidal envelope. Labels cycle through Posterior, LeftAnterior and
RightAnterior; each blob is placed in its site's region (posterior half,
or the anterior-left / anterior-right quadrant).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .atlas import InjectionSite, TerritoryLUT, ViewLabel, save_lut, select_labels
from .imgcore import (
    BinaryMask,
    FrameSequence,
    GrayImage,
    LabelVolume,
    atomic_write_bytes,
    atomic_write_text,
    write_frames,
    write_nifti,
    write_png_mask,
)
from .preproc import PreprocParams
from .projector import ConeBeamGeometry, Projection, project, save_geometry
from .register.transforms import Affine2, BSplineField2, TransformPair, apply_transform, dumps_exact, pair_to_dict

SITE_CYCLE = (InjectionSite.Posterior, InjectionSite.LeftAnterior, InjectionSite.RightAnterior)

# time-intensity curve: gamma variate peaking at 40% of the run
GAMMA_ALPHA = 3.0
GAMMA_PEAK_FRACTION = 0.4
# subtracted-frame intensities: background level and maximum contrast depth
FRAME_BACKGROUND = 0.75
FRAME_CONTRAST = 0.6
# opacity 1 - exp(-L / (OPACITY_LENGTH * voxel)) saturates within a few voxels of path
OPACITY_LENGTH = 0.25
BSPLINE_PEAK_FRACTION = (0.75, 1.0)


class PhantomError(ValueError):
    pass


def site_of_label(label: int) -> InjectionSite:
    return SITE_CYCLE[(label - 1) % len(SITE_CYCLE)]


def synth_atlas(dims=(64, 64, 64), n_territories: int = 6, seed: int = 0,
                spacing=None, max_attempts: int = 25) -> LabelVolume:
    """Disjoint blob-union territories labeled 1..n, centered on the isocenter."""
    if isinstance(dims, int):
        dims = (dims, dims, dims)
    nx, ny, nz = (int(d) for d in dims)
    if min(nx, ny, nz) < 32:
        raise PhantomError("atlas dims must be >= 32 per axis")
    if n_territories < 2:
        raise PhantomError("need at least 2 territories")
    if spacing is None:
        spacing = (160.0 / nx, 160.0 / ny, 160.0 / nz)
    rng = np.random.default_rng(seed)
    z, y, x = np.meshgrid(*(np.linspace(-1.0, 1.0, n) for n in (nz, ny, nx)), indexing="ij")
    envelope = (x / 0.72) ** 2 + (y / 0.80) ** 2 + (z / 0.62) ** 2 <= 1.0
    min_count = 0.01 * nx * ny * nz

    for _ in range(max_attempts):
        centers = []
        claims = []
        for label in range(1, n_territories + 1):
            site = site_of_label(label)
            c = _sample_center(rng, site, centers)
            centers.append(c)
            blob = np.zeros(x.shape, dtype=bool)
            for _part in range(2):
                off = rng.uniform(-0.12, 0.12, 3) if _part else np.zeros(3)
                radii = rng.uniform(0.24, 0.40, 3)
                expo = rng.uniform(2.0, 3.0)
                ang = rng.uniform(0, math.pi)
                ca, sa = math.cos(ang), math.sin(ang)
                dx, dy, dz = x - (c[0] + off[0]), y - (c[1] + off[1]), z - (c[2] + off[2])
                rx, ry = ca * dx + sa * dy, -sa * dx + ca * dy
                blob |= (np.abs(rx / radii[0]) ** expo + np.abs(ry / radii[1]) ** expo
                         + np.abs(dz / radii[2]) ** expo) <= 1.0
            claims.append(blob & envelope)
        claims = np.stack(claims)
        dist = np.stack([(x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2 for c in centers])
        dist = np.where(claims, dist, np.inf)
        owner = np.argmin(dist, axis=0)
        data = np.where(claims.any(axis=0), owner + 1, 0).astype(np.int32)
        counts = np.bincount(data.ravel(), minlength=n_territories + 1)[1:]
        if np.all(counts >= min_count):
            return LabelVolume(data, spacing)
    raise PhantomError(f"territories failing to fit after {max_attempts} attempts")


def _sample_center(rng, site: InjectionSite, taken) -> np.ndarray:
    for _ in range(1000):
        c = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.55, 0.55), rng.uniform(-0.3, 0.3)])
        if site is InjectionSite.Posterior and c[1] > -0.1:
            continue
        if site is not InjectionSite.Posterior and c[1] < 0.1:
            continue
        if site is InjectionSite.LeftAnterior and c[0] > -0.1:
            continue
        if site is InjectionSite.RightAnterior and c[0] < 0.1:
            continue
        if all(np.linalg.norm(c - t) > 0.3 for t in taken):
            return c
    raise PhantomError("territories failing to fit: cannot place seed centers")


def phantom_descriptor(volume: LabelVolume) -> str:
    """Label descriptor table (id, name, site) for a phantom atlas."""
    rows = ["id\tname\tsite"]
    for label in sorted(volume.labels()):
        site = site_of_label(label)
        rows.append(f"{label}\tterritory_{label}_{site.value}\t{site.value}")
    return "\n".join(rows) + "\n"


def phantom_lut(volume: LabelVolume) -> TerritoryLUT:
    labels = sorted(volume.labels())
    entries: dict[InjectionSite, set[int]] = {}
    for label in labels:
        entries.setdefault(site_of_label(label), set()).add(label)
    names = {label: f"territory_{label}_{site_of_label(label).value}" for label in labels}
    return TerritoryLUT({k: frozenset(v) for k, v in entries.items()}, names)


def phantom_geometry(view: ViewLabel | str = ViewLabel.Anteroposterior, det: int = 128,
                     field_of_view: float = 307.2) -> ConeBeamGeometry:
    s = field_of_view / det
    return ConeBeamGeometry.for_view(view, sid=750.0, sdd=1200.0, det_cols=det, det_rows=det,
                                     det_spacing=(s, s))


@dataclass(frozen=True)
class WarpBounds:
    max_translation_px: float = 20.0
    max_rotation_deg: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_bspline_px: float = 8.0
    bspline_cells: int = 3

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 <= self.max_translation_px <= 20:
            raise PhantomError("invalid bounds: |translation| must be <= 20 px")
        if not 0 <= self.max_rotation_deg <= 10:
            raise PhantomError("invalid bounds: |rotation| must be <= 10 deg")
        if not 0.9 <= lo <= hi <= 1.1:
            raise PhantomError("invalid bounds: scale must lie in [0.9, 1.1]")
        if not 0 <= self.max_bspline_px <= 8:
            raise PhantomError("invalid bounds: B-spline displacement must be <= 8 px")
        if self.bspline_cells < 1:
            raise PhantomError("invalid bounds: bspline_cells must be >= 1")

    @classmethod
    def identity(cls) -> "WarpBounds":
        return cls(0.0, 0.0, (1.0, 1.0), 0.0)

    @classmethod
    def affine_only(cls) -> "WarpBounds":
        return cls(max_bspline_px=0.0)


@dataclass(frozen=True)
class PhantomCase:
    atlas: LabelVolume
    geometry: ConeBeamGeometry
    site: InjectionSite
    view: ViewLabel
    true_affine: Affine2
    true_bspline: BSplineField2 | None
    true_field: np.ndarray = field(repr=False)  # (rows, cols, 2) displacement in px
    frames: FrameSequence = field(repr=False)
    true_mask: BinaryMask = field(repr=False)
    seed: int = 0
    projection: Projection | None = field(default=None, repr=False)

    @property
    def true_pair(self) -> TransformPair:
        return TransformPair(self.true_affine, self.true_bspline)


def gamma_variate(n_frames: int) -> np.ndarray:
    t = np.arange(1, n_frames + 1, dtype=np.float64)
    tp = max(GAMMA_PEAK_FRACTION * n_frames, 1.0)
    return (t / tp) ** GAMMA_ALPHA * np.exp(GAMMA_ALPHA * (1.0 - t / tp))


def sample_warp(bounds: WarpBounds, image: GrayImage, rng) -> tuple[Affine2, BSplineField2 | None]:
    sx, sy = image.spacing
    angle = rng.uniform(-bounds.max_rotation_deg, bounds.max_rotation_deg)
    scale = rng.uniform(*bounds.scale_range)
    phi = rng.uniform(0.0, 2.0 * math.pi)
    mag = bounds.max_translation_px * math.sqrt(rng.uniform(0.0, 1.0))
    t = (mag * math.cos(phi) * sx, mag * math.sin(phi) * sy)
    affine = Affine2.similarity(angle, scale, t, image.center)
    n = bounds.bspline_cells + 3
    coeffs = rng.normal(size=(n, n, 2))
    if bounds.max_bspline_px <= 0:
        return affine, None
    ex, ey = image.extent
    fld = BSplineField2((0.0, 0.0, ex, ey), (bounds.bspline_cells,) * 2, coeffs)
    # taper the coefficients towards the silhouette so the displacement lands
    # on the territories instead of the empty image corners
    rows, cols = np.nonzero(image.data > 0)
    if rows.size:
        pts = np.stack([cols * sx, rows * sy], axis=1)
        ctr = pts.mean(axis=0)
        rad = float(np.sqrt(np.mean(np.sum((pts - ctr) ** 2, axis=1))))
        ox, oy = fld.origin
        gx, gy = fld.spacing
        r, c = np.mgrid[0:n, 0:n]
        dist2 = (ox + c * gx - ctr[0]) ** 2 + (oy + r * gy - ctr[1]) ** 2
        coeffs = coeffs * np.exp(-dist2 / (2.0 * rad**2))[..., None]
        fld = fld.with_coeffs(coeffs)
    xs, ys = np.arange(image.width) * sx, np.arange(image.height) * sy
    d = fld.evaluate_grid(xs, ys) / np.array([sx, sy])
    peak = float(np.max(np.hypot(d[..., 0], d[..., 1])))
    target = bounds.max_bspline_px * rng.uniform(*BSPLINE_PEAK_FRACTION)
    return affine, fld.with_coeffs(coeffs * (target / peak))


def dense_field_px(fld: BSplineField2 | None, image: GrayImage) -> np.ndarray:
    if fld is None:
        return np.zeros(image.data.shape + (2,))
    sx, sy = image.spacing
    xs, ys = np.arange(image.width) * sx, np.arange(image.height) * sy
    return fld.evaluate_grid(xs, ys) / np.array([sx, sy])


def make_case(atlas: LabelVolume, geometry: ConeBeamGeometry, lut: TerritoryLUT | None = None,
              site: InjectionSite | str = InjectionSite.LeftAnterior,
              view: ViewLabel | str = ViewLabel.Anteroposterior,
              bounds: WarpBounds = WarpBounds(), noise_sigma: float = 0.05,
              n_frames: int = 12, seed: int = 0) -> PhantomCase:
    """Project, warp, modulate over time, add noise, quantize to 16 bit."""
    if noise_sigma < 0 or n_frames < 1:
        raise PhantomError("invalid bounds: noise_sigma >= 0 and n_frames >= 1 required")
    site, view = InjectionSite(site), ViewLabel(view)
    lut = lut or phantom_lut(atlas)
    proj = project(atlas, select_labels(lut, site), geometry)
    rng = np.random.default_rng(seed)
    affine, fld = sample_warp(bounds, proj.integral, rng)
    pair = TransformPair(affine, fld)
    warped = apply_transform(proj.integral, pair).data
    # the truth is the warped silhouette binarized at 0.5, the same operand the
    # overlay SSIM uses; the contrast edge of the frames sits on that boundary too
    coverage = apply_transform(proj.silhouette.as_gray(), pair).data
    true_mask = BinaryMask(coverage > 0.5, geometry.det_spacing)

    opacity = coverage * (1.0 - np.exp(-warped / (OPACITY_LENGTH * min(atlas.spacing))))
    curve = gamma_variate(n_frames)
    frames = []
    for c in curve:
        img = FRAME_BACKGROUND - FRAME_CONTRAST * c * opacity
        if noise_sigma > 0:
            img = img + rng.normal(0.0, noise_sigma, img.shape)
        img = np.rint(np.clip(img, 0.0, 1.0) * 65535.0) / 65535.0
        frames.append(GrayImage(img, geometry.det_spacing))
    return PhantomCase(
        atlas=atlas, geometry=geometry, site=site, view=view, true_affine=affine,
        true_bspline=fld, true_field=dense_field_px(fld, proj.integral),
        frames=FrameSequence(tuple(frames)), true_mask=true_mask, seed=seed, projection=proj,
    )


def write_case(case: PhantomCase, directory: str | os.PathLike, lut: TerritoryLUT | None = None) -> Path:
    """Write a self-contained case directory runnable by ``angioatlas pipeline``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lut = lut or phantom_lut(case.atlas)
    write_frames(case.frames, directory / "frames")
    save_geometry(case.geometry, directory / "geometry.json")
    write_nifti(case.atlas, directory / "atlas.nii")
    save_lut(lut, directory / "lut.json")
    atomic_write_text(directory / "atlas_labels.tsv", phantom_descriptor(case.atlas))
    write_png_mask(case.true_mask, directory / "true_mask.png")
    atomic_write_bytes(directory / "true_field.f32", case.true_field.astype("<f4").tobytes())
    truth = pair_to_dict(case.true_pair)
    truth.pop("config", None)
    truth.pop("final_cost", None)
    truth = {
        "seed": case.seed,
        "site": case.site.value,
        "view": case.view.value,
        **truth,
        "field": {"file": "true_field.f32", "shape": list(case.true_field.shape),
                  "dtype": "float32-le", "units": "px", "layout": "row-major [row, col, (dx, dy)]"},
    }
    atomic_write_text(directory / "truth.json", dumps_exact(truth) + "\n")
    config = {
        "case_id": directory.name,
        "atlas": "atlas.nii",
        "lut": "lut.json",
        "frames": "frames",
        "geometry": "geometry.json",
        "output": "out",
        "site": case.site.value,
        "view": case.view.value,
        # phantom frames carry no vessel-edge fringe, so the mask is not eroded
        "preproc": PreprocParams(erosion_radius=0).to_json(),
    }
    atomic_write_text(directory / "case.json", json.dumps(config, indent=2) + "\n")
    return directory


def read_truth(directory: str | os.PathLike) -> tuple[TransformPair, np.ndarray]:
    from .register.transforms import pair_from_dict

    directory = Path(directory)
    doc = json.loads((directory / "truth.json").read_text())
    pair = pair_from_dict({**doc, "config": {}, "final_cost": 0.0})
    meta = doc["field"]
    raw = np.frombuffer((directory / meta["file"]).read_bytes(), dtype="<f4")
    return pair, raw.reshape(meta["shape"]).astype(np.float64)
