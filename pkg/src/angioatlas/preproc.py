"""DSA sequence -> binary perfusion mask.

Stages run in a fixed order: temporal average, threshold, small-component
removal, erosion + hole filling.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imgcore import BinaryMask, FrameSequence, GrayImage, raster, write_png_gray, write_png_mask

OTSU_BINS = 256


class Polarity(str, Enum):
    ContrastDark = "ContrastDark"
    ContrastBright = "ContrastBright"


@dataclass(frozen=True)
class PreprocParams:
    polarity: Polarity = Polarity.ContrastDark
    threshold: str | float = "otsu"
    min_component_px: int = 100
    erosion_radius: int = 1
    connectivity: int = 8

    def __post_init__(self):
        object.__setattr__(self, "polarity", Polarity(self.polarity))
        if isinstance(self.threshold, str):
            if self.threshold.lower() != "otsu":
                raise ValueError(f"threshold must be 'otsu' or a number, got {self.threshold!r}")
            object.__setattr__(self, "threshold", "otsu")
        elif not 0.0 < float(self.threshold) < 1.0:
            raise ValueError("fixed threshold must lie in (0, 1)")
        if self.min_component_px < 0:
            raise ValueError("min_component_px must be >= 0")
        if self.erosion_radius < 0:
            raise ValueError("erosion_radius must be >= 0")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")

    def to_json(self) -> dict:
        d = asdict(self)
        d["polarity"] = self.polarity.value
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "PreprocParams":
        return cls(**doc)


def load_params(path: str | os.PathLike) -> PreprocParams:
    return PreprocParams.from_json(json.loads(Path(path).read_text()))


class DegenerateImageError(ValueError):
    pass


def temporal_average(seq: FrameSequence) -> GrayImage:
    return GrayImage(seq.stack().mean(axis=0), seq.frames[0].spacing)


def otsu_threshold(values: np.ndarray) -> float:
    """Otsu threshold on a 256-bin histogram of ``values`` over [0, 1].

    Returns the upper edge of the last background bin. Among (numerically)
    tied maxima of the between-class variance the first is taken.
    """
    idx = np.clip(np.floor(np.asarray(values, dtype=np.float64).ravel() * OTSU_BINS), 0, OTSU_BINS - 1)
    hist = np.bincount(idx.astype(np.int64), minlength=OTSU_BINS).astype(np.float64)
    if np.count_nonzero(hist) < 2:
        raise DegenerateImageError("no separable classes")
    centers = (np.arange(OTSU_BINS) + 0.5) / OTSU_BINS
    p = hist / hist.sum()
    w0 = np.cumsum(p)[:-1]
    m0 = np.cumsum(p * centers)[:-1]
    w1 = 1.0 - w0
    mt = float(np.dot(p, centers))
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mt * w0 - m0) ** 2 / (w0 * w1)
    between[~np.isfinite(between)] = 0.0
    best = between.max()
    k = int(np.flatnonzero(between >= best - 1e-12 * best)[0])
    return (k + 1) / OTSU_BINS


def threshold(image: GrayImage, params: PreprocParams = PreprocParams()) -> BinaryMask:
    data = image.data
    if params.polarity is Polarity.ContrastDark:
        data = 1.0 - data
    t = otsu_threshold(data) if params.threshold == "otsu" else float(params.threshold)
    return BinaryMask(data > t, image.spacing)


def _structure(connectivity: int) -> np.ndarray:
    return ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)


def filter_components(mask: BinaryMask, min_component_px: int, connectivity: int = 8) -> BinaryMask:
    if min_component_px <= 0:
        return mask
    lab, n = ndimage.label(mask.data, structure=_structure(connectivity))
    if n == 0:
        return mask
    sizes = np.bincount(lab.ravel())
    keep = sizes >= min_component_px
    keep[0] = False
    return BinaryMask(keep[lab], mask.spacing)


def erode(mask: BinaryMask, radius: int) -> BinaryMask:
    if radius <= 0:
        return mask
    se = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return BinaryMask(ndimage.binary_erosion(mask.data, structure=se, border_value=0), mask.spacing)


def fill_holes(mask: BinaryMask) -> BinaryMask:
    """Fill background regions not 4-connected to the image border."""
    return BinaryMask(ndimage.binary_fill_holes(mask.data, structure=_structure(4)), mask.spacing)


def refine(mask: BinaryMask, erosion_radius: int = 1) -> BinaryMask:
    return fill_holes(erode(mask, erosion_radius))


def make_mask(
    seq: FrameSequence,
    params: PreprocParams = PreprocParams(),
    debug_dir: str | os.PathLike | None = None,
) -> BinaryMask:
    avg = temporal_average(seq)
    raw = threshold(avg, params)
    kept = filter_components(raw, params.min_component_px, params.connectivity)
    out = refine(kept, params.erosion_radius)
    if debug_dir is not None:
        debug_dir = Path(debug_dir)
        write_png_gray(avg, debug_dir / "average.png")
        write_png_mask(raw, debug_dir / "threshold_raw.png")
        write_png_mask(kept, debug_dir / "components.png")
    return out


def dice(a: BinaryMask | np.ndarray, b: BinaryMask | np.ndarray) -> float:
    a = raster(a)
    b = raster(b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total
