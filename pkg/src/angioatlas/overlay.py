"""Per-territory overlay: warp each label's path-length image and compose a label map."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .atlas import TerritoryLUT
from .imgcore import GrayImage, _save_pil, atomic_write_text
from .projector import Projection
from .register.transforms import TransformPair, apply_transform

COMPOSITE_ALPHA = 0.4


class OverlayError(ValueError):
    pass


@dataclass(frozen=True)
class TerritoryOverlay:
    label_map: np.ndarray = field(repr=False)
    legend: dict[int, tuple[str, tuple[int, int, int]]]
    spacing: tuple[float, float] = (1.0, 1.0)
    pair: TransformPair | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        ids = set(int(v) for v in np.unique(self.label_map)) - {0}
        missing = sorted(ids - set(self.legend))
        if missing:
            raise OverlayError(f"label missing from legend: {missing}")

    def legend_json(self) -> dict:
        return {str(k): {"name": self.legend[k][0], "rgb": list(self.legend[k][1])} for k in sorted(self.legend)}


def build_overlay(projection: Projection, pair: TransformPair, lut: TerritoryLUT,
                  shape: tuple[int, int] | None = None,
                  spacing: tuple[float, float] | None = None) -> TerritoryOverlay:
    """Warp every per-label integral by ``pair`` and keep the longest path per pixel.

    Ties go to the smaller label id; pixels where every warped integral is at
    most the silhouette epsilon are 0.
    """
    labels = sorted(projection.per_label_integral)
    missing = [lab for lab in labels if lab not in lut.names]
    if missing:
        raise OverlayError(f"label missing from legend: {missing}")
    first = projection.integral
    shape = shape or first.data.shape
    spacing = spacing or first.spacing
    if not labels:
        return TerritoryOverlay(np.zeros(shape, dtype=np.int32), {}, spacing, pair)
    stack = np.stack([apply_transform(projection.per_label_integral[lab], pair, shape, spacing).data
                      for lab in labels])
    # argmax returns the first maximum, i.e. the smaller id on ties
    win = np.argmax(stack, axis=0)
    best = np.take_along_axis(stack, win[None], axis=0)[0]
    ids = np.asarray(labels, dtype=np.int32)[win]
    label_map = np.where(best > projection.epsilon, ids, 0).astype(np.int32)
    legend = {lab: (lut.names[lab], lut.color(lab)) for lab in labels}
    return TerritoryOverlay(label_map, legend, spacing, pair)


def composite(ov: TerritoryOverlay, background: GrayImage) -> np.ndarray:
    """8-bit RGB: background gray with each territory blended in at 40 % alpha."""
    if background.data.shape != ov.label_map.shape:
        raise OverlayError(f"background {background.data.shape} does not match label map {ov.label_map.shape}")
    bg = np.clip(background.data, 0.0, 1.0) * 255.0
    rgb = np.repeat(bg[..., None], 3, axis=2)
    for lab, (_, color) in ov.legend.items():
        sel = ov.label_map == lab
        rgb[sel] = (1.0 - COMPOSITE_ALPHA) * rgb[sel] + COMPOSITE_ALPHA * np.asarray(color, dtype=np.float64)
    return np.rint(rgb).astype(np.uint8)


def _palette(ov: TerritoryOverlay) -> list[int]:
    pal = np.zeros((256, 3), dtype=np.uint8)
    for lab, (_, color) in ov.legend.items():
        pal[lab] = color
    return pal.ravel().tolist()


def export_overlay(ov: TerritoryOverlay, background: GrayImage, out_stem: str | os.PathLike) -> list[Path]:
    """Write ``<stem>_labels.png`` (indexed), ``<stem>_composite.png`` and ``<stem>_legend.json``."""
    if ov.label_map.max(initial=0) > 255 or ov.label_map.min(initial=0) < 0:
        raise OverlayError("indexed PNG holds label ids 0..255 only")
    rgb = composite(ov, background)
    stem = Path(out_stem)
    labels_png = stem.with_name(stem.name + "_labels.png")
    comp_png = stem.with_name(stem.name + "_composite.png")
    legend_json = stem.with_name(stem.name + "_legend.json")
    h, w = ov.label_map.shape
    idx = Image.frombytes("P", (w, h), np.ascontiguousarray(ov.label_map, dtype=np.uint8).tobytes())
    idx.putpalette(_palette(ov))
    _save_pil(idx, labels_png)
    _save_pil(Image.fromarray(rgb), comp_png)
    atomic_write_text(legend_json, json.dumps(ov.legend_json(), indent=2) + "\n")
    return [labels_png, comp_png, legend_json]


def read_label_png(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode != "P":
            raise OverlayError(f"expected an indexed PNG, got mode {img.mode}")
        return np.array(img, dtype=np.int32)


def read_legend(path: str | os.PathLike) -> dict[int, tuple[str, tuple[int, int, int]]]:
    doc = json.loads(Path(path).read_text())
    return {int(k): (v["name"], tuple(int(c) for c in v["rgb"])) for k, v in doc.items()}
