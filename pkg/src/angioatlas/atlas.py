"""Territory lookup: which atlas labels are perfused for a given injection site."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .imgcore import LabelVolume, atomic_write_text


class InjectionSite(str, Enum):
    LeftAnterior = "LeftAnterior"
    RightAnterior = "RightAnterior"
    Posterior = "Posterior"


class ViewLabel(str, Enum):
    Anteroposterior = "Anteroposterior"
    Lateral = "Lateral"


class LUTError(ValueError):
    pass


# 12-color qualitative palette, assigned to labels in ascending id order
PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 190), (0, 128, 128), (170, 110, 40),
)


@dataclass(frozen=True)
class TerritoryLUT:
    entries: dict[InjectionSite, frozenset[int]]
    names: dict[int, str]
    colors: dict[int, tuple[int, int, int]] = field(default_factory=dict)

    def __post_init__(self):
        for site, ids in self.entries.items():
            if not ids:
                raise LUTError(f"empty label set for {site.value}")
            if 0 in ids:
                raise LUTError("label 0 is background and cannot be a territory")
            missing = sorted(i for i in ids if i not in self.names)
            if missing:
                raise LUTError(f"label {missing[0]} absent from names")
        if InjectionSite.Posterior not in self.entries:
            raise LUTError("LUT must define the Posterior circulation")

    def color(self, label: int) -> tuple[int, int, int]:
        if label in self.colors:
            return self.colors[label]
        order = sorted(self.names)
        idx = order.index(label) if label in order else label
        return PALETTE[idx % len(PALETTE)]

    def to_json(self) -> dict:
        out = {
            "names": {str(k): self.names[k] for k in sorted(self.names)},
            "entries": {s.value: sorted(self.entries[s]) for s in InjectionSite if s in self.entries},
        }
        if self.colors:
            out["colors"] = {str(k): list(self.colors[k]) for k in sorted(self.colors)}
        return out


def lut_from_dict(doc: dict) -> TerritoryLUT:
    try:
        names = {int(k): str(v) for k, v in doc.get("names", {}).items()}
    except ValueError as exc:
        raise LUTError(f"non-integer label id in names: {exc}") from exc
    entries = {}
    for key, ids in doc.get("entries", {}).items():
        try:
            site = InjectionSite(key)
        except ValueError:
            raise LUTError(f"unknown site key {key!r}") from None
        entries[site] = frozenset(int(i) for i in ids)
    colors = {int(k): tuple(int(c) for c in v) for k, v in doc.get("colors", {}).items()}
    return TerritoryLUT(entries, names, colors)


def load_lut(path: str | os.PathLike) -> TerritoryLUT:
    return lut_from_dict(json.loads(Path(path).read_text()))


def save_lut(lut: TerritoryLUT, path: str | os.PathLike) -> None:
    atomic_write_text(path, json.dumps(lut.to_json(), indent=2) + "\n")


def lut_from_descriptor(path: str | os.PathLike) -> TerritoryLUT:
    """Build a LUT from a label descriptor table.

    The descriptor is a CSV/TSV with columns ``id``, ``name`` and ``site``
    (one of the InjectionSite values, or empty for labels not assigned to any
    injection territory).
    """
    text = Path(path).read_text()
    dialect = csv.excel_tab if "\t" in text.splitlines()[0] else csv.excel
    rows = list(csv.DictReader(text.splitlines(), dialect=dialect))
    names, entries = {}, {}
    for row in rows:
        label = int(row["id"])
        names[label] = row["name"].strip()
        site = (row.get("site") or "").strip()
        if site:
            try:
                entries.setdefault(InjectionSite(site), set()).add(label)
            except ValueError:
                raise LUTError(f"unknown site key {site!r}") from None
    return TerritoryLUT({k: frozenset(v) for k, v in entries.items()}, names)


def select_labels(lut: TerritoryLUT, site: InjectionSite | str) -> frozenset[int]:
    """Label ids perfused from ``site``.

    The posterior circulation is returned as a single group: the vertebral
    arteries merge into the basilar, so it is never subdivided.
    """
    site = InjectionSite(site)
    if site not in lut.entries:
        raise LUTError(f"site {site.value} missing from LUT")
    return lut.entries[site]


def mask_labels(volume: LabelVolume, labels) -> LabelVolume:
    keep = np.isin(volume.data, np.fromiter(labels, dtype=np.int64, count=len(labels)))
    return LabelVolume(np.where(keep, volume.data, 0), volume.spacing, volume.origin)


def uncovered_labels(lut: TerritoryLUT) -> set[int]:
    """Named labels not reachable from any site (configuration completeness check)."""
    covered = set().union(*lut.entries.values())
    return {k for k in lut.names if k != 0} - covered
