"""Raster types and file I/O: 2D gray images, binary masks, labeled volumes.

Images store pixels as ``data[row, col]`` (row-major, x fastest). Pixel
``(row, col)`` has its center at physical position ``(col * sx, row * sy)``.
Volumes store voxels as ``data[z, y, x]`` and carry an explicit origin.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image


class ImageFormatError(ValueError):
    """Raised on malformed or unsupported image/volume files."""


@dataclass(frozen=True)
class GrayImage:
    data: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"GrayImage needs a 2D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("GrayImage intensities must be finite")
        if min(self.spacing) <= 0:
            raise ValueError("spacing components must be > 0")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", (float(self.spacing[0]), float(self.spacing[1])))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def extent(self) -> tuple[float, float]:
        """Physical span between first and last pixel centers (mm)."""
        return ((self.width - 1) * self.spacing[0], (self.height - 1) * self.spacing[1])

    @property
    def center(self) -> tuple[float, float]:
        ex, ey = self.extent
        return (ex / 2.0, ey / 2.0)


@dataclass(frozen=True)
class BinaryMask:
    data: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=bool)
        if arr.ndim != 2:
            raise ValueError(f"BinaryMask needs a 2D array, got shape {arr.shape}")
        if min(self.spacing) <= 0:
            raise ValueError("spacing components must be > 0")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", (float(self.spacing[0]), float(self.spacing[1])))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def as_gray(self) -> GrayImage:
        return GrayImage(self.data.astype(np.float64), self.spacing)


@dataclass(frozen=True)
class LabelVolume:
    """Integer label grid; ``data`` is indexed ``[z, y, x]``. Label 0 is background."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] | None = None

    def __post_init__(self):
        arr = np.array(self.data)
        if arr.ndim != 3:
            raise ValueError(f"LabelVolume needs a 3D array, got shape {arr.shape}")
        if arr.size and arr.min() < 0:
            raise ValueError("labels must be non-negative")
        arr = arr.astype(np.int32)
        if min(self.spacing) <= 0:
            raise ValueError("spacing components must be > 0")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.origin is None:
            # center the volume on the world origin (isocenter)
            nx, ny, nz = self.dims
            sx, sy, sz = self.spacing
            origin = (-(nx - 1) * sx / 2.0, -(ny - 1) * sy / 2.0, -(nz - 1) * sz / 2.0)
        else:
            origin = tuple(float(o) for o in self.origin)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def labels(self) -> set[int]:
        vals = np.unique(self.data)
        return {int(v) for v in vals if v != 0}


@dataclass(frozen=True)
class FrameSequence:
    frames: tuple[GrayImage, ...]
    frame_interval: float | None = None

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValueError("a frame sequence needs at least one frame")
        shape, spacing = frames[0].data.shape, frames[0].spacing
        for f in frames[1:]:
            if f.data.shape != shape or f.spacing != spacing:
                raise ValueError("mixed dimensions in frame sequence")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def stack(self) -> np.ndarray:
        return np.stack([f.data for f in self.frames])


# ---------------------------------------------------------------------------
# atomic writes

def raster(img) -> np.ndarray:
    """The pixel array of a GrayImage/BinaryMask, or ``img`` itself as an array."""
    if isinstance(img, (GrayImage, BinaryMask)):
        return img.data
    return np.asarray(img)


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _save_pil(img: Image.Image, path: str | os.PathLike, **kwargs) -> None:
    import io

    buf = io.BytesIO()
    img.save(buf, format="PNG", **kwargs)
    atomic_write_bytes(path, buf.getvalue())


# ---------------------------------------------------------------------------
# NIfTI-1

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32, 512: np.uint16}
_NIFTI_BITPIX = {2: 8, 4: 16, 16: 32, 512: 16}


def read_nifti(path: str | os.PathLike) -> LabelVolume:
    """Read an uncompressed little-endian NIfTI-1 file as a label volume.

    Orientation quaternions are ignored: the stored axis order is taken as
    world order. The origin comes from ``qoffset_x/y/z`` when any is non-zero,
    otherwise the volume is centered on the world origin.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 348:
        raise ImageFormatError("truncated header")
    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr != 348:
        raise ImageFormatError(f"sizeof_hdr must be 348, got {sizeof_hdr}")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise ImageFormatError(f"bad magic {magic!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    if not 1 <= dim[0] <= 7:
        raise ImageFormatError("big-endian or corrupt header (dim[0] out of 1..7)")
    if dim[0] != 3:
        raise ImageFormatError(f"expected a 3D volume, dim[0] = {dim[0]}")
    nx, ny, nz = dim[1:4]
    if min(nx, ny, nz) < 1:
        raise ImageFormatError(f"non-positive dimensions {dim[1:4]}")
    datatype, bitpix = struct.unpack_from("<2h", raw, 70)
    if datatype not in _NIFTI_DTYPES:
        raise ImageFormatError(f"unsupported datatype {datatype}")
    if bitpix != _NIFTI_BITPIX[datatype]:
        raise ImageFormatError(f"bitpix {bitpix} inconsistent with datatype {datatype}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset = struct.unpack_from("<f", raw, 108)[0]
    qoffset = struct.unpack_from("<3f", raw, 268)

    if magic == b"n+1\x00":
        offset = int(vox_offset)
        if offset < 348:
            offset = 352
        payload = raw
    else:
        # detached .img next to the .hdr
        img_path = Path(path).with_suffix(".img")
        offset = int(vox_offset)
        payload = img_path.read_bytes()
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder("<")
    count = nx * ny * nz
    need = offset + count * dtype.itemsize
    if len(payload) < need:
        raise ImageFormatError("truncated payload")
    vals = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    if datatype == 16:
        if not np.all(np.isfinite(vals)):
            raise ImageFormatError("non-finite voxel values")
        vals = np.rint(vals)
    if vals.size and vals.min() < 0:
        raise ImageFormatError("negative labels")
    data = vals.astype(np.int32).reshape(nz, ny, nx)

    spacing = tuple(abs(float(p)) if p else 1.0 for p in pixdim[1:4])
    origin = tuple(float(q) for q in qoffset) if any(qoffset) else None
    return LabelVolume(data, spacing, origin)


def write_nifti(volume: LabelVolume, path: str | os.PathLike, datatype: int = 4) -> None:
    """Write ``volume`` as a single-file NIfTI-1 (used for phantoms and tests)."""
    if datatype not in _NIFTI_DTYPES:
        raise ImageFormatError(f"unsupported datatype {datatype}")
    nx, ny, nz = volume.dims
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, _NIFTI_BITPIX[datatype])
    struct.pack_into("<8f", hdr, 76, 1.0, *volume.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<h", hdr, 254, 1)  # sform_code
    struct.pack_into("<3f", hdr, 268, *volume.origin)
    hdr[344:348] = b"n+1\x00"
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder("<")
    atomic_write_bytes(path, bytes(hdr) + volume.data.astype(dtype).tobytes())


# ---------------------------------------------------------------------------
# PNG

def read_png_gray(path: str | os.PathLike, spacing: tuple[float, float] = (1.0, 1.0)) -> GrayImage:
    """Read an 8- or 16-bit grayscale PNG, mapping intensities onto [0, 1]."""
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            arr = np.array(img)
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"unreadable image {path}: {exc}") from exc
    if mode == "L":
        scale = 255.0
    elif mode in ("I;16", "I;16B", "I;16L", "I"):
        # Pillow opens 16-bit grayscale PNGs as I;16 or I depending on version
        scale = 65535.0
    else:
        raise ImageFormatError(f"non-grayscale PNG (mode {mode})")
    return GrayImage(arr.astype(np.float64) / scale, spacing)


def write_png_gray(image: GrayImage, path: str | os.PathLike) -> None:
    """Write a 16-bit grayscale PNG; values are clipped to [0, 1]."""
    q = np.rint(np.clip(image.data, 0.0, 1.0) * 65535.0).astype(np.uint16)
    _save_pil(Image.fromarray(q), path)


def write_png_mask(mask: BinaryMask, path: str | os.PathLike) -> None:
    _save_pil(Image.fromarray(mask.data.astype(np.uint8) * 255), path)


def read_png_mask(path: str | os.PathLike, spacing=(1.0, 1.0)) -> BinaryMask:
    img = read_png_gray(path, spacing)
    return BinaryMask(img.data > 0.5, spacing)


def load_frames(
    directory: str | os.PathLike,
    frame_range: Sequence[int] | None = None,
    spacing: tuple[float, float] = (1.0, 1.0),
    frame_interval: float | None = None,
) -> FrameSequence:
    """Load ``*.png`` frames in lexicographic order, keeping ``[first, last]`` inclusive."""
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise ValueError(f"empty directory: no PNG frames in {directory}")
    if frame_range is not None:
        first, last = int(frame_range[0]), int(frame_range[1])
        first = max(first, 0)
        last = min(last, len(files) - 1)
        if first > last:
            raise ValueError(f"empty range {list(frame_range)} for {len(files)} frames")
        files = files[first : last + 1]
    frames = [read_png_gray(p, spacing) for p in files]
    shape = frames[0].data.shape
    if any(f.data.shape != shape for f in frames):
        raise ValueError("mixed dimensions in frame directory")
    return FrameSequence(tuple(frames), frame_interval)


def write_frames(seq: FrameSequence, directory: str | os.PathLike, prefix: str = "frame") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(len(seq))))
    paths = []
    for i, frame in enumerate(seq.frames):
        p = directory / f"{prefix}_{i:0{width}d}.png"
        write_png_gray(frame, p)
        paths.append(p)
    return paths
