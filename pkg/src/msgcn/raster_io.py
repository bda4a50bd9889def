"""Raster loading, band stacking and change-map / tensor serialization.

All rasters are held as float64 arrays shaped ``(bands, height, width)``.
Integer image formats are scaled to [0, 1] by the maximum value their
sample depth can represent.

The raw tensor format used for external feature maps, raw rasters and
model checkpoints is a 16-byte little-endian header followed by the
payload::

    bytes 0-3    magic  b"MSGT"
    bytes 4-15   C, H, W as uint32
    bytes 16-    C*H*W float32 values, C-major then row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

PathLike = Union[str, Path]

TENSOR_MAGIC = b"MSGT"
LABELS_MAGIC = b"MSGL"
_HEADER = struct.Struct("<4sIII")

_MAGIC_BY_FORMAT = {
    "pgm": (b"P5",),
    "png": (b"\x89PNG\r\n\x1a\n",),
    "raw-f32": (TENSOR_MAGIC,),
}


class RasterError(ValueError):
    """Raised when a raster, tensor or change map cannot be read or is invalid."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Raster:
    """Multi-band image, ``data`` shaped (bands, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise RasterError(f"raster data must be (bands, height, width), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise RasterError("raster contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape[1:]


@dataclass(frozen=True)
class RasterPair:
    t1: Raster
    t2: Raster
    stacked: Raster

    @property
    def shape(self) -> Tuple[int, int]:
        return self.t1.shape


@dataclass(frozen=True)
class FeatureMaps:
    """Per-pixel feature planes, ``data`` shaped (channels, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise RasterError(f"feature maps must be (C, H, W) with C >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise RasterError("feature maps contain non-finite values")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape[1:]


@dataclass(frozen=True)
class ChangeMap:
    """Binary per-pixel change labels (1 changed, 0 unchanged).

    ``node_labels`` holds the class of each finest-scale parcel when the map
    was rendered from a segmentation; it is None for maps read from disk.
    """

    labels: np.ndarray
    node_labels: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or min(labels.shape) < 1:
            raise RasterError(f"change map must be a non-empty 2-D array, got {labels.shape}")
        if not np.isin(labels, (0, 1)).all():
            raise RasterError("change map labels must be 0 or 1")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.uint8)))
        if self.node_labels is not None:
            object.__setattr__(self, "node_labels", _frozen(np.asarray(self.node_labels, dtype=np.uint8)))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.labels.shape


def _check_magic(path: Path, fmt: str) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise RasterError(f"unreadable file: {path}: {exc}") from exc
    if not any(raw.startswith(m) for m in _MAGIC_BY_FORMAT[fmt]):
        raise RasterError(f"unreadable file: {path} is not a {fmt} file")
    return raw


def _image_to_array(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGB")
                mode = "RGB"
            if mode == "1":
                arr = np.asarray(im, dtype=np.float64)
            elif mode in ("L", "LA", "RGB", "RGBA"):
                arr = np.asarray(im, dtype=np.float64) / 255.0
            elif mode.startswith("I;16") or mode == "I":
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            else:
                raise RasterError(f"unsupported image mode {mode!r} in {path}")
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise RasterError(f"unreadable file: {path}: {exc}") from exc
    if arr.ndim == 2:
        return arr[None]
    if mode in ("LA", "RGBA"):
        arr = arr[..., :-1]
    return np.moveaxis(arr, -1, 0)


def read_tensor(path: PathLike, magic: bytes = TENSOR_MAGIC, dtype=np.float32) -> np.ndarray:
    """Read a raw tensor file into an array shaped (C, H, W)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise RasterError(f"unreadable file: {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise RasterError(f"unreadable file: {path} is shorter than the tensor header")
    got, c, h, w = _HEADER.unpack_from(raw)
    if got != magic:
        raise RasterError(f"unreadable file: {path} has magic {got!r}, expected {magic!r}")
    dt = np.dtype(dtype).newbyteorder("<")
    expected = c * h * w * dt.itemsize
    if len(raw) - _HEADER.size != expected:
        raise RasterError(
            f"dimension mismatch in {path}: header says {c}x{h}x{w} "
            f"({expected} bytes) but payload has {len(raw) - _HEADER.size} bytes")
    return np.frombuffer(raw, dtype=dt, offset=_HEADER.size).reshape(c, h, w)


def write_tensor(path: PathLike, data: np.ndarray, magic: bytes = TENSOR_MAGIC, dtype=np.float32) -> None:
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3:
        raise RasterError(f"tensor must be 2-D or 3-D, got shape {data.shape}")
    dt = np.dtype(dtype).newbyteorder("<")
    c, h, w = data.shape
    payload = np.ascontiguousarray(data, dtype=dt).tobytes()
    try:
        Path(path).write_bytes(_HEADER.pack(magic, c, h, w) + payload)
    except OSError as exc:
        raise RasterError(f"unwritable path: {path}: {exc}") from exc


def load_raster(path: PathLike, format: Optional[str] = None) -> Raster:
    """Load a raster from a PGM (P5), PNG or raw-f32 tensor file.

    ``format`` defaults to the file suffix (``.pgm``, ``.png``, ``.raw``/``.f32``).
    """
    path = Path(path)
    fmt = (format or _format_from_suffix(path)).lower()
    if fmt not in _MAGIC_BY_FORMAT:
        raise RasterError(f"unknown raster format {fmt!r}")
    if fmt == "raw-f32":
        data = read_tensor(path).astype(np.float64)
    else:
        _check_magic(path, fmt)
        data = _image_to_array(path)
    return Raster(data)


def _format_from_suffix(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        return "pgm"
    if suffix == ".png":
        return "png"
    if suffix in (".raw", ".f32", ".bin"):
        return "raw-f32"
    raise RasterError(f"cannot infer raster format from suffix {suffix!r}; pass format=")


def save_raster(raster: Raster, path: PathLike) -> None:
    write_tensor(path, raster.data)


def stack_pair(t1: Raster, t2: Raster) -> RasterPair:
    """Band-stack two co-registered rasters, t1 bands first."""
    if t1.shape != t2.shape:
        raise RasterError(f"size mismatch: t1 is {t1.shape}, t2 is {t2.shape}")
    return RasterPair(t1, t2, Raster(np.concatenate([t1.data, t2.data], axis=0)))


def write_change_map(change_map: ChangeMap, path: PathLike) -> None:
    """Write a change map as an 8-bit PGM with changed=255, unchanged=0."""
    img = Image.fromarray(change_map.labels * np.uint8(255), mode="L")
    try:
        img.save(path, format="PPM")
    except OSError as exc:
        raise RasterError(f"unwritable path: {path}: {exc}") from exc


def load_change_map(path: PathLike) -> ChangeMap:
    """Read a binary map; any nonzero pixel is treated as changed."""
    path = Path(path)
    fmt = _format_from_suffix(path)
    if fmt == "raw-f32":
        data = read_tensor(path)[0]
    else:
        _check_magic(path, fmt)
        data = _image_to_array(path)[0]
    return ChangeMap((data > 0).astype(np.uint8))


def load_feature_maps(path: PathLike, expected_dims: Optional[Tuple[int, int, int]] = None) -> FeatureMaps:
    data = read_tensor(path)
    if expected_dims is not None:
        exp = tuple(expected_dims)
        # channel count may be left unspecified with None/0
        if (exp[0] and exp[0] != data.shape[0]) or tuple(exp[1:]) != data.shape[1:]:
            raise RasterError(f"dimension mismatch: expected {exp}, file has {data.shape}")
    if not np.all(np.isfinite(data)):
        raise RasterError(f"feature maps in {path} contain non-finite values")
    return FeatureMaps(data)


def save_feature_maps(maps: FeatureMaps, path: PathLike) -> None:
    write_tensor(path, maps.data)


def write_label_image(labels: np.ndarray, path: PathLike) -> None:
    """Dump a segmentation label image as a raw uint32 plane."""
    write_tensor(path, np.asarray(labels)[None], magic=LABELS_MAGIC, dtype=np.uint32)


def read_label_image(path: PathLike) -> np.ndarray:
    return read_tensor(path, magic=LABELS_MAGIC, dtype=np.uint32)[0].astype(np.int64)
