"""Raster primitives: binary masks, scalar fields, codecs and eye orientation.

Masks are 2-D ``bool`` arrays indexed ``[row, col]`` and fields are 2-D
``float64`` arrays.  Bundles freeze their arrays so they can be shared between
workers without copying defensively.
"""
from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, DimMismatch, NonFiniteField, UnsupportedFormat


class StructureKind(str, enum.Enum):
    ARTERY = "artery"
    VEIN = "vein"
    OPTIC_DISC = "disc"
    OPTIC_CUP = "cup"


STRUCTURES = tuple(StructureKind)


def check_mask(mask, name="mask"):
    """Return ``mask`` as a 2-D boolean array, raising on bad shapes."""
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} must be a non-empty 2-D raster, got shape {arr.shape}")
    if arr.dtype != bool:
        arr = arr != 0
    return arr


def check_field(values, name="field"):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} must be a non-empty 2-D raster, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteField(f"{name} contains NaN or infinite values")
    return arr


def check_same_shape(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise DimMismatch(f"raster dimensions differ: {sorted(shapes)}")


# --- PNG masks -------------------------------------------------------------

def decode_mask(data: bytes) -> np.ndarray:
    """Decode an 8-bit grayscale or palette PNG; any nonzero pixel is foreground."""
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"not a readable PNG: {exc}") from exc
    if img.format != "PNG":
        raise DecodeError(f"expected PNG, got {img.format}")
    if img.mode not in ("L", "P"):
        raise UnsupportedFormat(f"unsupported PNG mode {img.mode!r}; need 8-bit grayscale or indexed")
    # palette images compare raw indices, not palette colours
    return np.asarray(img) != 0


def encode_mask(mask, compress_level=1) -> bytes:
    arr = check_mask(mask)
    buf = io.BytesIO()
    # sparse binary masks compress well even at the fastest zlib level
    Image.fromarray(arr.astype(np.uint8) * 255, mode="L").save(buf, format="PNG", compress_level=compress_level)
    return buf.getvalue()


def read_mask(path) -> np.ndarray:
    return decode_mask(Path(path).read_bytes())


def write_mask(path, mask):
    Path(path).write_bytes(encode_mask(mask))


# --- PFM scalar fields -----------------------------------------------------

def _header_lines(data: bytes, count: int):
    lines, pos = [], 0
    for _ in range(count):
        end = data.find(b"\n", pos)
        if end < 0:
            raise DecodeError("truncated PFM header")
        lines.append(data[pos:end].strip())
        pos = end + 1
    return lines, pos


def decode_scalar_field(data: bytes) -> np.ndarray:
    """Decode a grayscale PFM into a top-down ``float64`` array."""
    (magic, dims, scale), offset = _header_lines(data, 3)
    if magic == b"PF":
        raise UnsupportedFormat("colour PFM is not supported; expected 'Pf'")
    if magic != b"Pf":
        raise DecodeError(f"bad PFM magic {magic!r}")
    try:
        width, height = (int(tok) for tok in dims.split())
        scale = float(scale)
    except ValueError as exc:
        raise DecodeError(f"malformed PFM header: {exc}") from exc
    if width <= 0 or height <= 0 or scale == 0.0:
        raise DecodeError("PFM dimensions must be positive and scale nonzero")
    dtype = "<f4" if scale < 0 else ">f4"
    payload = data[offset:]
    if len(payload) != 4 * width * height:
        raise DecodeError(f"PFM payload has {len(payload)} bytes, expected {4 * width * height}")
    values = np.frombuffer(payload, dtype=dtype).reshape(height, width)[::-1]
    values = values.astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteField("PFM contains NaN or infinite pixels")
    return values


def encode_scalar_field(values) -> bytes:
    """Little-endian PFM; rows are written bottom-up as the format requires."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("field must be 2-D")
    header = f"Pf\n{arr.shape[1]} {arr.shape[0]}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes()


def read_field(path) -> np.ndarray:
    return decode_scalar_field(Path(path).read_bytes())


def write_field(path, values):
    Path(path).write_bytes(encode_scalar_field(values))


# --- raster operations -----------------------------------------------------

def normalize_minmax(values) -> np.ndarray:
    """Rescale linearly to [0, 1]; a constant field becomes all zeros."""
    arr = check_field(values)
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    if lo == 0.0 and hi == 1.0:
        return arr.copy()
    out = (arr - lo) / (hi - lo)
    # keep the extremes exact despite rounding
    out[arr == hi] = 1.0
    return out


def flip_horizontal(raster) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(raster)[:, ::-1])


def overlap_count(a, b) -> int:
    a, b = check_mask(a, "a"), check_mask(b, "b")
    check_same_shape(a, b)
    return int(np.count_nonzero(a & b))


def _frozen(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SegmentationBundle:
    """The four structure masks of one eye.

    The cup is clipped to the disc on construction so cup-to-disc ratios can
    never exceed one.
    """

    artery: np.ndarray
    vein: np.ndarray
    disc: np.ndarray
    cup: np.ndarray
    laterality: str = "left"
    subject_id: str = ""
    eye_normalized: bool = False
    quality_flags: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.laterality not in ("left", "right"):
            raise ValueError(f"laterality must be 'left' or 'right', got {self.laterality!r}")
        masks = [check_mask(getattr(self, name), name) for name in ("artery", "vein", "disc", "cup")]
        check_same_shape(*masks)
        artery, vein, disc, cup = masks
        object.__setattr__(self, "artery", _frozen(artery))
        object.__setattr__(self, "vein", _frozen(vein))
        object.__setattr__(self, "disc", _frozen(disc))
        object.__setattr__(self, "cup", _frozen(cup & disc))

    @property
    def shape(self):
        return self.disc.shape

    def mask(self, kind) -> np.ndarray:
        return getattr(self, StructureKind(kind).value)

    def normalized(self) -> "SegmentationBundle":
        """Mirror a right eye onto left-eye anatomy; left eyes pass through."""
        if self.eye_normalized:
            return self
        if self.laterality == "left":
            return SegmentationBundle(self.artery, self.vein, self.disc, self.cup, self.laterality,
                                      self.subject_id, True, self.quality_flags)
        return SegmentationBundle(
            flip_horizontal(self.artery), flip_horizontal(self.vein),
            flip_horizontal(self.disc), flip_horizontal(self.cup),
            self.laterality, self.subject_id, True, self.quality_flags,
        )

    @classmethod
    def from_files(cls, artery, vein, disc, cup, laterality="left", subject_id=""):
        return cls(read_mask(artery), read_mask(vein), read_mask(disc), read_mask(cup),
                   laterality=laterality, subject_id=subject_id)
