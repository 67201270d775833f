"""8-bit RGB raster primitives: PPM I/O, cropping, blending and augmentation.

Coordinates follow the usual image convention: origin top-left, x to the
right, y downward, boxes as ``[x, y, w, h]`` in pixels.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    PpmHeaderError,
    PpmMaxvalError,
    PpmTruncatedError,
    RasterError,
)

PathLike = Union[str, os.PathLike]
Rect = Tuple[int, int, int, int]


@dataclass(frozen=True, eq=False)
class RasterImage:
    """Immutable ``(height, width, 3)`` uint8 pixel grid."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise RasterError(f"pixels must have shape (h, w, 3), got {arr.shape}")
        if arr.shape[0] <= 0 or arr.shape[1] <= 0:
            raise RasterError("image must have positive width and height")
        if arr.dtype != np.uint8:
            if np.any(arr < 0) or np.any(arr > 255):
                raise RasterError("channel values must lie in [0, 255]")
        arr = np.array(arr, dtype=np.uint8, order="C", copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def filled(cls, width: int, height: int, color=(0, 0, 0)) -> "RasterImage":
        if width <= 0 or height <= 0:
            raise RasterError("image must have positive width and height")
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[...] = np.asarray(color, dtype=np.uint8)
        return cls(arr)

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )

    def __hash__(self):
        return hash((self.pixels.shape, self.pixels.tobytes()))

    def __repr__(self):
        return f"RasterImage(width={self.width}, height={self.height})"


# ---------------------------------------------------------------------------
# PPM (P6) I/O

_HEADER_RE = re.compile(rb"\AP6\s+(\d+)\s+(\d+)\s+(\d+)\s")


def encode_ppm(img: RasterImage) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def decode_ppm(data: bytes) -> RasterImage:
    if not data.startswith(b"P6"):
        raise PpmHeaderError("missing P6 magic number")
    m = _HEADER_RE.match(data)
    if m is None:
        raise PpmHeaderError("malformed P6 header")
    width, height, maxval = (int(g) for g in m.groups())
    if width <= 0 or height <= 0:
        raise PpmHeaderError(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise PpmMaxvalError(f"maxval must be 255, got {maxval}")
    payload = data[m.end():]
    expected = width * height * 3
    if len(payload) < expected:
        raise PpmTruncatedError(
            f"payload has {len(payload)} bytes, header promises {expected}"
        )
    arr = np.frombuffer(payload[:expected], dtype=np.uint8).reshape(height, width, 3)
    return RasterImage(arr)


def load_ppm(path: PathLike) -> RasterImage:
    return decode_ppm(Path(path).read_bytes())


def save_ppm(img: RasterImage, path: PathLike) -> None:
    if not isinstance(img, RasterImage):
        raise RasterError("save_ppm expects a RasterImage")
    Path(path).write_bytes(encode_ppm(img))


# ---------------------------------------------------------------------------
# Pixel operations


def _round_half_away(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def crop(img: RasterImage, box: Sequence[float]) -> RasterImage:
    """Crop ``[x, y, w, h]`` (integer pixel box) out of ``img``."""
    x, y, w, h = (int(round(v)) for v in box)
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > img.width or y + h > img.height:
        raise RasterError(f"crop box {list(box)} outside {img.width}x{img.height} image")
    return RasterImage(img.pixels[y:y + h, x:x + w])


def blend_region(
    bg: RasterImage, fg: RasterImage, origin: Tuple[int, int], beta: float
) -> RasterImage:
    """Composite ``fg`` onto ``bg`` at ``origin`` as ``beta*fg + (1-beta)*bg``.

    Only the pasted rectangle changes. Channels are rounded to the nearest
    integer with ties away from zero.
    """
    if not 0.0 <= beta <= 1.0:
        raise RasterError(f"beta must lie in [0, 1], got {beta}")
    x, y = int(origin[0]), int(origin[1])
    if x < 0 or y < 0 or x + fg.width > bg.width or y + fg.height > bg.height:
        raise RasterError(
            f"{fg.width}x{fg.height} region at ({x}, {y}) does not fit "
            f"in {bg.width}x{bg.height} image"
        )
    out = bg.pixels.copy()
    region = out[y:y + fg.height, x:x + fg.width].astype(np.float64)
    mixed = beta * fg.pixels.astype(np.float64) + (1.0 - beta) * region
    out[y:y + fg.height, x:x + fg.width] = np.clip(_round_half_away(mixed), 0, 255)
    return RasterImage(out)


def hflip(img: RasterImage) -> RasterImage:
    return RasterImage(img.pixels[:, ::-1])


# ---------------------------------------------------------------------------
# Augmentation

CUTOUT_FILL = (0, 0, 0)


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str = "weak"
    flip: bool = False
    jitter_scale: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    cutout: Optional[Rect] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise RasterError(f"unknown augmentation kind {self.kind!r}")
        scale = tuple(float(s) for s in self.jitter_scale)
        if len(scale) != 3 or any(not 0.5 <= s <= 1.5 for s in scale):
            raise RasterError("jitter_scale must be three multipliers in [0.5, 1.5]")
        object.__setattr__(self, "jitter_scale", scale)
        if self.kind == "weak" and (scale != (1.0, 1.0, 1.0) or self.cutout is not None):
            raise RasterError("weak augmentation allows flipping only")
        if self.cutout is not None:
            object.__setattr__(self, "cutout", tuple(int(v) for v in self.cutout))


@dataclass(frozen=True)
class CoordinateMap:
    """Box mapping from original to augmented coordinates (and back)."""

    width: int
    flip: bool = False

    def forward(self, box: Sequence[float]) -> Tuple[float, float, float, float]:
        x, y, w, h = box
        if self.flip:
            x = self.width - x - w
        return (x, y, w, h)

    # horizontal reflection is its own inverse
    inverse = forward


def sample_augmentation(
    kind: str,
    seed: int,
    width: int,
    height: int,
    jitter_range: Tuple[float, float] = (0.8, 1.2),
    cutout_frac: Tuple[float, float] = (0.1, 0.3),
) -> AugmentationSpec:
    """Draw a weak (flip only) or strong (flip, jitter, cutout) spec from ``seed``."""
    rng = np.random.default_rng(seed)
    flip = bool(rng.integers(0, 2))
    if kind == "weak":
        return AugmentationSpec("weak", flip=flip, seed=seed)
    lo, hi = jitter_range
    scale = tuple(float(v) for v in rng.uniform(lo, hi, size=3))
    cw = max(1, int(round(width * rng.uniform(*cutout_frac))))
    ch = max(1, int(round(height * rng.uniform(*cutout_frac))))
    cx = int(rng.integers(0, width - cw + 1))
    cy = int(rng.integers(0, height - ch + 1))
    return AugmentationSpec("strong", flip=flip, jitter_scale=scale,
                            cutout=(cx, cy, cw, ch), seed=seed)


def apply_augmentation(
    img: RasterImage, spec: AugmentationSpec
) -> Tuple[RasterImage, CoordinateMap]:
    arr = img.pixels
    if spec.cutout is not None:
        cx, cy, cw, ch = spec.cutout
        if cw <= 0 or ch <= 0 or cx < 0 or cy < 0 or cx + cw > img.width or cy + ch > img.height:
            raise RasterError(f"cutout {spec.cutout} outside {img.width}x{img.height} image")
    if spec.jitter_scale != (1.0, 1.0, 1.0):
        scaled = arr.astype(np.float64) * np.asarray(spec.jitter_scale)
        arr = np.clip(_round_half_away(scaled), 0, 255).astype(np.uint8)
    else:
        arr = arr.copy()
    if spec.cutout is not None:
        # cutout is placed in output coordinates, after the flip
        if spec.flip:
            arr = arr[:, ::-1].copy()
        cx, cy, cw, ch = spec.cutout
        arr[cy:cy + ch, cx:cx + cw] = CUTOUT_FILL
    elif spec.flip:
        arr = arr[:, ::-1]
    return RasterImage(arr), CoordinateMap(img.width, spec.flip)
