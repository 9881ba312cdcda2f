"""Augmentation: exact dihedral ops, the patch rotation/flip protocol and two
whole-image baseline protocols (zoom/flip/rotate at 299 px and
rotate/brightness/flip at 224 px).

Random parameters are always drawn from ``Rng.stream(tag, ordinal)`` so a
sample's augmentation depends only on the seed, a purpose tag and the
sample's ordinal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .imagery import central_crop, check_raster, quantize, resize
from .rng import Rng

HORIZONTAL = "horizontal"
VERTICAL = "vertical"


def _rot_view(r: np.ndarray, k: int) -> np.ndarray:
    # same as np.rot90(r, k, axes=(0, 1)) without its per-call overhead
    if k == 0:
        return r
    if k == 1:
        return r.swapaxes(0, 1)[::-1]
    if k == 2:
        return r[::-1, ::-1]
    return r.swapaxes(0, 1)[:, ::-1]


def rotate90(r: np.ndarray, k: int) -> np.ndarray:
    """Lossless counterclockwise rotation by ``90 * k`` degrees."""
    if k not in (0, 1, 2, 3):
        raise ValueError(f"k must be in 0..3, got {k}")
    return np.ascontiguousarray(_rot_view(r, k))


def flip(r: np.ndarray, axis: str) -> np.ndarray:
    """Mirror image. ``horizontal`` swaps left and right, ``vertical`` top and bottom."""
    if axis == HORIZONTAL:
        return np.ascontiguousarray(r[:, ::-1])
    if axis == VERTICAL:
        return np.ascontiguousarray(r[::-1])
    raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")


def tdli_expand(patches: Sequence[np.ndarray], rng: Rng, ordinal: int = 0) -> list[np.ndarray]:
    """Replace every patch by its four rotations, then flip each result in place.

    Each rotated patch independently gets a horizontal flip with probability
    0.5 followed by a vertical flip with probability 0.5, so the output has
    exactly ``4 * len(patches)`` entries and a quarter of them, on average,
    are left unflipped. Output order is source-major, rotation-minor.
    """
    n = len(patches)
    draws = np.asarray(rng.stream("tdli-flip", ordinal).random((n, 4, 2))) < 0.5
    out = []
    for idx, p in enumerate(patches):
        for k in range(4):
            q = _rot_view(p, k)  # view; copied once below
            if draws[idx, k, 0]:
                q = q[:, ::-1]
            if draws[idx, k, 1]:
                q = q[::-1]
            out.append(np.ascontiguousarray(q))
    return out


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def rotate_free(r: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the raster centre (counterclockwise for positive angles).

    Bilinear sampling; samples that fall outside the raster are mirrored
    back inside. Output keeps the input dimensions. Any angle is accepted;
    the protocols only draw from [-45, 45].
    """
    check_raster(r)
    if degrees == 0:
        return r.copy()
    h, w = r.shape[:2]
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy = np.arange(h, dtype=np.float64)[:, None] - cy
    dx = np.arange(w, dtype=np.float64)[None, :] - cx
    sy = c * dy + s * dx + cy
    sx = -s * dy + c * dx + cx
    y0, x0 = np.floor(sy), np.floor(sx)
    fy, fx = (sy - y0)[..., None], (sx - x0)[..., None]
    y0, x0 = y0.astype(np.int64), x0.astype(np.int64)
    ya, yb = _reflect_index(y0, h), _reflect_index(y0 + 1, h)
    xa, xb = _reflect_index(x0, w), _reflect_index(x0 + 1, w)
    src = r.astype(np.float64)
    top = src[ya, xa] * (1 - fx) + src[ya, xb] * fx
    bottom = src[yb, xa] * (1 - fx) + src[yb, xb] * fx
    return quantize(top * (1 - fy) + bottom * fy)


def adjust_brightness(r: np.ndarray, factor: float) -> np.ndarray:
    if not 0.8 <= factor <= 1.2:
        raise ValueError(f"brightness factor must lie in [0.8, 1.2], got {factor}")
    check_raster(r)
    if factor == 1.0:
        return r.copy()
    return quantize(r.astype(np.float64) * factor)


def zoom_height(r: np.ndarray, factor: float) -> np.ndarray:
    """Rescale the height by ``factor`` and restore the original shape.

    A taller intermediate is centre-cropped; a shorter one is mirror-padded
    (``floor(deficit / 2)`` rows on top, the rest at the bottom).
    """
    check_raster(r)
    h, w = r.shape[:2]
    new_h = max(1, int(np.floor(h * factor + 0.5)))
    scaled = resize(r, w, new_h)
    if new_h >= h:
        return central_crop(scaled, w, h)
    deficit = h - new_h
    top = deficit // 2
    return np.pad(scaled, ((top, deficit - top), (0, 0), (0, 0)), mode="symmetric")


def random_zoom_height(r: np.ndarray, rng: Rng, ordinal: int = 0) -> np.ndarray:
    factor = float(rng.stream("zoom-height", ordinal).uniform(0.8, 1.2))
    return zoom_height(r, factor)


@dataclass(frozen=True)
class VLDraw:
    zoom: float
    hflip: bool
    angle: float


@dataclass(frozen=True)
class VLParams:
    crop_size: int = 3000
    out_size: int = 299
    copies: int = 20


def draw_vl(gen) -> VLDraw:
    zoom = float(gen.uniform(0.8, 1.2))
    hflip = bool(gen.random() < 0.5)
    angle = float(gen.uniform(-45.0, 45.0))
    return VLDraw(zoom, hflip, angle)


def apply_vl(cropped: np.ndarray, d: VLDraw, out_size: int) -> np.ndarray:
    x = zoom_height(cropped, d.zoom)
    if d.hflip:
        x = flip(x, HORIZONTAL)
    x = rotate_free(x, d.angle)
    return resize(x, out_size, out_size)


def vl_protocol(image: np.ndarray, rng: Rng, ordinal: int = 0, params: VLParams = VLParams()) -> list[np.ndarray]:
    """Crop to a centred square, then produce ``params.copies`` augmented resizes."""
    check_raster(image)
    h, w = image.shape[:2]
    if h < params.crop_size or w < params.crop_size:
        raise ValueError(
            f"image {w}x{h} is smaller than the {params.crop_size}x{params.crop_size} crop"
        )
    cropped = central_crop(image, params.crop_size, params.crop_size)
    gen = rng.stream("vl", ordinal)
    return [apply_vl(cropped, draw_vl(gen), params.out_size) for _ in range(params.copies)]


@dataclass(frozen=True)
class TangDraw:
    angle: float
    brightness: float


@dataclass(frozen=True)
class TangParams:
    out_size: int = 224


def draw_tang(gen) -> TangDraw:
    angle = float(gen.uniform(-45.0, 45.0))
    brightness = float(gen.uniform(0.8, 1.2))
    return TangDraw(angle, brightness)


def apply_tang(image: np.ndarray, d: TangDraw, out_size: int) -> np.ndarray:
    x = rotate_free(image, d.angle)
    x = adjust_brightness(x, d.brightness)
    x = flip(x, HORIZONTAL)
    return resize(x, out_size, out_size)


def tang_protocol(image: np.ndarray, rng: Rng, ordinal: int = 0, params: TangParams = TangParams()) -> np.ndarray:
    """One augmented replica; callers vary ``ordinal`` per epoch to resample."""
    check_raster(image)
    return apply_tang(image, draw_tang(rng.stream("tang", ordinal)), params.out_size)


PROTOCOL_KINDS = ("none", "tdli", "vl", "tang")
_ALIASES = {"verly_lopes": "vl", "vl": "vl", "tdli": "tdli", "tang": "tang", "none": "none"}


@dataclass(frozen=True)
class AugmentProtocol:
    kind: str = "none"
    vl: VLParams = field(default_factory=VLParams)
    tang: TangParams = field(default_factory=TangParams)

    def __post_init__(self):
        kind = _ALIASES.get(self.kind)
        if kind is None:
            raise ValueError(f"unknown augmentation protocol {self.kind!r}; expected one of {PROTOCOL_KINDS}")
        object.__setattr__(self, "kind", kind)
        if not (1 <= self.vl.copies and 1 <= self.vl.out_size and 1 <= self.vl.crop_size):
            raise ValueError(f"invalid VL parameters {self.vl}")
        if self.tang.out_size < 1:
            raise ValueError(f"invalid Tang parameters {self.tang}")
