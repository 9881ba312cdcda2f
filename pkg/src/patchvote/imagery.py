"""Raster decoding plus the geometric primitives: grid tiling, central crop, resize.

A raster is a ``(height, width, 3)`` ``uint8`` numpy array in RGB order.
Functions never modify their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image


class ImageError(ValueError):
    """An image file could not be turned into a raster."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


def check_raster(r: np.ndarray) -> np.ndarray:
    if not isinstance(r, np.ndarray) or r.ndim != 3 or r.shape[2] != 3:
        raise ValueError(f"raster must be an HxWx3 array, got shape {getattr(r, 'shape', None)}")
    if r.shape[0] < 1 or r.shape[1] < 1:
        raise ValueError(f"raster dimensions must be positive, got {r.shape[1]}x{r.shape[0]}")
    if r.dtype != np.uint8:
        raise ValueError(f"raster must be uint8, got {r.dtype}")
    return r


def to_unit(r: np.ndarray) -> np.ndarray:
    """Model-facing variant of a raster: float32 samples in [0, 1]."""
    return check_raster(r).astype(np.float32) / np.float32(255.0)


def decode_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            fmt, mode = im.format, im.mode
            if fmt not in ("PNG", "JPEG"):
                raise ImageError(path, f"unsupported file format {fmt}")
            if mode == "RGB":
                arr = np.asarray(im, dtype=np.uint8)
            elif mode == "L":
                arr = np.repeat(np.asarray(im, dtype=np.uint8)[:, :, None], 3, axis=2)
            elif mode in ("I", "I;16", "I;16B", "I;16L", "F", "1"):
                raise ImageError(path, f"unsupported bit depth (mode {mode})")
            else:
                raise ImageError(path, f"unsupported color model (mode {mode})")
    except ImageError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageError(path, f"unreadable image ({exc})") from None
    return np.ascontiguousarray(arr)


def encode_png(r: np.ndarray, path) -> None:
    Image.fromarray(check_raster(r), mode="RGB").save(path, format="PNG", compress_level=1)


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        """Parse ``"6x8"`` (rows x cols)."""
        try:
            rows, cols = (int(p) for p in text.lower().split("x"))
        except ValueError:
            raise ValueError(f"grid must look like RxC, got {text!r}") from None
        return cls(rows, cols)

    def transpose(self) -> "GridSpec":
        return GridSpec(self.cols, self.rows)

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def __str__(self) -> str:
        return f"{self.rows}x{self.cols}"


@dataclass(frozen=True, eq=False)
class PatchSet:
    """Row-major matrix of equally sized patches cut from one raster.

    ``patches`` has shape ``(rows, cols, patch_height, patch_width, 3)``.
    """

    grid: GridSpec
    patches: np.ndarray

    @property
    def patch_height(self) -> int:
        return self.patches.shape[2]

    @property
    def patch_width(self) -> int:
        return self.patches.shape[3]

    def patch(self, i: int, j: int) -> np.ndarray:
        if not (0 <= i < self.grid.rows and 0 <= j < self.grid.cols):
            raise IndexError(f"patch index ({i}, {j}) outside grid {self.grid}")
        return self.patches[i, j]

    def __len__(self) -> int:
        return self.grid.size

    def __iter__(self) -> Iterator[np.ndarray]:
        for i in range(self.grid.rows):
            for j in range(self.grid.cols):
                yield self.patches[i, j]

    def flat(self) -> np.ndarray:
        """All patches as an ``(n, h, w, 3)`` array in row-major grid order."""
        return self.patches.reshape((-1,) + self.patches.shape[2:])

    def reassemble(self) -> np.ndarray:
        rows, cols, ph, pw, c = self.patches.shape
        return np.ascontiguousarray(self.patches.transpose(0, 2, 1, 3, 4).reshape(rows * ph, cols * pw, c))


def trim_to_grid(r: np.ndarray, g: GridSpec) -> np.ndarray:
    """Symmetrically trim so height and width divide the grid.

    The leading edge loses ``floor(rem / 2)`` pixels, the trailing edge the rest.
    """
    h, w = r.shape[:2]
    rh, rw = h % g.rows, w % g.cols
    top, left = rh // 2, rw // 2
    return r[top:h - (rh - top), left:w - (rw - left)]


def tile_grid(r: np.ndarray, g: GridSpec) -> PatchSet:
    check_raster(r)
    h, w = r.shape[:2]
    if g.rows > h or g.cols > w:
        raise ValueError(f"grid {g} is larger than the {w}x{h} raster")
    t = trim_to_grid(r, g)
    ph, pw = t.shape[0] // g.rows, t.shape[1] // g.cols
    patches = t.reshape(g.rows, ph, g.cols, pw, 3).transpose(0, 2, 1, 3, 4)
    patches = np.ascontiguousarray(patches)
    patches.flags.writeable = False
    return PatchSet(g, patches)


def central_crop(r: np.ndarray, w: int, h: int) -> np.ndarray:
    check_raster(r)
    height, width = r.shape[:2]
    if w < 1 or h < 1 or w > width or h > height:
        raise ValueError(f"crop {w}x{h} does not fit in the {width}x{height} raster")
    x0, y0 = (width - w) // 2, (height - h) // 2
    return r[y0:y0 + h, x0:x0 + w].copy()


@lru_cache(maxsize=64)
def _bilinear_taps(src: int, dst: int) -> tuple[np.ndarray, np.ndarray]:
    """Banded resampling weights for a triangle (bilinear) kernel.

    Returns ``(index, weight)``, both ``(dst, taps)``: output sample ``o`` is
    ``sum_t weight[o, t] * input[index[o, t]]``. Pixel centres are aligned
    (half-pixel convention). When shrinking, the kernel is widened by the
    scale factor so every source pixel contributes.
    """
    scale = src / dst
    support = max(scale, 1.0)
    centres = (np.arange(dst, dtype=np.float64) + 0.5) * scale
    first = np.maximum(np.floor(centres - support).astype(np.int64), 0)
    taps = int(np.ceil(2 * support)) + 2
    index = np.minimum(first[:, None] + np.arange(taps)[None, :], src - 1)
    dist = np.abs(index + 0.5 - centres[:, None]) / support
    wts = np.clip(1.0 - dist, 0.0, None)
    # clamped duplicates at the right edge must not count twice
    wts[:, 1:][index[:, 1:] == index[:, :-1]] = 0.0
    wts /= wts.sum(axis=1, keepdims=True)
    index.flags.writeable = False
    wts.flags.writeable = False
    return index, wts


def _resample_axis0(x: np.ndarray, dst: int) -> np.ndarray:
    index, wts = _bilinear_taps(x.shape[0], dst)
    out = np.zeros((dst,) + x.shape[1:], dtype=np.float64)
    for t in range(index.shape[1]):
        out += wts[:, t].reshape((dst,) + (1,) * (x.ndim - 1)) * x[index[:, t]]
    return out


def quantize(x: np.ndarray) -> np.ndarray:
    """Round half away from zero and clamp to 8 bits."""
    return np.clip(np.sign(x) * np.floor(np.abs(x) + 0.5), 0, 255).astype(np.uint8)


def resize(r: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    check_raster(r)
    if target_w < 1 or target_h < 1:
        raise ValueError(f"target size must be positive, got {target_w}x{target_h}")
    h, w = r.shape[:2]
    if (h, w) == (target_h, target_w):
        return r.copy()
    out = r.astype(np.float64)
    if h != target_h:
        out = _resample_axis0(out, target_h)
    if w != target_w:
        out = _resample_axis0(out.transpose(1, 0, 2), target_w).transpose(1, 0, 2)
    # Snap summation noise so exact .5 ties round the same way whatever the
    # tap order (keeps resize equivariant under mirroring).
    return quantize(np.round(out, 8))


def resize_square(r: np.ndarray, size: int) -> np.ndarray:
    return resize(r, size, size)
