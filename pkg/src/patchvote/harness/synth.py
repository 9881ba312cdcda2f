"""Procedural fine-grained texture benchmark.

Each class is a wood-like texture: a base tone, a wavy sinusoidal grain with
a class-specific period and orientation, and dark circular pores with a
class-specific density and radius. The base tone is corrected for the
expected pore coverage so every class has the same mean colour; what tells
classes apart lives at the scale of a few pixels and is averaged away by a
strong downscale.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dataset import DatasetManifest, SampleRecord, write_manifest
from ..imagery import encode_png
from ..rng import Rng

BASE_TONE = np.array([150.0, 112.0, 74.0])
PORE_DEPTH = 70.0
GRAIN_AMPLITUDE = 24.0


@dataclass(frozen=True)
class ClassTexture:
    grain_period: float
    grain_orientation: float
    pore_density: float
    pore_radius: float


def default_textures(n: int) -> list[ClassTexture]:
    """``n`` distinct textures cycling through period x radius x density."""
    periods = (10.0, 16.0, 13.0)
    radii = (3.0, 6.0, 4.5)
    densities = (450.0, 1600.0, 900.0)
    combos = list(itertools.product(periods[:2], radii[:2], densities[:2]))
    combos += [c for c in itertools.product(periods, radii, densities) if c not in combos]
    if n > len(combos):
        raise ValueError(f"at most {len(combos)} default classes, asked for {n}")
    return [ClassTexture(p, 30.0 * i % 180.0, d, r) for i, (p, r, d) in enumerate(combos[:n])]


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 8
    images_per_class: int = 40
    width: int = 1600
    height: int = 1200
    noise: float = 8.0
    tone_jitter: float = 12.0
    orientation_jitter: float = 15.0
    seed: int = 0
    textures: tuple[ClassTexture, ...] = field(default=())

    def __post_init__(self):
        if self.num_classes < 1 or self.images_per_class < 1:
            raise ValueError("need at least one class and one image per class")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        if not self.textures:
            object.__setattr__(self, "textures", tuple(default_textures(self.num_classes)))
        if len(self.textures) != self.num_classes:
            raise ValueError(f"{len(self.textures)} textures for {self.num_classes} classes")

    def label(self, c: int) -> str:
        return f"class_{c:02d}"


def pore_coverage(t: ClassTexture) -> float:
    """Expected fraction of pixels inside at least one pore (Poisson placement)."""
    return 1.0 - math.exp(-t.pore_density * math.pi * t.pore_radius ** 2 / 1e6)


def grain_field(t: ClassTexture, width: int, height: int, gen: np.random.Generator,
                orientation_jitter: float = 0.0) -> np.ndarray:
    """Zero-mean wavy grain intensity, ``(height, width)`` float64."""
    theta = math.radians(t.grain_orientation + gen.uniform(-orientation_jitter, orientation_jitter))
    phase = gen.uniform(0, 2 * math.pi)
    wobble_amp = gen.uniform(0.8, 1.6)
    wobble_len = gen.uniform(180.0, 320.0)
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    across = xs * math.cos(theta) + ys * math.sin(theta)
    along = -xs * math.sin(theta) + ys * math.cos(theta)
    wobble = wobble_amp * np.sin(2 * math.pi * along / wobble_len + phase)
    return np.sin(2 * math.pi * across / t.grain_period + wobble + phase)


def pore_mask(t: ClassTexture, width: int, height: int, gen: np.random.Generator) -> np.ndarray:
    n = gen.poisson(t.pore_density * width * height / 1e6)
    cy = gen.uniform(0, height, n)
    cx = gen.uniform(0, width, n)
    mask = np.zeros((height, width), dtype=bool)
    r = t.pore_radius
    k = int(math.ceil(r))
    oy, ox = np.mgrid[-k:k + 1, -k:k + 1]
    disk = oy ** 2 + ox ** 2 <= r * r
    for y, x in zip(cy.astype(np.int64), cx.astype(np.int64)):
        y0, y1 = max(y - k, 0), min(y + k + 1, height)
        x0, x1 = max(x - k, 0), min(x + k + 1, width)
        mask[y0:y1, x0:x1] |= disk[y0 - (y - k):y1 - (y - k), x0 - (x - k):x1 - (x - k)]
    return mask


def render_texture(spec: SynthSpec, c: int, i: int) -> np.ndarray:
    """Image ``i`` of class ``c`` as a uint8 raster."""
    t = spec.textures[c]
    gen = Rng(spec.seed).stream(f"synth/{c}", i)
    tone = BASE_TONE + PORE_DEPTH * pore_coverage(t) + gen.uniform(-spec.tone_jitter, spec.tone_jitter)
    grain = GRAIN_AMPLITUDE * grain_field(t, spec.width, spec.height, gen, spec.orientation_jitter)
    pores = pore_mask(t, spec.width, spec.height, gen)
    noise = gen.normal(0.0, spec.noise, (spec.height, spec.width, 3)) if spec.noise > 0 else 0.0
    img = tone[None, None, :] + grain[:, :, None] * np.array([1.0, 0.85, 0.7]) + noise
    img[pores] -= PORE_DEPTH
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def synth_generate(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write every image as PNG plus ``manifest.csv`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from None
    records = []
    for c in range(spec.num_classes):
        label = spec.label(c)
        (out / label).mkdir(exist_ok=True)
        for i in range(spec.images_per_class):
            rel = f"{label}/{label}_{i:03d}.png"
            encode_png(render_texture(spec, c, i), out / rel)
            records.append(SampleRecord(rel, label, f"{label}-{i:03d}"))
    manifest = DatasetManifest.from_records(records)
    write_manifest(manifest, out / "manifest.csv")
    return manifest
