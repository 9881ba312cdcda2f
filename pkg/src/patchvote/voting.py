"""Patch inference and aggregation: per-patch posteriors, majority voting,
mean aggregation and the single-central-crop mode."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .imagery import GridSpec, PatchSet, central_crop, check_raster, resize, tile_grid
from .model import ConfigError, check_probabilities

MODES = ("vote", "central", "mean")
CHUNK = 64


@dataclass(frozen=True, eq=False)
class ProbabilityMatrix:
    """One posterior per patch; ``probs`` has shape ``(rows, cols, C)``."""

    grid: GridSpec
    probs: np.ndarray

    def __post_init__(self):
        p = self.probs
        if p.ndim != 3 or p.shape[:2] != (self.grid.rows, self.grid.cols):
            raise ValueError(f"probability matrix shape {p.shape} does not match grid {self.grid}")
        check_probabilities(p.reshape(-1, p.shape[2]), p.shape[2], self.grid.size)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[2]

    def flat(self) -> np.ndarray:
        return self.probs.reshape(-1, self.num_classes)

    def argmax_grid(self) -> np.ndarray:
        return self.probs.argmax(axis=2)


@dataclass(frozen=True, eq=False)
class Prediction:
    predicted_class: int
    vote_tally: np.ndarray
    summed_probs: np.ndarray
    per_patch: ProbabilityMatrix
    mode: str

    def __eq__(self, other):
        if not isinstance(other, Prediction):
            return NotImplemented
        return (
            self.predicted_class == other.predicted_class
            and self.mode == other.mode
            and np.array_equal(self.vote_tally, other.vote_tally)
            and np.array_equal(self.summed_probs, other.summed_probs)
            and np.array_equal(self.per_patch.probs, other.per_patch.probs)
        )

    def report_row(self, image_path: str, labels) -> dict[str, str]:
        """Flat, CSV-ready record; the argmax grid is rows joined by ``;``."""
        grid = self.per_patch.argmax_grid()
        return {
            "path": str(image_path),
            "mode": self.mode,
            "predicted": labels[self.predicted_class],
            "tally": " ".join(str(int(v)) for v in self.vote_tally),
            "argmax_grid": ";".join(" ".join(str(int(v)) for v in row) for row in grid),
        }


def _model_rasters(m, rasters: np.ndarray) -> np.ndarray:
    s = m.input_size
    if rasters.shape[1:3] == (s, s):
        return rasters
    return np.stack([resize(r, s, s) for r in rasters])


def evaluate_patches(m, ps: PatchSet, workers: int = 1) -> ProbabilityMatrix:
    """Posterior for every patch, resized to the model input.

    Patches are processed in fixed chunks so the result does not depend on
    ``workers``.
    """
    flat = ps.flat()
    chunks = [flat[s:s + CHUNK] for s in range(0, len(flat), CHUNK)]

    def run(chunk):
        return m.predict_proba_batch(_model_rasters(m, chunk))

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    probs = np.concatenate(parts).reshape(ps.grid.rows, ps.grid.cols, -1)
    return ProbabilityMatrix(ps.grid, probs)


def _argmax_lowest(v: np.ndarray) -> int:
    return int(np.argmax(v))  # numpy returns the first maximum


def _exact_column_sums(flat: np.ndarray) -> np.ndarray:
    # correctly rounded, hence independent of patch order
    return np.array([math.fsum(col) for col in flat.T])


def majority_vote(pm: ProbabilityMatrix) -> Prediction:
    """Each patch votes for its argmax; ties go to summed probability, then lowest index."""
    flat = pm.flat()
    if len(flat) == 0:
        raise ValueError("cannot vote over an empty probability matrix")
    c = pm.num_classes
    tally = np.bincount(flat.argmax(axis=1), minlength=c)
    summed = _exact_column_sums(flat)
    top = tally.max()
    candidates = np.flatnonzero(tally == top)
    if len(candidates) > 1:
        best = summed[candidates].max()
        candidates = candidates[summed[candidates] == best]
    return Prediction(int(candidates[0]), tally, summed, pm, "vote")


def mean_aggregate(pm: ProbabilityMatrix) -> Prediction:
    flat = pm.flat()
    if len(flat) == 0:
        raise ValueError("cannot aggregate an empty probability matrix")
    tally = np.bincount(flat.argmax(axis=1), minlength=pm.num_classes)
    summed = _exact_column_sums(flat)
    return Prediction(_argmax_lowest(summed / len(flat)), tally, summed, pm, "mean")


def infer_image(m, r: np.ndarray, g: GridSpec, mode: str = "vote", workers: int = 1) -> Prediction:
    """Predict the class of a whole image.

    ``vote`` and ``mean`` tile with ``g`` and aggregate; ``central`` scores a
    single centred crop of one training-patch size. When the model records
    its training grid, ``g`` must match it.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    check_raster(r)
    trained = getattr(m, "metadata", {}).get("grid")
    if trained and trained != str(g):
        raise ConfigError(f"inference grid {g} differs from training grid {trained}")
    if mode == "central":
        ph, pw = r.shape[0] // g.rows, r.shape[1] // g.cols
        trained_patch = getattr(m, "metadata", {}).get("patch_size")
        if trained_patch and trained_patch != f"{pw}x{ph}":
            raise ConfigError(f"central crop {pw}x{ph} differs from training patch size {trained_patch}")
        crop = central_crop(r, pw, ph)
        probs = m.predict_proba_batch(_model_rasters(m, crop[None]))
        pm = ProbabilityMatrix(GridSpec(1, 1), probs.reshape(1, 1, -1))
        return Prediction(_argmax_lowest(probs[0]), np.bincount([probs[0].argmax()], minlength=probs.shape[1]),
                          probs[0].copy(), pm, "central")
    pm = evaluate_patches(m, tile_grid(r, g), workers=workers)
    return majority_vote(pm) if mode == "vote" else mean_aggregate(pm)
