"""Manifests, stratified folds, proportional subsampling and class counts.

Manifest CSV: header ``path,label,specimen_id``. Fold CSV: header
``path,fold``. Fields may not contain commas; nothing is quoted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import Rng

MANIFEST_HEADER = ("path", "label", "specimen_id")
FOLD_HEADER = ("path", "fold")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    path: str
    label: str
    specimen_id: str = ""


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[SampleRecord, ...]
    label_set: tuple[str, ...]

    @classmethod
    def from_records(cls, records: Sequence[SampleRecord], label_set: Sequence[str] | None = None):
        records = tuple(records)
        seen = set()
        order: list[str] = []
        for rec in records:
            if not rec.label:
                raise ManifestError(f"record {rec.path!r} has an empty label")
            if rec.path in seen:
                raise ManifestError(f"duplicate path {rec.path!r}")
            seen.add(rec.path)
            if rec.label not in order:
                order.append(rec.label)
        if label_set is None:
            label_set = order
        else:
            missing = set(order) - set(label_set)
            if missing:
                raise ManifestError(f"labels {sorted(missing)} not in the label set")
        return cls(records, tuple(label_set))

    def __len__(self) -> int:
        return len(self.records)

    def class_index(self, label: str) -> int:
        return self.label_set.index(label)

    def targets(self) -> np.ndarray:
        index = {lab: i for i, lab in enumerate(self.label_set)}
        return np.array([index[r.label] for r in self.records], dtype=np.int64)

    def subset(self, keep: Sequence[int]) -> "DatasetManifest":
        """Records at ``keep`` (in manifest order); the label set is preserved."""
        keep = sorted(set(int(i) for i in keep))
        return DatasetManifest(tuple(self.records[i] for i in keep), self.label_set)


def _check_field(value: str, what: str) -> str:
    if "," in value or "\n" in value or "\r" in value:
        raise ManifestError(f"{what} {value!r} contains a comma or newline")
    return value


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"{path}: cannot read manifest ({exc.strerror})") from None
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    header = tuple(f.strip() for f in lines[0].split(","))
    if header != MANIFEST_HEADER:
        raise ManifestError(f"{path}: expected header {','.join(MANIFEST_HEADER)}, got {lines[0]!r}")
    records = []
    for lineno, ln in enumerate(lines[1:], start=2):
        fields = ln.split(",")
        if len(fields) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(fields)}")
        records.append(SampleRecord(*(f.strip() for f in fields)))
    try:
        return DatasetManifest.from_records(records)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None


def write_manifest(m: DatasetManifest, path) -> None:
    rows = [",".join(MANIFEST_HEADER)]
    for r in m.records:
        rows.append(",".join(_check_field(v, name) for v, name in
                             ((r.path, "path"), (r.label, "label"), (r.specimen_id, "specimen_id"))))
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class FoldAssignment:
    folds: tuple[int, ...]
    k: int

    def members(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.folds) if f == fold]

    def complement(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.folds) if f != fold]


def stratified_kfold(m: DatasetManifest, k: int, seed: int) -> FoldAssignment:
    """Shuffle each class with the seeded stream and deal it round-robin.

    Dealing continues from the fold where the previous class stopped, which
    keeps overall fold sizes within one of each other too.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    targets = m.targets()
    folds = np.full(len(m), -1, dtype=np.int64)
    rng = Rng(seed)
    start = 0
    for c in range(len(m.label_set)):
        idx = np.flatnonzero(targets == c)
        if len(idx) == 0:
            continue
        idx = idx[rng.stream("kfold", c).permutation(len(idx))]
        folds[idx] = (start + np.arange(len(idx))) % k
        start = (start + len(idx)) % k
    return FoldAssignment(tuple(int(f) for f in folds), k)


def write_folds(m: DatasetManifest, fa: FoldAssignment, path) -> None:
    rows = [",".join(FOLD_HEADER)]
    rows += [f"{_check_field(r.path, 'path')},{f}" for r, f in zip(m.records, fa.folds)]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def load_folds(m: DatasetManifest, path) -> FoldAssignment:
    path = Path(path)
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines or tuple(f.strip() for f in lines[0].split(",")) != FOLD_HEADER:
        raise ManifestError(f"{path}: expected header {','.join(FOLD_HEADER)}")
    by_path = {}
    for lineno, ln in enumerate(lines[1:], start=2):
        fields = ln.split(",")
        if len(fields) != 2:
            raise ManifestError(f"{path}:{lineno}: expected 2 fields")
        try:
            by_path[fields[0].strip()] = int(fields[1])
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: fold must be an integer") from None
    missing = [r.path for r in m.records if r.path not in by_path]
    if missing:
        raise ManifestError(f"{path}: no fold for {missing[0]!r} ({len(missing)} records missing)")
    folds = tuple(by_path[r.path] for r in m.records)
    k = max(folds) + 1
    if min(folds) < 0 or k < 2:
        raise ManifestError(f"{path}: fold indices must be in 0..k-1 with k >= 2")
    return FoldAssignment(folds, k)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def subsample_counts(counts: Sequence[int], fraction: float, seed: int = 0) -> list[int]:
    """Per-class sample sizes for a proportional subsample.

    Largest-remainder apportionment of ``round(fraction * total)`` places:
    each class gets ``floor(fraction * n_c)``, and the leftover places go one
    each to the classes with the largest fractional remainders (equal
    remainders in seeded random order). A non-empty class never drops below
    one record.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    quotas = [fraction * n for n in counts]
    sizes = [math.floor(q) for q in quotas]
    spare = _round_half_up(fraction * sum(counts)) - sum(sizes)
    tiebreak = Rng(seed).stream("subsample-ties", 0).permutation(len(counts))
    order = sorted(range(len(counts)), key=lambda c: (-(quotas[c] - sizes[c]), tiebreak[c]))
    for c in order[:max(spare, 0)]:
        if quotas[c] > sizes[c]:
            sizes[c] += 1
    return [max(s, 1) if n else 0 for s, n in zip(sizes, counts)]


def subsample_fraction(m: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Class-proportional random subset, drawn without replacement."""
    if fraction == 1.0:
        return m
    targets = m.targets()
    counts = np.bincount(targets, minlength=len(m.label_set))
    sizes = subsample_counts(counts.tolist(), fraction, seed)
    rng = Rng(seed)
    keep: list[int] = []
    for c, size in enumerate(sizes):
        idx = np.flatnonzero(targets == c)
        chosen = rng.stream("subsample", c).choice(len(idx), size=size, replace=False)
        keep.extend(idx[chosen].tolist())
    return m.subset(keep)


@dataclass(frozen=True)
class ClassHistogram:
    labels: tuple[str, ...]
    counts: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def minimum(self) -> int:
        return min(self.counts)

    @property
    def maximum(self) -> int:
        return max(self.counts)

    @property
    def mean(self) -> float:
        return self.total / len(self.counts)

    def count(self, label: str) -> int:
        return self.counts[self.labels.index(label)] if label in self.labels else 0


def class_histogram(m: DatasetManifest, labels: Sequence[str] | None = None) -> ClassHistogram:
    labels = tuple(m.label_set if labels is None else labels)
    tally = {lab: 0 for lab in labels}
    for r in m.records:
        if r.label in tally:
            tally[r.label] += 1
    return ClassHistogram(labels, tuple(tally[lab] for lab in labels))
