"""Cross-validated experiments: patch pipeline (tile, augment, train, vote)
and the whole-image baselines, with provenance tracking so no test image
ever contributes a training sample."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from ..augment import AugmentProtocol, TangParams, VLParams, tang_protocol, tdli_expand, vl_protocol
from ..dataset import (DatasetManifest, FoldAssignment, load_folds, load_manifest, stratified_kfold,
                       subsample_fraction)
from ..imagery import GridSpec, central_crop, decode_image, resize, tile_grid
from ..model import SmallCnn, TrainConfig, init_small_cnn, save_checkpoint, train
from ..rng import Rng
from ..voting import MODES, Prediction, ProbabilityMatrix, infer_image

log = logging.getLogger("patchvote")

PIPELINES = ("patch", "whole")


@dataclass(frozen=True)
class ExperimentConfig:
    manifest: Path
    grid: GridSpec = GridSpec(6, 8)
    protocol: AugmentProtocol = AugmentProtocol("tdli")
    pipeline: str = "patch"
    modes: tuple[str, ...] = ("vote",)
    k: int = 5
    train: TrainConfig = TrainConfig()
    out_dir: Path | None = None
    seed: int = 0
    fraction: float = 1.0
    folds_file: Path | None = None
    vl_crop: int = 3000
    model_name: str = ""
    workers: int = 1
    save_models: bool = True

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if self.pipeline == "patch":
            if self.protocol.kind not in ("none", "tdli"):
                raise ValueError(f"protocol {self.protocol.kind!r} is a whole-image protocol; use pipeline=whole")
            bad = [m for m in self.modes if m not in MODES]
            if bad or not self.modes:
                raise ValueError(f"patch pipeline modes must be among {MODES}, got {self.modes}")
        else:
            if self.protocol.kind == "tdli":
                raise ValueError("the tdli protocol works on patches; use pipeline=patch")
            if tuple(self.modes) != ("whole",):
                object.__setattr__(self, "modes", ("whole",))
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")

    @property
    def name(self) -> str:
        if self.model_name:
            return self.model_name
        if self.pipeline == "patch":
            return f"{'TDLI-PIV' if self.protocol.kind == 'tdli' else 'PIV-w/oDA'}-SmallCNN-{self.train.input_size}"
        return f"{self.protocol.kind.upper()}-whole-SmallCNN-{self.train.input_size}"

    def echo(self) -> dict[str, str]:
        """Flat key=value view recorded with every report and checkpoint."""
        out = {
            "manifest": str(self.manifest),
            "grid": str(self.grid),
            "augment": self.protocol.kind,
            "pipeline": self.pipeline,
            "modes": ",".join(self.modes),
            "k": str(self.k),
            "seed": str(self.seed),
            "fraction": repr(self.fraction),
            "vl_crop": str(self.vl_crop),
            "model_name": self.name,
        }
        for f in fields(self.train):
            out[f"train.{f.name}"] = repr(getattr(self.train, f.name))
        if self.folds_file is not None:
            out["folds"] = str(self.folds_file)
        return out


@dataclass
class CvReport:
    labels: tuple[str, ...]
    mode: str
    model_name: str
    fold_correct: list[int]
    fold_sizes: list[int]
    confusion: np.ndarray
    config: dict[str, str]
    predictions: list[dict[str, str]] = field(default_factory=list)
    provenance: dict[int, set[str]] = field(default_factory=dict)

    @property
    def fold_accuracies(self) -> list[float]:
        return [c / n if n else float("nan") for c, n in zip(self.fold_correct, self.fold_sizes)]

    @property
    def mean_accuracy(self) -> float:
        accs = [a for a in self.fold_accuracies if a == a]
        return float(np.mean(accs)) if accs else float("nan")

    @property
    def misclassified(self) -> int:
        return sum(self.fold_sizes) - sum(self.fold_correct)


class ImageStore:
    """Decodes manifest images relative to a root directory."""

    def __init__(self, manifest: DatasetManifest, root):
        self.manifest = manifest
        self.root = Path(root)

    def path(self, i: int) -> Path:
        return self.root / self.manifest.records[i].path

    def load(self, i: int) -> np.ndarray:
        p = self.path(i)
        if not p.exists():
            raise FileNotFoundError(f"missing image {p}")
        return decode_image(p)


def patch_inputs(raster: np.ndarray, grid: GridSpec, input_size: int) -> np.ndarray:
    """All grid patches resized to the model input, ``(rows*cols, s, s, 3)``."""
    ps = tile_grid(raster, grid)
    return np.stack([resize(p, input_size, input_size) for p in ps.flat()])


def whole_input(raster: np.ndarray, cfg: ExperimentConfig) -> np.ndarray:
    """Deterministic evaluation-time preprocessing for the whole-image pipeline."""
    s = cfg.train.input_size
    if cfg.protocol.kind == "vl":
        side = min(cfg.vl_crop, *raster.shape[:2])
        raster = central_crop(raster, side, side)
    return resize(raster, s, s)


@dataclass
class TrainingSet:
    x: np.ndarray
    y: np.ndarray
    sources: np.ndarray
    resample: Callable[[int], tuple[np.ndarray, np.ndarray]] | None = None


class PatchCache:
    """Resized patches per image, computed once and shared by every fold."""

    def __init__(self, store: ImageStore, grid: GridSpec, input_size: int):
        self.store, self.grid, self.input_size = store, grid, input_size
        self._cache: dict[int, np.ndarray] = {}
        self.patch_size: str | None = None

    def get(self, i: int) -> np.ndarray:
        if i not in self._cache:
            raster = self.store.load(i)
            ps = tile_grid(raster, self.grid)
            self.patch_size = f"{ps.patch_width}x{ps.patch_height}"
            self._cache[i] = np.stack([resize(p, self.input_size, self.input_size) for p in ps.flat()])
        return self._cache[i]


def build_training_set(cfg: ExperimentConfig, manifest: DatasetManifest, train_idx: list[int],
                       store: ImageStore, cache: PatchCache | None) -> TrainingSet:
    targets = manifest.targets()
    aug = Rng(cfg.seed).child("augment")
    s = cfg.train.input_size
    xs, ys, src = [], [], []
    if cfg.pipeline == "patch":
        for i in train_idx:
            patches = cache.get(i)
            if cfg.protocol.kind == "tdli":
                patches = np.stack(tdli_expand(patches, aug, ordinal=i))
            xs.append(patches)
            ys.append(np.full(len(patches), targets[i]))
            src.append(np.full(len(patches), i))
        return TrainingSet(np.concatenate(xs), np.concatenate(ys), np.concatenate(src))

    kind = cfg.protocol.kind
    if kind == "tang":
        originals = {i: store.load(i) for i in train_idx}
        params = TangParams(out_size=s)

        def resample(epoch: int):
            x = np.stack([tang_protocol(originals[i], aug, ordinal=epoch * len(manifest) + i, params=params)
                          for i in train_idx])
            return x, targets[train_idx]

        x0, y0 = resample(0)
        return TrainingSet(x0, y0, np.array(train_idx), resample)
    for i in train_idx:
        raster = store.load(i)
        if kind == "vl":
            side = min(cfg.vl_crop, *raster.shape[:2])
            out = vl_protocol(raster, aug, ordinal=i, params=VLParams(crop_size=side, out_size=s))
            xs.append(np.stack(out))
        else:
            xs.append(resize(raster, s, s)[None])
        ys.append(np.full(len(xs[-1]), targets[i]))
        src.append(np.full(len(xs[-1]), i))
    return TrainingSet(np.concatenate(xs), np.concatenate(ys), np.concatenate(src))


def train_fold(cfg: ExperimentConfig, manifest: DatasetManifest, folds: FoldAssignment, fold: int,
               store: ImageStore, cache: PatchCache | None = None) -> tuple[SmallCnn, TrainingSet]:
    train_idx = folds.complement(fold)
    test_idx = set(folds.members(fold))
    ts = build_training_set(cfg, manifest, train_idx, store, cache)
    leaked = test_idx.intersection(ts.sources.tolist())
    if leaked:
        raise AssertionError(f"fold {fold}: test images {sorted(leaked)[:3]} contributed training samples")
    root = Rng(cfg.seed)
    model = init_small_cnn(len(manifest.label_set), cfg.train.input_size, root.child("init", fold).seed,
                           labels=manifest.label_set)
    tcfg = replace(cfg.train, seed=root.child("shuffle", fold).seed)
    t0 = time.perf_counter()
    model = train(model, (ts.x, ts.y), tcfg, resample=ts.resample,
                  on_epoch=lambda e, loss: log.info("fold %d epoch %d/%d loss %.4f", fold + 1, e + 1,
                                                    tcfg.epochs, loss))
    log.info("fold %d trained on %d samples in %.1fs", fold + 1, len(ts.y), time.perf_counter() - t0)
    meta = {k: v for k, v in cfg.echo().items() if k in ("grid", "augment", "pipeline", "seed")}
    meta["input_size"] = str(cfg.train.input_size)
    meta["fold"] = str(fold)
    if cache is not None and cache.patch_size:
        meta["patch_size"] = cache.patch_size
    model.metadata = meta
    return model, ts


def predict_whole(model, raster: np.ndarray, cfg: ExperimentConfig) -> Prediction:
    probs = model.predict_proba_batch(whole_input(raster, cfg)[None])
    pm = ProbabilityMatrix(GridSpec(1, 1), probs.reshape(1, 1, -1))
    c = int(np.argmax(probs[0]))
    return Prediction(c, np.bincount([c], minlength=probs.shape[1]), probs[0].copy(), pm, "whole")


def evaluate_fold(model, cfg: ExperimentConfig, manifest: DatasetManifest, test_idx: list[int],
                  store: ImageStore) -> dict[str, list[tuple[int, Prediction]]]:
    out: dict[str, list[tuple[int, Prediction]]] = {m: [] for m in cfg.modes}
    for i in test_idx:
        raster = store.load(i)
        for mode in cfg.modes:
            if mode == "whole":
                pred = predict_whole(model, raster, cfg)
            else:
                pred = infer_image(model, raster, cfg.grid, mode, workers=cfg.workers)
            out[mode].append((i, pred))
    return out


def resolve_folds(cfg: ExperimentConfig, manifest: DatasetManifest) -> FoldAssignment:
    if cfg.folds_file is not None:
        fa = load_folds(manifest, cfg.folds_file)
        if fa.k != cfg.k:
            raise ValueError(f"fold file has {fa.k} folds but k={cfg.k}")
        return fa
    return stratified_kfold(manifest, cfg.k, cfg.seed)


def load_experiment_data(cfg: ExperimentConfig) -> tuple[DatasetManifest, FoldAssignment, ImageStore]:
    manifest = load_manifest(cfg.manifest)
    if cfg.fraction < 1.0:
        manifest = subsample_fraction(manifest, cfg.fraction, cfg.seed)
    folds = resolve_folds(cfg, manifest)
    return manifest, folds, ImageStore(manifest, Path(cfg.manifest).parent)


def run_cv_experiment(cfg: ExperimentConfig) -> dict[str, CvReport]:
    """Train and evaluate one model per fold; returns one report per mode.

    When ``cfg.out_dir`` is set, checkpoints go to ``models/`` and each
    mode's report to its own subdirectory.
    """
    from .report import write_report

    manifest, folds, store = load_experiment_data(cfg)
    labels = manifest.label_set
    c = len(labels)
    targets = manifest.targets()
    cache = PatchCache(store, cfg.grid, cfg.train.input_size) if cfg.pipeline == "patch" else None
    reports = {
        mode: CvReport(labels, mode, cfg.name, [], [], np.zeros((c, c), dtype=np.int64), cfg.echo() | {"mode": mode})
        for mode in cfg.modes
    }
    out = Path(cfg.out_dir) if cfg.out_dir is not None else None
    if out is not None and cfg.save_models:
        (out / "models").mkdir(parents=True, exist_ok=True)
    for fold in range(folds.k):
        test_idx = folds.members(fold)
        model, ts = train_fold(cfg, manifest, folds, fold, store, cache)
        if out is not None and cfg.save_models:
            save_checkpoint(model, out / "models" / f"fold_{fold}.pvw", model.metadata)
        results = evaluate_fold(model, cfg, manifest, test_idx, store)
        sources = {manifest.records[i].path for i in np.unique(ts.sources)}
        for mode, preds in results.items():
            rep = reports[mode]
            correct = 0
            for i, pred in preds:
                rep.confusion[targets[i], pred.predicted_class] += 1
                correct += int(pred.predicted_class == targets[i])
                row = pred.report_row(manifest.records[i].path, labels)
                row["fold"] = str(fold + 1)
                row["label"] = manifest.records[i].label
                rep.predictions.append(row)
            rep.fold_correct.append(correct)
            rep.fold_sizes.append(len(preds))
            rep.provenance[fold] = sources
            log.info("fold %d %s accuracy %.4f (%d/%d)", fold + 1, mode,
                     correct / max(len(preds), 1), correct, len(preds))
    if out is not None:
        for mode, rep in reports.items():
            write_report(rep, out / mode)
    return reports
