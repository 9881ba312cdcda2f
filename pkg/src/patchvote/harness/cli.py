"""Command line entry point: ``patchvote <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..augment import AugmentProtocol
from ..dataset import load_folds, load_manifest, stratified_kfold, write_folds
from ..imagery import GridSpec, decode_image
from ..model import TrainConfig, load_checkpoint, save_checkpoint
from ..voting import infer_image
from .experiment import (CvReport, ExperimentConfig, ImageStore, PatchCache, evaluate_fold, run_cv_experiment,
                         train_fold)
from .report import write_report
from .synth import SynthSpec, synth_generate

log = logging.getLogger("patchvote")

_INT_KEYS = {"k", "epochs", "batch_size", "input_size", "seed", "vl_crop", "workers"}
_FLOAT_KEYS = {"learning_rate", "momentum", "fraction"}
_PATH_KEYS = {"manifest", "out", "folds"}
_TRAIN_KEYS = {"epochs", "batch_size", "learning_rate", "momentum", "input_size"}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _PATH_KEYS | {"grid", "augment", "pipeline", "mode", "modes",
                                                     "model_name", "save_models"}


def parse_config_file(path) -> ExperimentConfig:
    """``key=value`` lines; ``#`` starts a comment; paths are relative to the file."""
    path = Path(path)
    raw: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _ALL_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        raw[key] = value
    if "manifest" not in raw:
        raise ValueError(f"{path}: manifest is required")
    values: dict = {}
    for key, value in raw.items():
        if key in _INT_KEYS:
            values[key] = int(value)
        elif key in _FLOAT_KEYS:
            values[key] = float(value)
        elif key in _PATH_KEYS:
            p = Path(value)
            values[key] = p if p.is_absolute() else path.parent / p
        else:
            values[key] = value
    train = TrainConfig(**{k: values.pop(k) for k in list(values) if k in _TRAIN_KEYS})
    modes = values.pop("modes", values.pop("mode", "vote"))
    return ExperimentConfig(
        manifest=values.pop("manifest"),
        grid=GridSpec.parse(values.pop("grid", "6x8")),
        protocol=AugmentProtocol(values.pop("augment", "tdli")),
        pipeline=values.pop("pipeline", "patch"),
        modes=tuple(m.strip() for m in modes.split(",") if m.strip()),
        k=values.pop("k", 5),
        train=train,
        out_dir=values.pop("out", None),
        seed=values.pop("seed", 0),
        fraction=values.pop("fraction", 1.0),
        folds_file=values.pop("folds", None),
        vl_crop=values.pop("vl_crop", 3000),
        model_name=values.pop("model_name", ""),
        workers=values.pop("workers", 1),
        save_models=values.pop("save_models", "true").lower() in ("1", "true", "yes"),
    )


def _pipeline_for(augment: str) -> str:
    return "whole" if AugmentProtocol(augment).kind in ("vl", "tang") else "patch"


def cmd_synth(a) -> int:
    spec = SynthSpec(num_classes=a.classes, images_per_class=a.per_class, width=a.width, height=a.height,
                     seed=a.seed)
    m = synth_generate(spec, a.out)
    print(f"wrote {len(m)} images in {len(m.label_set)} classes to {a.out}")
    return 0


def cmd_split(a) -> int:
    m = load_manifest(a.manifest)
    fa = stratified_kfold(m, a.k, a.seed)
    write_folds(m, fa, a.out)
    sizes = np.bincount(fa.folds, minlength=fa.k)
    print(f"wrote {fa.k} folds ({' '.join(str(s) for s in sizes)} images) to {a.out}")
    return 0


def _config_from_args(a, modes=("vote",)) -> ExperimentConfig:
    pipeline = _pipeline_for(a.augment)
    return ExperimentConfig(
        manifest=Path(a.manifest),
        grid=GridSpec.parse(a.grid),
        protocol=AugmentProtocol(a.augment),
        pipeline=pipeline,
        modes=modes if pipeline == "patch" else ("whole",),
        k=2,
        train=TrainConfig(epochs=a.epochs, batch_size=a.batch_size, learning_rate=a.lr, input_size=a.input_size),
        seed=a.seed,
        folds_file=Path(a.folds),
        vl_crop=a.vl_crop,
    )


def cmd_train(a) -> int:
    m = load_manifest(a.manifest)
    fa = load_folds(m, a.folds)
    if not 0 <= a.fold_id < fa.k:
        raise ValueError(f"fold id {a.fold_id} outside 0..{fa.k - 1}")
    cfg = replace(_config_from_args(a), k=fa.k)
    store = ImageStore(m, Path(a.manifest).parent)
    cache = PatchCache(store, cfg.grid, cfg.train.input_size) if cfg.pipeline == "patch" else None
    model, ts = train_fold(cfg, m, fa, a.fold_id, store, cache)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, a.out, model.metadata)
    print(f"trained fold {a.fold_id} on {len(ts.y)} samples; final loss {model.history[-1]:.4f}; wrote {a.out}")
    return 0


def cmd_infer(a) -> int:
    model = load_checkpoint(a.model)
    pred = infer_image(model, decode_image(a.image), GridSpec.parse(a.grid), a.mode)
    row = pred.report_row(a.image, model.labels)
    print(",".join(row[k] for k in ("path", "mode", "predicted", "tally", "argmax_grid")))
    return 0


def _eval_echo(cfg: ExperimentConfig) -> dict[str, str]:
    # training hyperparameters are not known at evaluation time, only the input size
    return {k: v for k, v in cfg.echo().items() if not k.startswith("train.") or k == "train.input_size"}


def cmd_eval(a) -> int:
    m = load_manifest(a.manifest)
    fa = load_folds(m, a.folds)
    store = ImageStore(m, Path(a.manifest).parent)
    targets = m.targets()
    report = None
    for fold in range(fa.k):
        ckpt = Path(a.model_dir) / f"fold_{fold}.pvw"
        if not ckpt.exists():
            raise FileNotFoundError(f"missing checkpoint {ckpt}")
        model = load_checkpoint(ckpt)
        if model.labels != list(m.label_set):
            raise ValueError(f"{ckpt}: label set differs from the manifest")
        meta = model.metadata
        augment = meta.get("augment", "none")
        pipeline = meta.get("pipeline", _pipeline_for(augment))
        grid = GridSpec.parse(a.grid) if a.grid else GridSpec.parse(meta.get("grid", "6x8"))
        cfg = ExperimentConfig(manifest=Path(a.manifest), grid=grid, protocol=AugmentProtocol(augment),
                               pipeline=pipeline, modes=(a.mode,) if pipeline == "patch" else ("whole",),
                               k=fa.k, train=TrainConfig(input_size=model.input_size), folds_file=Path(a.folds),
                               vl_crop=a.vl_crop)
        mode = cfg.modes[0]
        if report is None:
            c = len(m.label_set)
            report = CvReport(m.label_set, mode, a.name or cfg.name, [], [], np.zeros((c, c), dtype=np.int64),
                              _eval_echo(cfg) | {"mode": mode, "model_dir": str(a.model_dir)})
        preds = evaluate_fold(model, cfg, m, fa.members(fold), store)[mode]
        correct = 0
        for i, pred in preds:
            report.confusion[targets[i], pred.predicted_class] += 1
            correct += int(pred.predicted_class == targets[i])
            row = pred.report_row(m.records[i].path, m.label_set)
            row.update(fold=str(fold + 1), label=m.records[i].label)
            report.predictions.append(row)
        report.fold_correct.append(correct)
        report.fold_sizes.append(len(preds))
    write_report(report, a.report)
    print(f"{report.model_name} {report.mode}: mean accuracy {report.mean_accuracy:.4f}, "
          f"{report.misclassified} of {sum(report.fold_sizes)} misclassified; report in {a.report}")
    return 0


def cmd_experiment(a) -> int:
    cfg = parse_config_file(a.config)
    reports = run_cv_experiment(cfg)
    for mode, r in reports.items():
        print(f"{r.model_name} {mode}: " + " ".join(f"{x:.4f}" for x in r.fold_accuracies)
              + f" mean {r.mean_accuracy:.4f} ({r.misclassified} misclassified)")
    return 0


def cmd_benchmark(a) -> int:
    from .benchmark import BenchmarkSpec, measure_throughput, project_seconds, run_benchmark

    spec = BenchmarkSpec(
        synth=SynthSpec(num_classes=a.classes, images_per_class=a.per_class, width=a.width, height=a.height,
                        seed=a.data_seed),
        grid=GridSpec.parse(a.grid),
        train=TrainConfig(epochs=a.epochs, input_size=a.input_size),
        k=a.k,
        seeds=tuple(int(x) for x in a.seeds.split(",")),
        whole_epochs=a.whole_epochs,
    )
    projected = project_seconds(spec, measure_throughput(a.input_size, a.classes))
    print(f"projected single-core runtime {projected / 60:.1f} min")
    if a.dry_run:
        return 0
    result = run_benchmark(spec, a.out)
    s = result.summary()
    print(f"vote {s['vote']:.4f} central {s['central']:.4f} whole {s['whole']:.4f} "
          f"in {s['seconds'] / 60:.1f} min")
    failures = result.failures(spec)
    for f in failures:
        print(f"not met: {f}")
    return 0 if not failures else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="patchvote", description="Patch-based training and inference voting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic fine-grained texture benchmark")
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--per-class", type=int, default=40)
    s.add_argument("--width", type=int, default=1600)
    s.add_argument("--height", type=int, default=1200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="stratified k-fold assignment of a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    def training_args(s):
        s.add_argument("--grid", default="6x8")
        s.add_argument("--augment", default="tdli", choices=["none", "tdli", "vl", "tang"])
        s.add_argument("--epochs", type=int, default=50)
        s.add_argument("--batch-size", type=int, default=32)
        s.add_argument("--lr", type=float, default=0.01)
        s.add_argument("--input-size", type=int, default=64)
        s.add_argument("--vl-crop", type=int, default=3000)
        s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("train", help="train one fold's model")
    s.add_argument("--manifest", required=True)
    s.add_argument("--folds", required=True)
    s.add_argument("--fold-id", type=int, required=True)
    training_args(s)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="predict one image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--grid", default="6x8")
    s.add_argument("--mode", default="vote", choices=["vote", "central", "mean"])
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="cross-validated evaluation of per-fold checkpoints")
    s.add_argument("--manifest", required=True)
    s.add_argument("--folds", required=True)
    s.add_argument("--model-dir", required=True)
    s.add_argument("--mode", default="vote", choices=["vote", "central", "mean"])
    s.add_argument("--grid", default=None, help="defaults to the grid recorded in the checkpoints")
    s.add_argument("--vl-crop", type=int, default=3000)
    s.add_argument("--name", default="")
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("benchmark", help="synthetic patch-vote vs whole-image benchmark over several seeds")
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--per-class", type=int, default=40)
    s.add_argument("--width", type=int, default=1600)
    s.add_argument("--height", type=int, default=1200)
    s.add_argument("--data-seed", type=int, default=0)
    s.add_argument("--grid", default="6x8")
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--whole-epochs", type=int, default=None, help="epochs for the whole-image baseline")
    s.add_argument("--input-size", type=int, default=64)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--dry-run", action="store_true", help="only print the projected runtime")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("experiment", help="full cross-validation run from a key=value config file")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (OSError, ValueError, AssertionError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"patchvote {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
