"""Report files for a cross-validation run.

``folds.csv``       one row per fold plus a ``Mean`` row
``table.csv``       one row per model: ``Models,Fold 1..Fold k,Mean`` (results-table layout)
``confusion.csv``   true label by row, predicted label by column
``predictions.csv`` one row per evaluated image
``config.txt``      sorted ``key=value`` lines
"""

from __future__ import annotations

import csv
from pathlib import Path

from .experiment import CvReport


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def table_row(r: CvReport) -> list[str]:
    return [r.model_name] + [_fmt(a) for a in r.fold_accuracies] + [_fmt(r.mean_accuracy)]


def table_header(k: int) -> list[str]:
    return ["Models"] + [f"Fold {i + 1}" for i in range(k)] + ["Mean"]


def write_table(reports, path) -> None:
    """Several reports (same fold count) stacked as rows of one results table."""
    reports = list(reports)
    k = len(reports[0].fold_sizes)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table_header(k))
        for r in reports:
            if len(r.fold_sizes) != k:
                raise ValueError("all reports in one table need the same number of folds")
            w.writerow(table_row(r))


def write_report(r: CvReport, out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc.strerror}") from None
    with open(out / "folds.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "accuracy", "images", "correct", "misclassified"])
        for i, (acc, n, c) in enumerate(zip(r.fold_accuracies, r.fold_sizes, r.fold_correct)):
            w.writerow([f"Fold {i + 1}", _fmt(acc), n, c, n - c])
        w.writerow(["Mean", _fmt(r.mean_accuracy), sum(r.fold_sizes), sum(r.fold_correct), r.misclassified])
    write_table([r], out / "table.csv")
    with open(out / "confusion.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\predicted"] + list(r.labels))
        for label, row in zip(r.labels, r.confusion):
            w.writerow([label] + [int(v) for v in row])
    if r.predictions:
        cols = ["path", "fold", "label", "predicted", "mode", "tally", "argmax_grid"]
        with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
            w.writeheader()
            w.writerows(r.predictions)
    lines = [f"{k}={v}" for k, v in sorted(r.config.items())]
    (out / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def read_folds_csv(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
