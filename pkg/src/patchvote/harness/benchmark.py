"""End-to-end synthetic benchmark: patch voting against whole-image downscaling.

For every seed one synthetic collection is cross-validated three ways on the
same folds: the patch pipeline with the rotation/flip protocol evaluated by
``vote`` and by ``central``, and the whole-image baseline (no patches, the
full image resized to the model input).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..augment import AugmentProtocol
from ..imagery import GridSpec
from ..model import TrainConfig, init_small_cnn, train
from .experiment import ExperimentConfig, run_cv_experiment
from .report import write_table
from .synth import SynthSpec, synth_generate

log = logging.getLogger("patchvote")


@dataclass(frozen=True)
class BenchmarkSpec:
    synth: SynthSpec = SynthSpec()
    grid: GridSpec = GridSpec(6, 8)
    train: TrainConfig = TrainConfig()
    k: int = 5
    seeds: tuple[int, ...] = (0, 1, 2)
    min_accuracy: float = 0.95
    min_margin: float = 0.10
    whole_epochs: int | None = None  # defaults to train.epochs

    @property
    def whole_train(self) -> TrainConfig:
        return self.train if self.whole_epochs is None else replace(self.train, epochs=self.whole_epochs)

    def workload(self) -> dict[str, int]:
        """Sample counts that dominate the runtime, summed over seeds and folds."""
        n = self.synth.num_classes * self.synth.images_per_class
        runs = len(self.seeds) * self.k
        n_train = n - n // self.k  # every fold holds out about n/k images
        return {
            "patch_train": runs * self.train.epochs * n_train * self.grid.size * 4,
            "whole_train": runs * self.whole_train.epochs * n_train,
            "inference": runs * (n // self.k) * (self.grid.size + 1 + 1),
            "images": n,
        }


@dataclass
class BenchmarkResult:
    vote: dict[int, float] = field(default_factory=dict)
    central: dict[int, float] = field(default_factory=dict)
    whole: dict[int, float] = field(default_factory=dict)
    seconds: float = 0.0

    @staticmethod
    def _mean(d: dict[int, float]) -> float:
        return float(np.mean(list(d.values())))

    def summary(self) -> dict[str, float]:
        return {"vote": self._mean(self.vote), "central": self._mean(self.central),
                "whole": self._mean(self.whole), "seconds": self.seconds}

    def failures(self, spec: BenchmarkSpec) -> list[str]:
        s = self.summary()
        out = []
        if s["vote"] < spec.min_accuracy:
            out.append(f"vote accuracy {s['vote']:.4f} < {spec.min_accuracy}")
        if s["vote"] - s["whole"] < spec.min_margin:
            out.append(f"vote - whole = {s['vote'] - s['whole']:.4f} < {spec.min_margin}")
        if s["vote"] < s["central"]:
            out.append(f"vote {s['vote']:.4f} < central {s['central']:.4f}")
        return out


def measure_throughput(input_size: int = 64, num_classes: int = 8, n: int = 96, seed: int = 0) -> dict[str, float]:
    """Seconds per training sample (one SGD pass) and per inference sample."""
    gen = np.random.default_rng(seed)
    x = gen.integers(0, 256, (n, input_size, input_size, 3), dtype=np.uint8)
    y = np.arange(n) % num_classes
    model = init_small_cnn(num_classes, input_size, seed)
    cfg = TrainConfig(epochs=1, input_size=input_size)
    train(model, (x[:32], y[:32]), cfg)  # warm-up
    t0 = time.perf_counter()
    train(model, (x, y), cfg)
    t_train = (time.perf_counter() - t0) / n
    t0 = time.perf_counter()
    model.predict_proba_batch(x)
    t_infer = (time.perf_counter() - t0) / n
    return {"train": t_train, "infer": t_infer}


def project_seconds(spec: BenchmarkSpec, throughput: dict[str, float], cores: int = 1,
                    synth_seconds_per_image: float = 0.9) -> float:
    """Lower-bound runtime estimate assuming perfect scaling over ``cores``."""
    w = spec.workload()
    compute = ((w["patch_train"] + w["whole_train"]) * throughput["train"]
               + w["inference"] * throughput["infer"])
    return compute / cores + w["images"] * synth_seconds_per_image


def run_benchmark(spec: BenchmarkSpec, out_dir) -> BenchmarkResult:
    out = Path(out_dir)
    t0 = time.perf_counter()
    manifest = out / "data" / "manifest.csv"
    if not manifest.exists():
        synth_generate(spec.synth, out / "data")
    result = BenchmarkResult()
    tables = []
    for seed in spec.seeds:
        common = dict(manifest=manifest, grid=spec.grid, k=spec.k, train=spec.train, seed=seed, save_models=False)
        patch = ExperimentConfig(protocol=AugmentProtocol("tdli"), modes=("vote", "central"),
                                 out_dir=out / f"seed_{seed}" / "tdli", **common)
        reps = run_cv_experiment(patch)
        whole = ExperimentConfig(protocol=AugmentProtocol("none"), pipeline="whole",
                                 out_dir=out / f"seed_{seed}" / "whole", **(common | {"train": spec.whole_train}))
        base = run_cv_experiment(whole)["whole"]
        result.vote[seed] = reps["vote"].mean_accuracy
        result.central[seed] = reps["central"].mean_accuracy
        result.whole[seed] = base.mean_accuracy
        tables += [replace(reps["vote"], model_name=f"{reps['vote'].model_name} vote seed {seed}"),
                   replace(reps["central"], model_name=f"{reps['central'].model_name} central seed {seed}"),
                   replace(base, model_name=f"{base.model_name} seed {seed}")]
        log.info("seed %d: vote %.4f central %.4f whole %.4f", seed, result.vote[seed], result.central[seed],
                 result.whole[seed])
    write_table(tables, out / "table.csv")
    result.seconds = time.perf_counter() - t0
    return result
