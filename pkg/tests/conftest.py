from __future__ import annotations

import numpy as np
import pytest

from patchvote.dataset import DatasetManifest, SampleRecord

# Per-class image counts of the 37-species macroscopic wood collection.
FIG2_COUNTS = {
    "Abies guatemalensis": 56, "Aniba rosodora": 43, "Aniba canelilla": 51, "Aquilaria malaccensis": 36,
    "Araucaria araucana": 22, "Bulnesia sarmientoi": 125, "Paubrasilia echinata 2": 59,
    "Paubrasilia echinata 1": 50, "Caryocar costaricense": 98, "Cedrela odorata": 68,
    "Dalbergia latifolia": 32, "Dalbergia nigra": 28, "Dalbergia retusa": 61, "Dalbergia sissoo": 106,
    "Dalbergia stevensonii": 65, "Diospyros spp. 3": 27, "Diospyros spp. 1": 35, "Diospyros spp. 2": 55,
    "Fitzroya cupressoides": 52, "Gonystylus bancanus": 34, "Gonystylus spp": 22, "Guaiacum officinale": 31,
    "Magnolia liliifera var. Obovata": 67, "Pericopsis elata": 98, "Pilgerodendron uviferum": 68,
    "Platymiscium parviflorum": 48, "Podocarpus neriifolius": 44, "Prunus africana": 61,
    "Quercus mongolica": 10, "Swietenia humilis": 113, "Swietenia macrophylla": 98,
    "Swietenia mahagoni": 103, "Handroanthus chrysanthus": 56, "Handroanthus heptaphyllus": 65,
    "Tabebuia rosea": 26, "Handroanthus serratifolius": 24, "Taxus cuspidata": 83,
}


def histogram_manifest(counts: dict[str, int]) -> DatasetManifest:
    records = [SampleRecord(f"{label}/{i:03d}.jpg", label, f"{label}-{i}")
               for label, n in counts.items() for i in range(n)]
    return DatasetManifest.from_records(records)


@pytest.fixture(scope="session")
def fig2_manifest() -> DatasetManifest:
    return histogram_manifest(FIG2_COUNTS)


@pytest.fixture
def gen() -> np.random.Generator:
    return np.random.default_rng(12345)


def random_raster(gen: np.random.Generator, h: int, w: int) -> np.ndarray:
    return gen.integers(0, 256, (h, w, 3), dtype=np.uint8)
