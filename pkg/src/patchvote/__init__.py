"""Patch-based training with inference-time voting for fine-grained texture images."""

from .imagery import GridSpec, PatchSet, decode_image, resize, tile_grid
from .rng import Rng
from .voting import Prediction, infer_image, majority_vote

__all__ = ["GridSpec", "PatchSet", "Prediction", "Rng", "decode_image", "infer_image", "majority_vote",
           "resize", "tile_grid"]
__version__ = "0.1.0"
