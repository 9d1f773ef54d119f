"""Sparse-octree feature-grid tomography for cone-beam CT with self-calibration."""

from .config import RunConfig
from .errors import (ConfigurationError, ConsistencyError, FormatError, InputError, NumericError,
                     OctomoError)
from .metrics import EvalReport, evaluate_reconstruction, psnr
from .octree import ACTIVE, EMPTY, INTERIOR, SparseOctree
from .scene import Scene
from .train import Reconstructor, reconstruct

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "ConfigurationError", "ConsistencyError", "FormatError", "InputError", "NumericError",
    "OctomoError", "EvalReport", "evaluate_reconstruction", "psnr", "ACTIVE", "EMPTY", "INTERIOR",
    "SparseOctree", "Scene", "Reconstructor", "reconstruct", "__version__",
]
