"""Phantoms, ground-truth projections, datasets and file formats."""

from .dataset import (TEST, TRAIN, ProjectionDataset, load_dataset, save_dataset, split_views,
                      synthesize_projections)
from .io import load_volume, read_container, save_volume, write_container
from .phantoms import BLOBS, BOX_OCTANT, KINDS, NESTED_SHELLS, SHEPP_LOGAN_3D, VoxelVolume, make_phantom
from .projector import backproject, project, sirt

__all__ = [
    "TEST", "TRAIN", "ProjectionDataset", "load_dataset", "save_dataset", "split_views",
    "synthesize_projections", "load_volume", "read_container", "save_volume", "write_container",
    "BLOBS", "BOX_OCTANT", "KINDS", "NESTED_SHELLS", "SHEPP_LOGAN_3D", "VoxelVolume", "make_phantom",
    "backproject", "project", "sirt",
]
