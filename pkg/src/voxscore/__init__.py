"""Voxel-grid convolutional scoring of protein-ligand poses.

The pipeline: parse structures and assign atom-type channels (moldata),
voxelize complexes into multi-channel density grids (gridgen), train and
apply a small 3D convolutional classifier (tensornet, training), evaluate
pose-ranking and screening performance (evalkit), and attribute scores back
to atoms by occlusion (maskviz). estimators wraps the pipeline in
fit/transform/predict classes.
"""

from .errors import FormatError, TrainingDivergedError
from .estimators import ConvNetPoseClassifier, DensityGridder
from .evalkit import ScoredExample, roc_auc
from .gridgen import DensityGrid, GridConfig, Transform, atom_density, voxelize
from .moldata import (BINARY2, ELEMENT18, SMINA34, Molecule, TypedAtom,
                      assign_types, get_scheme, parse_structure)
from .tensornet import NetworkSpec, WeightSet, build_final_model
from .training import DatasetIndex, PoseRecord, SolverConfig, label_pose, train

__version__ = "0.1.0"

__all__ = [
    "BINARY2",
    "ConvNetPoseClassifier",
    "DatasetIndex",
    "DensityGrid",
    "DensityGridder",
    "ELEMENT18",
    "FormatError",
    "GridConfig",
    "Molecule",
    "NetworkSpec",
    "PoseRecord",
    "SMINA34",
    "ScoredExample",
    "SolverConfig",
    "Transform",
    "TrainingDivergedError",
    "TypedAtom",
    "WeightSet",
    "assign_types",
    "atom_density",
    "build_final_model",
    "get_scheme",
    "label_pose",
    "parse_structure",
    "roc_auc",
    "train",
    "voxelize",
]
