"""Dynamic radiance fields from a monocular clip with oracle-guided score distillation."""

from .diffcore import AdamState, CheckpointError, ContractViolation, NumericFailure, ParamStore
from .hexplane import HexPlaneSet, PlaneResolution
from .renderfield import CameraPose, CascadeField, RenderOutput, render
from .scenedata import Dataset, SyntheticScene, load_dataset, make_dataset, orbiter_scene

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "CameraPose",
    "CascadeField",
    "CheckpointError",
    "ContractViolation",
    "Dataset",
    "HexPlaneSet",
    "NumericFailure",
    "ParamStore",
    "PlaneResolution",
    "RenderOutput",
    "SyntheticScene",
    "load_dataset",
    "make_dataset",
    "orbiter_scene",
    "render",
]
