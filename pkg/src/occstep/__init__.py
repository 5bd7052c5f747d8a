"""Incremental semantic occupancy forecasting with a persistent voxel state."""

from .benchmark import CorruptionSpec, SceneConfig, corrupt, gen_synthetic_scene
from .geometry import PlanarMotion
from .grid import GridGeometry, SemanticOccGrid, build_tiled_morton, desk_geometry
from .model import ModelConfig, OccWorldModel, model_step
from .rollout import (RolloutConfig, TrainConfig, baseline_copy_forward, proactive_rollout,
                      reactive_rollout, train, warmup)
from .sequence import OccSequence

__version__ = "0.1.0"

__all__ = ["CorruptionSpec", "SceneConfig", "corrupt", "gen_synthetic_scene", "PlanarMotion",
           "GridGeometry", "SemanticOccGrid", "build_tiled_morton", "desk_geometry", "ModelConfig",
           "OccWorldModel", "model_step", "RolloutConfig", "TrainConfig", "baseline_copy_forward",
           "proactive_rollout", "reactive_rollout", "train", "warmup", "OccSequence"]
