"""qrf: desk-scale quanta radiance fields.

Simulate single-photon and conventional cameras over analytic scenes, store
binary frame sequences bit-packed on disk, and jointly reconstruct a voxel
radiance field and dense per-frame camera poses from the raw photon data.
"""

__version__ = "0.1.0"

from .errors import ConfigError, InputError, NumericalError, QrfError, StoreError
from .frame_store import BinaryFrame, BinaryFrameStore, DefectMask, PixelSample
from .photon_sim import (CameraIntrinsics, ConventionalConfig, FluxImage,
                         IntensityImage, SpcConfig)
from .pose import LowpassSpec, NoiseSpec, PoseTrajectory
from .radiance_field import Box, FluxScene, Ray, VoxelField
from .trainer import LossReport, TrainConfig

__all__ = [
    "__version__",
    "QrfError",
    "InputError",
    "ConfigError",
    "StoreError",
    "NumericalError",
    "BinaryFrame",
    "BinaryFrameStore",
    "DefectMask",
    "PixelSample",
    "CameraIntrinsics",
    "SpcConfig",
    "ConventionalConfig",
    "FluxImage",
    "IntensityImage",
    "PoseTrajectory",
    "LowpassSpec",
    "NoiseSpec",
    "Box",
    "Ray",
    "VoxelField",
    "FluxScene",
    "TrainConfig",
    "LossReport",
]
