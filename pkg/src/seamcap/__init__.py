"""Pose estimation from capacitive seam sensors: simulation, training, evaluation and streaming."""
from .estimator import SeamPoseRegressor, WindowNormalizer
from .exceptions import ConfigError, DataError, NumericError, SeamcapError
from .kinematics import OUTPUT_JOINTS, POSE_JOINTS, Skeleton, forward_kinematics, mpjpe
from .signals import CHANNELS, CapFrame, FrameBlock, normalize_window

__version__ = "0.1.0"

__all__ = [
    "SeamPoseRegressor", "WindowNormalizer", "Skeleton", "forward_kinematics", "mpjpe",
    "CapFrame", "FrameBlock", "normalize_window", "CHANNELS", "POSE_JOINTS", "OUTPUT_JOINTS",
    "SeamcapError", "ConfigError", "DataError", "NumericError",
]
