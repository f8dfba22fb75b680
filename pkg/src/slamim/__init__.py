"""Joint GPS and fish-eye vision state estimation with fault detection and
protection levels for urban driving."""

from .camera import CameraIntrinsics, FisheyeFrame, RelativePose
from .core import OverallState, PixelLandmark, SatelliteState, VehicleState
from .graph import MEstimator, WindowConfig
from .pipeline import Pipeline, PipelineConfig, run
from . import io

__version__ = "0.1.0"
