"""plvo: pseudo-LiDAR visual odometry.

Back-projects depth/disparity maps into organized point maps, learns
hierarchical point features with projection-aware window operators fused with
image semantics, and regresses 6-DoF inter-frame poses coarse-to-fine, with a
KITTI-style trajectory evaluator and a synthetic training harness.
"""

__version__ = "0.1.0"

from .geometry import (CameraIntrinsics, DepthMap, PointMap, Pose, backproject,
                       disparity_to_depth, filter_points, project_point,
                       warp_pointmap)
from .autodiff import Tensor, Tape, gradient_check, mlp_forward

__all__ = [
    "CameraIntrinsics", "DepthMap", "PointMap", "Pose",
    "backproject", "disparity_to_depth", "filter_points", "project_point",
    "warp_pointmap", "Tensor", "Tape", "gradient_check", "mlp_forward",
    "__version__",
]
