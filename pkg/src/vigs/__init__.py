"""Visual-inertial Gaussian-splatting SLAM: IMU-seeded GICP tracking with an
incrementally optimized 3D Gaussian map."""
from .se3 import Pose, Rotation, so3_exp, so3_log

__version__ = "0.1.0"
__all__ = ["Pose", "Rotation", "so3_exp", "so3_log", "__version__"]
