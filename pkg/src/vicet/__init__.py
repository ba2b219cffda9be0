"""Joint rigid-pose and motion-distortion registration of scanning-LIDAR clouds."""

from vicet.cloud import PointCloud, read_cloud, unwarp, write_cloud
from vicet.geometry import (
    apply_state,
    euler_to_rotation,
    jacobian_block,
    make_state,
    pose_at_time,
    retract,
    rotation_to_euler,
    skew,
)
from vicet.registration import (
    RegistrationConfig,
    RegistrationResult,
    icp_register,
    ndt_register,
    vicet_register,
)

__all__ = [
    "PointCloud",
    "RegistrationConfig",
    "RegistrationResult",
    "apply_state",
    "euler_to_rotation",
    "icp_register",
    "jacobian_block",
    "make_state",
    "ndt_register",
    "pose_at_time",
    "read_cloud",
    "retract",
    "rotation_to_euler",
    "skew",
    "unwarp",
    "vicet_register",
    "write_cloud",
]

__version__ = "0.1.0"
