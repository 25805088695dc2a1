"""LiDAR-inertial odometry with overlapping sweep reconstruction, plane reuse
and an 8-bit quantized voxel map."""

from qlio.errors import OdometryError
from qlio.manifold import NavState

__all__ = ["NavState", "OdometryError"]
