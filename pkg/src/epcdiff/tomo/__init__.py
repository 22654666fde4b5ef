"""Parallel-beam CT operators: projector pair, FBP, rotation and angular shift."""
from .equivariance import check_support, equivariance_residual
from .fbp import fbp
from .geometry import Geometry, inscribed_radius, pixel_coords, support_mask
from .projector import adjoint_test, backproject, forward_project, system_matrix
from .transforms import rotate_adjoint, rotate_inplane, shift_angles
from .types import SinogramStack, Volume

__all__ = [
    "Geometry", "Volume", "SinogramStack", "inscribed_radius", "pixel_coords", "support_mask",
    "forward_project", "backproject", "adjoint_test", "system_matrix", "fbp",
    "rotate_inplane", "rotate_adjoint", "shift_angles", "equivariance_residual", "check_support",
]
