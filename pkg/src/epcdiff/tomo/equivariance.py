"""Projection-domain rotational equivariance residual."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..engine import Tensor, square, tsum
from .geometry import Geometry, support_mask
from .projector import forward_project
from .transforms import rotate_inplane, shift_angles


def check_support(values: np.ndarray, fill: float = 0.0, tol: float = 1e-9) -> None:
    """Reject volumes with content outside the inscribed support disk."""
    outside = ~support_mask(*values.shape[-2:])
    dev = np.abs(values[..., outside] - fill)
    scale = max(float(np.abs(values).max()), 1.0)
    if dev.size and float(dev.max()) > tol * scale:
        raise ValueError("volume has content outside the inscribed circle; rotation "
                         "equivariance does not hold there (mask the volume first)")


def equivariance_residual(x_hat, y0, g: Geometry, angles: Sequence[float],
                          fill: float = 0.0, check: bool = True):
    """Sum over ``angles`` of ``||shift(y0, phi) - A(rotate(x_hat, phi))||^2``.

    ``x_hat`` must be in the units ``y0`` integrates (attenuation per voxel,
    air = ``fill`` = 0) and supported inside the inscribed circle. A
    :class:`Tensor` input yields a recorded scalar tensor; arrays yield a float.
    """
    y = y0.values if hasattr(y0, "values") else np.asarray(y0, dtype=np.float64)
    xv = x_hat.data if isinstance(x_hat, Tensor) else np.asarray(x_hat, dtype=np.float64)
    if xv.ndim != 3 or y.ndim != 3 or xv.shape[0] != y.shape[0]:
        raise ValueError(f"volume {xv.shape} and sinogram {y.shape} stacks do not match")
    if check:
        check_support(xv, fill)
    if isinstance(x_hat, Tensor):
        total = None
        for phi in angles:
            target = Tensor(shift_angles(y, phi, g))
            r = target - forward_project(rotate_inplane(x_hat, phi, fill=fill), g)
            term = tsum(square(r))
            total = term if total is None else total + term
        return total
    total = 0.0
    for phi in angles:
        r = shift_angles(y, phi, g) - forward_project(rotate_inplane(xv, phi, fill=fill), g)
        total += float(np.dot(r.ravel(), r.ravel()))
    return total
