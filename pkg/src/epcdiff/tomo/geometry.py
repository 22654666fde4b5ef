from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Geometry:
    """Circular parallel-beam sampling applied slice by slice.

    Angles are ``i * 2*pi / n_angles`` for ``i < n_angles``. Detector bin
    ``k`` sits at offset ``(k - (n_det - 1) / 2) * det_spacing`` from the
    rotation axis, in voxel units.
    """

    n_angles: int
    n_det: int
    n_rows: int
    n_cols: int
    det_spacing: float = 1.0

    def __post_init__(self):
        if self.n_angles < 2:
            raise ValueError(f"n_angles must be >= 2, got {self.n_angles}")
        if self.n_det < 1:
            raise ValueError(f"n_det must be >= 1, got {self.n_det}")
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError(f"image extent must be positive, got {self.n_rows}x{self.n_cols}")
        if not self.det_spacing > 0:
            raise ValueError(f"det_spacing must be positive, got {self.det_spacing}")

    @classmethod
    def for_image(cls, n_rows: int, n_cols: int, n_angles: int, n_det: int | None = None,
                  det_spacing: float = 0.5) -> "Geometry":
        """Geometry for an ``n_rows x n_cols`` slice.

        By default the detector uses half-voxel bins and spans the slice
        diagonal, so no ray through the grid is truncated.
        """
        if n_det is None:
            n_det = int(math.ceil(math.hypot(n_rows, n_cols) / det_spacing))
        return cls(n_angles=n_angles, n_det=n_det, n_rows=n_rows, n_cols=n_cols,
                   det_spacing=det_spacing)

    @property
    def angle_step(self) -> float:
        return 2.0 * math.pi / self.n_angles

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles) * self.angle_step

    @property
    def det_offsets(self) -> np.ndarray:
        return (np.arange(self.n_det) - (self.n_det - 1) / 2.0) * self.det_spacing

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.n_angles, self.n_det)

    def as_dict(self) -> dict:
        return {"n_angles": self.n_angles, "n_det": self.n_det, "n_rows": self.n_rows,
                "n_cols": self.n_cols, "det_spacing": self.det_spacing}


def inscribed_radius(n_rows: int, n_cols: int) -> float:
    """Radius (voxels, from the slice centre) of the rotation-safe support disk.

    Two voxels of margin keep bilinear rotation footprints inside the grid.
    """
    return min(n_rows, n_cols) / 2.0 - 2.0


def pixel_coords(n_rows: int, n_cols: int) -> tuple[np.ndarray, np.ndarray]:
    """Centred (x, y) coordinates of every voxel: x along columns, y along rows."""
    y = np.arange(n_rows) - (n_rows - 1) / 2.0
    x = np.arange(n_cols) - (n_cols - 1) / 2.0
    return np.meshgrid(x, y, indexing="xy")


def support_mask(n_rows: int, n_cols: int) -> np.ndarray:
    x, y = pixel_coords(n_rows, n_cols)
    return (x * x + y * y) <= inscribed_radius(n_rows, n_cols) ** 2
