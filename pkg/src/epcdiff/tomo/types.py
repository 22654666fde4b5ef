from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Geometry

UNITS = ("HU", "normalized", "attenuation")


@dataclass
class Volume:
    """Stack of axial slices, shape [S, N, M]."""

    values: np.ndarray
    unit: str = "normalized"
    voxel_size: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.unit not in UNITS:
            raise ValueError(f"unknown unit {self.unit!r}; expected one of {UNITS}")
        if self.values.ndim != 3:
            raise ValueError(f"volume must be [S, N, M], got shape {self.values.shape}")
        if self.unit == "normalized" and self.values.size:
            lo, hi = float(self.values.min()), float(self.values.max())
            if lo < -1.0 or hi > 1.0:
                raise ValueError(f"normalized volume outside [-1, 1]: [{lo}, {hi}]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass
class SinogramStack:
    """Per-slice sinograms, shape [S, n_angles, n_det]."""

    values: np.ndarray
    geometry: Geometry

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        g = self.geometry
        if self.values.ndim != 3 or self.values.shape[1:] != g.sino_shape:
            raise ValueError(f"sinogram shape {self.values.shape} inconsistent with "
                             f"{g.n_angles} angles x {g.n_det} bins")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sinogram contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape
