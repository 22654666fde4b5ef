"""In-plane rotation of volumes and angular shifts of sinograms."""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from ..engine import Tensor, linear_map
from .geometry import Geometry, pixel_coords
from .projector import _bilinear_entries
from .types import SinogramStack, Volume

AIR_NORMALIZED = -1.0
AIR_HU = -1000.0


def _snap(a: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    r = np.round(a)
    return np.where(np.abs(a - r) < tol, r, a)


@lru_cache(maxsize=64)
def rotation_operator(n_rows: int, n_cols: int, phi: float) -> tuple[sp.csr_matrix, np.ndarray]:
    """Sparse bilinear resampling matrix and the weight each voxel gives the exterior.

    ``rotated = R @ v + fill * outside`` rotates a slice counter-clockwise
    (x along columns, y along rows) about its centre by ``phi``.
    """
    x, y = pixel_coords(n_rows, n_cols)
    c, s = math.cos(phi), math.sin(phi)
    sx = _snap(x * c + y * s + (n_cols - 1) / 2.0).ravel()
    sy = _snap(-x * s + y * c + (n_rows - 1) / 2.0).ravel()
    idx, wts, src = _bilinear_entries(sy, sx, n_rows, n_cols)
    rows = np.concatenate(src)
    mat = sp.csr_matrix((np.concatenate(wts), (rows, np.concatenate(idx))),
                        shape=(n_rows * n_cols, n_rows * n_cols))
    mat.sum_duplicates()
    inside = np.asarray(mat.sum(axis=1)).ravel()
    return mat, 1.0 - inside


def _rotate(arr: np.ndarray, phi: float, fill: float) -> np.ndarray:
    if phi == 0.0:
        return arr.copy()
    S, N, M = arr.shape
    mat, outside = rotation_operator(N, M, float(phi))
    out = (mat @ arr.reshape(S, -1).T).T
    if fill != 0.0:
        out = out + fill * outside
    return np.ascontiguousarray(out).reshape(S, N, M)


def _rotate_adjoint(g: np.ndarray, phi: float) -> np.ndarray:
    if phi == 0.0:
        return g.copy()
    S, N, M = g.shape
    mat, _ = rotation_operator(N, M, float(phi))
    return np.ascontiguousarray((mat.T @ g.reshape(S, -1).T).T).reshape(S, N, M)


def rotate_adjoint(g: np.ndarray, phi: float) -> np.ndarray:
    """Transpose of the linear part of :func:`rotate_inplane` on [S, N, M] arrays."""
    return _rotate_adjoint(np.asarray(g, dtype=np.float64), phi)


def rotate_inplane(v, phi: float, fill: float = AIR_NORMALIZED):
    """Rotate every axial slice about its centre with bilinear interpolation.

    Samples that fall outside the grid read ``fill`` (air). The map is affine
    in ``v``; for a :class:`Tensor` its linear part is recorded on the tape.
    """
    if isinstance(v, Tensor):
        return linear_map(v, lambda a: _rotate(a, phi, fill), lambda a: _rotate_adjoint(a, phi),
                          kind="rotate_inplane", phi=phi)
    if isinstance(v, Volume):
        air = {"normalized": AIR_NORMALIZED, "HU": AIR_HU, "attenuation": 0.0}[v.unit]
        return Volume(_rotate(v.values, phi, air), unit=v.unit, voxel_size=v.voxel_size)
    return _rotate(np.asarray(v, dtype=np.float64), phi, fill)


def _shift_weights(phi: float, g: Geometry) -> tuple[int, float]:
    k = phi / g.angle_step
    k0 = math.floor(k)
    frac = k - k0
    if frac < 1e-9:
        frac = 0.0
    elif frac > 1.0 - 1e-9:
        k0, frac = k0 + 1, 0.0
    return k0, frac


def _shift(arr: np.ndarray, k0: int, frac: float) -> np.ndarray:
    out = np.roll(arr, k0, axis=1)
    if frac:
        out = (1.0 - frac) * out + frac * np.roll(arr, k0 + 1, axis=1)
    return out


def _shift_adjoint(arr: np.ndarray, k0: int, frac: float) -> np.ndarray:
    out = np.roll(arr, -k0, axis=1)
    if frac:
        out = (1.0 - frac) * out + frac * np.roll(arr, -k0 - 1, axis=1)
    return out


def shift_angles(s, phi: float, g: Geometry):
    """Shift sinogram rows by ``phi / angle_step`` positions with circular wrap.

    Output row ``i`` reads input row ``i - k``; fractional ``k`` blends the two
    nearest rows linearly. Rotating an object by ``phi`` produces exactly this
    shift of its (continuous) sinogram.
    """
    k0, frac = _shift_weights(phi, g)
    if isinstance(s, Tensor):
        return linear_map(s, lambda a: _shift(a, k0, frac),
                          lambda a: _shift_adjoint(a, k0, frac), kind="shift_angles", phi=phi)
    if isinstance(s, SinogramStack):
        return SinogramStack(_shift(s.values, k0, frac), s.geometry)
    return _shift(np.asarray(s, dtype=np.float64), k0, frac)
