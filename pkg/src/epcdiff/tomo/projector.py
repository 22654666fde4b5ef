"""Matched ray-driven projector pair.

Each ray is sampled at unit steps; every sample reads the slice by bilinear
interpolation (zero outside the grid). The sampling weights are assembled
once per geometry into a sparse matrix, so the backprojector is its exact
transpose.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from ..engine import Tensor, linear_map
from .geometry import Geometry
from .types import SinogramStack, Volume

# instrumentation: number of projector applications (forward or adjoint)
CALLS = {"forward": 0, "adjoint": 0}


def reset_call_counter() -> None:
    CALLS["forward"] = 0
    CALLS["adjoint"] = 0


def _bilinear_entries(rows: np.ndarray, cols: np.ndarray, n_rows: int, n_cols: int):
    """Flattened pixel indices and weights of the four bilinear neighbours."""
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr = rows - r0
    fc = cols - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    out_idx, out_w, out_src = [], [], []
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                      (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr = r0 + dr
        cc = c0 + dc
        ok = (rr >= 0) & (rr < n_rows) & (cc >= 0) & (cc < n_cols) & (w != 0)
        out_idx.append(rr[ok] * n_cols + cc[ok])
        out_w.append(w[ok])
        out_src.append(np.nonzero(ok)[0])
    return out_idx, out_w, out_src


@lru_cache(maxsize=16)
def system_matrix(g: Geometry) -> sp.csr_matrix:
    """Sparse [n_angles * n_det, n_rows * n_cols] matrix of the forward operator."""
    N, M = g.n_rows, g.n_cols
    n_samples = int(np.ceil(np.hypot(N, M))) + 2
    ls = np.arange(n_samples) - (n_samples - 1) / 2.0
    s = g.det_offsets
    cy, cx = (N - 1) / 2.0, (M - 1) / 2.0
    blocks = []
    chunk = max(1, 2_000_000 // (g.n_det * n_samples))
    for a0 in range(0, g.n_angles, chunk):
        th = g.angles[a0:a0 + chunk]
        ct, st = np.cos(th), np.sin(th)
        # points: s * (cos, sin) + l * (-sin, cos), shape [angles, det, samples]
        x = s[None, :, None] * ct[:, None, None] - ls[None, None, :] * st[:, None, None]
        y = s[None, :, None] * st[:, None, None] + ls[None, None, :] * ct[:, None, None]
        ray = np.broadcast_to(np.arange(th.size * g.n_det).reshape(th.size, g.n_det, 1),
                              x.shape).ravel()
        idx, wts, src = _bilinear_entries((y + cy).ravel(), (x + cx).ravel(), N, M)
        rows = np.concatenate([ray[k] for k in src])
        cols = np.concatenate(idx)
        vals = np.concatenate(wts)
        blocks.append(sp.csr_matrix((vals, (rows, cols)), shape=(th.size * g.n_det, N * M)))
    mat = sp.vstack(blocks, format="csr")
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def _check_volume(arr: np.ndarray, g: Geometry) -> None:
    if arr.ndim != 3 or arr.shape[1:] != (g.n_rows, g.n_cols):
        raise ValueError(f"volume shape {arr.shape} does not match geometry slice "
                         f"{g.n_rows}x{g.n_cols}")


def _check_sino(arr: np.ndarray, g: Geometry) -> None:
    if arr.ndim != 3 or arr.shape[1:] != g.sino_shape:
        raise ValueError(f"sinogram shape {arr.shape} does not match geometry "
                         f"{g.n_angles} angles x {g.n_det} bins")


def _project(arr: np.ndarray, g: Geometry) -> np.ndarray:
    _check_volume(arr, g)
    CALLS["forward"] += 1
    S = arr.shape[0]
    out = system_matrix(g) @ arr.reshape(S, -1).T
    return np.ascontiguousarray(out.T).reshape(S, g.n_angles, g.n_det)


def _backproject(arr: np.ndarray, g: Geometry) -> np.ndarray:
    _check_sino(arr, g)
    CALLS["adjoint"] += 1
    S = arr.shape[0]
    out = system_matrix(g).T @ arr.reshape(S, -1).T
    return np.ascontiguousarray(out.T).reshape(S, g.n_rows, g.n_cols)


def forward_project(v, g: Geometry):
    """Line integrals of every slice of ``v`` ([S, N, M]) -> [S, n_angles, n_det].

    Accepts an ndarray, a :class:`Volume` (returns a :class:`SinogramStack`)
    or a :class:`Tensor` (recorded on the active tape).
    """
    if isinstance(v, Tensor):
        return linear_map(v, lambda a: _project(a, g), lambda a: _backproject(a, g),
                          kind="forward_project")
    if isinstance(v, Volume):
        return SinogramStack(_project(v.values, g), g)
    return _project(np.asarray(v, dtype=np.float64), g)


def backproject(s, g: Geometry):
    """Exact transpose of :func:`forward_project`."""
    if isinstance(s, Tensor):
        return linear_map(s, lambda a: _backproject(a, g), lambda a: _project(a, g),
                          kind="backproject")
    if isinstance(s, SinogramStack):
        return Volume(_backproject(s.values, g), unit="attenuation")
    return _backproject(np.asarray(s, dtype=np.float64), g)


def adjoint_test(g: Geometry, seed: int = 0, depth: int = 1) -> dict:
    """Compare <A v, s> with <v, A^T s> for random v, s."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((depth, g.n_rows, g.n_cols))
    s = rng.standard_normal((depth, g.n_angles, g.n_det))
    av = _project(v, g)
    lhs = float(np.dot(av.ravel(), s.ravel()))
    rhs = float(np.dot(v.ravel(), _backproject(s, g).ravel()))
    gap = abs(lhs - rhs) / (np.linalg.norm(av) * np.linalg.norm(s))
    return {"lhs": lhs, "rhs": rhs, "relative_gap": float(gap)}
