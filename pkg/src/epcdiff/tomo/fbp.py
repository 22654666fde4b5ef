"""Filtered backprojection for full-circle parallel-beam data."""
from __future__ import annotations

import numpy as np

from .geometry import Geometry, pixel_coords
from .types import SinogramStack, Volume


def ramlak_kernel(n_det: int, spacing: float = 1.0) -> np.ndarray:
    """Spatial Ram-Lak taps for offsets ``-(n_det-1) .. n_det-1``."""
    n = np.arange(-(n_det - 1), n_det)
    h = np.zeros(n.size)
    h[n == 0] = 1.0 / (4.0 * spacing ** 2)
    odd = n % 2 == 1
    h[odd] = -1.0 / (np.pi ** 2 * n[odd].astype(float) ** 2 * spacing ** 2)
    return h


def filter_response(n_det: int, spacing: float, window: str, n_fft: int) -> np.ndarray:
    """Frequency response (rfft bins) of the windowed, discretised ramp."""
    h = ramlak_kernel(n_det, spacing)
    padded = np.zeros(n_fft)
    # place tap 0 at index 0 with negative offsets wrapped to the end
    padded[:n_det] = h[n_det - 1:]
    if n_det > 1:
        padded[-(n_det - 1):] = h[:n_det - 1]
    resp = np.real(np.fft.rfft(padded))
    if window == "hann":
        f = np.fft.rfftfreq(n_fft)  # cycles per sample, 0 .. 0.5
        resp = resp * 0.5 * (1.0 + np.cos(2.0 * np.pi * f))
    elif window != "ram_lak":
        raise ValueError(f"unknown filter window {window!r}; expected 'ram_lak' or 'hann'")
    return resp


def filter_sinogram(sino: np.ndarray, g: Geometry, window: str = "ram_lak") -> np.ndarray:
    """Convolve every detector row with the (apodised) ramp, times bin width."""
    n_fft = 1 << int(np.ceil(np.log2(2 * g.n_det - 1)))
    resp = filter_response(g.n_det, g.det_spacing, window, n_fft)
    spec = np.fft.rfft(sino, n=n_fft, axis=-1) * resp
    return np.fft.irfft(spec, n=n_fft, axis=-1)[..., :g.n_det] * g.det_spacing


def pixel_backproject(q: np.ndarray, g: Geometry) -> np.ndarray:
    """Voxel-driven backprojection: sum over angles of linearly interpolated rows."""
    S = q.shape[0]
    x, y = pixel_coords(g.n_rows, g.n_cols)
    out = np.zeros((S, g.n_rows * g.n_cols))
    xr, yr = x.ravel(), y.ravel()
    centre = (g.n_det - 1) / 2.0
    for a, th in enumerate(g.angles):
        t = (xr * np.cos(th) + yr * np.sin(th)) / g.det_spacing + centre
        k0 = np.floor(t).astype(np.int64)
        f = t - k0
        row = q[:, a, :]
        lo = np.clip(k0, 0, g.n_det - 1)
        hi = np.clip(k0 + 1, 0, g.n_det - 1)
        w_lo = np.where((k0 >= 0) & (k0 < g.n_det), 1.0 - f, 0.0)
        w_hi = np.where((k0 + 1 >= 0) & (k0 + 1 < g.n_det), f, 0.0)
        out += row[:, lo] * w_lo + row[:, hi] * w_hi
    return out.reshape(S, g.n_rows, g.n_cols)


def fbp(s, g: Geometry, window: str = "ram_lak"):
    """Filtered backprojection of [S, n_angles, n_det] sinograms.

    Full-circle data covers every line twice, hence the ``pi / n_angles``
    angular weight (half of the ``2 pi / n_angles`` step).
    """
    if g.n_det < 8:
        raise ValueError(f"fbp needs at least 8 detector bins, got {g.n_det}")
    arr = s.values if isinstance(s, SinogramStack) else np.asarray(s, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[1:] != g.sino_shape:
        raise ValueError(f"sinogram shape {arr.shape} does not match geometry "
                         f"{g.n_angles} angles x {g.n_det} bins")
    q = filter_sinogram(arr, g, window)
    rec = pixel_backproject(q, g) * (np.pi / g.n_angles)
    if isinstance(s, SinogramStack):
        return Volume(rec, unit="attenuation")
    return rec
