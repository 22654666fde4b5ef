"""Variance-preserving noise schedule and the closed-form latent updates.

Timesteps are 1-based: ``t`` in ``1..T``. ``t = 0`` denotes clean data and
has ``alpha_bar = 1`` by convention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..engine import Tensor


@dataclass(frozen=True)
class Schedule:
    T: int
    beta_min: float
    beta_max: float
    betas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t) -> np.ndarray:
        """``alpha_bar_t`` for integer ``t`` in ``0..T`` (scalar or array)."""
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            if not np.all(t == np.round(t)):
                raise ValueError(f"timesteps must be integers, got {t}")
            t = t.astype(np.int64)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 0..{self.T}: {t}")
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]

    def as_dict(self) -> dict:
        return {"T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max}


def make_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 5e-3) -> Schedule:
    """Linear betas including both endpoints; running product for alpha_bar."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    betas = np.linspace(beta_min, beta_max, int(T)) if T > 1 else np.array([float(beta_min)])
    alpha_bars = np.cumprod(1.0 - betas)
    betas.flags.writeable = False
    alpha_bars.flags.writeable = False
    return Schedule(int(T), float(beta_min), float(beta_max), betas, alpha_bars)


def _valid_t(t, sched: Schedule) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ValueError(f"timestep out of range 1..{sched.T}: {t}")
    return t


def _coef(c: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Broadcast a scalar or per-batch coefficient over a [B, ...] array."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 0:
        return np.full(shape, float(c))
    return np.broadcast_to(c.reshape((-1,) + (1,) * (len(shape) - 1)), shape).copy()


def _affine(a, ca: np.ndarray, b, cb: np.ndarray):
    """``ca * a + cb * b`` for arrays or tensors; coefficients are constants."""
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        ta = a if isinstance(a, Tensor) else Tensor(a)
        tb = b if isinstance(b, Tensor) else Tensor(b)
        return ta * Tensor(_coef(ca, ta.shape)) + tb * Tensor(_coef(cb, tb.shape))
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return _coef(ca, a.shape) * a + _coef(cb, b.shape) * b


def q_sample(z0, t, eps, sched: Schedule):
    """``sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps``; ``t`` scalar or one per batch item."""
    ab = sched.alpha_bar(_valid_t(t, sched))
    if np.shape(z0) != np.shape(eps):
        raise ValueError(f"q_sample: z0 {np.shape(z0)} and eps {np.shape(eps)} differ")
    return _affine(z0, np.sqrt(ab), eps, np.sqrt(1.0 - ab))


def recover_z0(z_t, t, eps_hat, sched: Schedule):
    """Invert the forward corruption given a noise estimate."""
    ab = sched.alpha_bar(_valid_t(t, sched))
    if np.shape(z_t) != np.shape(eps_hat):
        raise ValueError(f"recover_z0: z_t {np.shape(z_t)} and eps {np.shape(eps_hat)} differ")
    return _affine(z_t, 1.0 / np.sqrt(ab), eps_hat, -np.sqrt(1.0 - ab) / np.sqrt(ab))


def ddim_step(z_t, t: int, t_prev: int, eps_hat, sched: Schedule) -> np.ndarray:
    """Deterministic update from ``t`` to ``t_prev < t`` reusing ``eps_hat`` on both terms."""
    if not t_prev < t:
        raise ValueError(f"ddim_step needs t_prev < t, got t={t}, t_prev={t_prev}")
    _valid_t(t, sched)
    if t_prev < 0:
        raise ValueError(f"t_prev must be >= 0, got {t_prev}")
    ab, ab_prev = float(sched.alpha_bar(t)), float(sched.alpha_bar(t_prev))
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    z0 = (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    return np.sqrt(ab_prev) * z0 + np.sqrt(1.0 - ab_prev) * eps_hat


def ddim_timesteps(T: int, n_steps: int) -> list[tuple[int, int]]:
    """(t, t_prev) pairs: ``n_steps`` evenly spaced times from T down to 1, then 0."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must be in 1..{T}, got {n_steps}")
    ts = np.unique(np.round(np.linspace(T, 1, n_steps)).astype(np.int64))[::-1]
    seq = [int(v) for v in ts] + [0]
    return list(zip(seq[:-1], seq[1:]))
