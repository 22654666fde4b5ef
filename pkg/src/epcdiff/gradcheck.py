"""Central finite-difference checks for tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .engine import Tape, Tensor, backward


def numerical_gradient(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5,
                       n_probe: int | None = None, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``t``.

    Returns ``(indices, values)``; with ``n_probe`` only that many randomly
    chosen flat indices are perturbed.
    """
    flat = t.data.reshape(-1)
    if n_probe is None or n_probe >= flat.size:
        idx = np.arange(flat.size)
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        idx = np.sort(rng.choice(flat.size, size=n_probe, replace=False))
    out = np.empty(idx.size)
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        out[k] = (fp - fm) / (2 * h)
    return idx, out


def gradient_error(fn: Callable[[], Tensor], wrt: Sequence[Tensor], h: float = 1e-5,
                   n_probe: int | None = None, seed: int = 0) -> float:
    """Worst relative error between tape gradients and central differences.

    The error for each tensor is ``||g_tape - g_fd|| / max(||g_tape||, ||g_fd||)``
    over the probed entries.
    """
    with Tape() as tape:
        loss = fn()
    grads = backward(tape, loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in wrt:
        idx, fd = numerical_gradient(fn, t, h=h, n_probe=n_probe, rng=rng)
        an = grads.get(t, np.zeros(t.shape)).reshape(-1)[idx]
        scale = max(np.linalg.norm(an), np.linalg.norm(fd), 1e-300)
        worst = max(worst, float(np.linalg.norm(an - fd) / scale))
    return worst
