"""Training objective: image-domain terms and their weighted combination."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .engine import Tensor, abs_, laplacian, mean, spatial_gradient


@dataclass(frozen=True)
class LossWeights:
    l1: float = 0.6
    edge: float = 0.2
    lap: float = 0.2
    eq: float = 0.1

    def __post_init__(self):
        for name in ("l1", "edge", "lap", "eq"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {getattr(self, name)}")

    @classmethod
    def from_config(cls, cfg) -> "LossWeights":
        return cls(cfg.l1, cfg.edge, cfg.lap, cfg.eq)


def image_domain_losses(x_hat: Tensor, x0) -> tuple[Tensor, Tensor, Tensor]:
    """Mean absolute differences of values, forward gradients and Laplacians.

    Both operators are linear, so each term is evaluated on the difference
    ``x_hat - x0``. Inputs are [B, C, S, N, M].
    """
    x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
    if x_hat.shape != x0.shape:
        raise ValueError(f"image losses: shapes differ, {x_hat.shape} vs {x0.shape}")
    d = x_hat - x0
    return mean(abs_(d)), mean(abs_(spatial_gradient(d))), mean(abs_(laplacian(d)))


def total_loss(ddpm: Tensor, parts: tuple[Tensor, Tensor, Tensor], l_eq: Tensor | None,
               w: LossWeights) -> Tensor:
    """``ddpm + w.l1*L1 + w.edge*L_edge + w.lap*L_lap + w.eq*L_eq``.

    ``l_eq = None`` marks an epoch without the equivariance term. A zero
    weight drops its term from the graph entirely.
    """
    named = [("ddpm", ddpm, 1.0), ("l1", parts[0], w.l1), ("edge", parts[1], w.edge),
             ("lap", parts[2], w.lap)]
    if l_eq is not None:
        named.append(("eq", l_eq, w.eq))
    for name, term, _ in named:
        val = term.item() if isinstance(term, Tensor) else float(term)
        if not math.isfinite(val):
            raise FloatingPointError(f"loss term {name!r} is not finite ({val})")
    total = ddpm
    for name, term, weight in named[1:]:
        if weight != 0.0:
            total = total + term * float(weight)
    return total
