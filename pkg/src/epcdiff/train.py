"""Diffusion training with image-domain and scheduled projection-equivariance terms."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autoencoder import AECheckpoint, decoder_forward, encode, write_csv
from .config import RunConfig
from .diffusion import (DiffusionCheckpoint, new_checkpoint, predict_eps, ddpm_terms,
                        recover_z0)
from .engine import AdamState, Tape, Tensor, adam_step, backward, reshape, slice_channels
from .losses import LossWeights, image_domain_losses, total_loss
from .nn import param_digest
from .phantom import NORM_TO_MU_OFFSET, NORM_TO_MU_SCALE
from .tomo import Geometry, equivariance_residual, support_mask

LOG_HEADER = ["step", "epoch", "total", "ddpm", "l1", "edge", "lap", "eq"]
STREAMS = {"order": 10, "diffusion": 11, "rotation": 12, "init": 13}


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per named purpose, so one stream never shifts another."""
    return np.random.default_rng(np.random.SeedSequence([seed, STREAMS[name]]))


@dataclass
class TrainPair:
    x0: np.ndarray
    xc: np.ndarray
    y0: np.ndarray
    domain: str = "A"
    geometry: Geometry | None = None


@dataclass
class TrainResult:
    ckpt: DiffusionCheckpoint
    rows: list = field(default_factory=list)
    timing: list = field(default_factory=list)
    eq_epochs: list = field(default_factory=list)


def epoch_order(domains: Sequence[str], rng: np.random.Generator, mixed: bool) -> list[int]:
    """Shuffled pair indices; ``mixed`` alternates domains so every window of
    ``2 * batch`` consecutive samples holds ``batch`` of each domain."""
    n = len(domains)
    if not mixed:
        return [int(i) for i in rng.permutation(n)]
    labels = sorted(set(domains))
    if len(labels) != 2:
        raise ValueError(f"balanced mixing needs exactly two domains, got {labels}")
    pools = [[i for i in range(n) if domains[i] == d] for d in labels]
    if len(pools[0]) != len(pools[1]):
        raise ValueError("balanced mixing needs the same number of pairs per domain")
    perm = [rng.permutation(p) for p in pools]
    order = []
    for a, b in zip(*perm):
        order += [int(a), int(b)]
    return order


def draw_rotations(rng: np.random.Generator, g: Geometry, k: int, fractional: bool) -> list[float]:
    """``k`` non-zero rotation angles; integer multiples of the angular step by default."""
    if fractional:
        return [float(v) for v in rng.uniform(0.0, 2.0 * math.pi, size=k)]
    steps = rng.integers(1, g.n_angles, size=k)
    return [float(s) * g.angle_step for s in steps]


def _to_attenuation(x: Tensor, mask: Tensor) -> Tensor:
    return (x * NORM_TO_MU_SCALE + NORM_TO_MU_OFFSET) * mask


def eq_loss(x_hat: Tensor, y0s: Sequence[np.ndarray], geoms: Sequence[Geometry],
            angles: Sequence[Sequence[float]], norm: str = "voxels") -> Tensor:
    """Batch mean of the per-sample equivariance residual (summed over its rotations).

    The decoded image is mapped to attenuation and masked to the inscribed
    disk, where rotation and angular shift commute with projection. ``norm``
    divides each residual by the image voxel count (``"voxels"``, the same
    per-voxel scale as the image-domain losses), by ``||y0||^2`` (``"y0"``)
    or not at all (``"none"``).
    """
    if norm not in ("voxels", "y0", "none"):
        raise ValueError(f"unknown equivariance normalisation {norm!r}")
    B = x_hat.shape[0]
    S, N, M = x_hat.shape[2:]
    mask = Tensor(np.broadcast_to(support_mask(N, M), (S, N, M)).astype(np.float64))
    flat = reshape(x_hat, (1, B, S, N, M))
    total = None
    for b in range(B):
        xb = reshape(slice_channels(flat, b, b + 1), (S, N, M))
        r = equivariance_residual(_to_attenuation(xb, mask), y0s[b], geoms[b], angles[b],
                                  fill=0.0, check=False)
        if norm == "voxels":
            r = r * (1.0 / (S * N * M))
        elif norm == "y0":
            r = r * (1.0 / float(np.sum(y0s[b] ** 2)))
        total = r if total is None else total + r
    return total * (1.0 / B)


def check_compatible(ae: AECheckpoint, cfg: RunConfig, shape: tuple[int, ...]) -> None:
    f_ae = 2 ** ae.config.stages
    if shape[-1] % f_ae or shape[-2] % f_ae:
        raise ValueError(f"volume extent {shape} incompatible with {ae.config.stages} AE stages")
    lat = (shape[-2] // f_ae, shape[-1] // f_ae)
    f_u = 2 ** (cfg.diffusion.levels - 1)
    if lat[0] % f_u or lat[1] % f_u:
        raise ValueError(f"latent extent {lat} not divisible by {f_u} for "
                         f"{cfg.diffusion.levels} U-Net levels")


def train_diffusion(pairs: Sequence[TrainPair], ae: AECheckpoint, cfg: RunConfig, seed: int = 0,
                    epochs: int | None = None, progress=None) -> TrainResult:
    """Train the conditional noise network with the ae frozen.

    Per step: noise objective on the CT latent, recovery of the clean latent,
    decoding, image-domain terms and, on epochs divisible by the period, the
    equivariance term over freshly drawn rotations. The ae parameter digest
    is verified unchanged at the end.
    """
    if not pairs:
        raise ValueError("no training pairs")
    check_compatible(ae, cfg, pairs[0].x0.shape)
    digest = param_digest(ae.params)
    dcfg, lcfg = cfg.diffusion, cfg.loss
    n_epochs = dcfg.epochs if epochs is None else epochs
    weights = LossWeights.from_config(lcfg)
    frozen = ae.frozen()

    z0 = np.stack([encode(p.x0, ae) for p in pairs])
    zc = np.stack([encode(p.xc, ae) for p in pairs])
    scale = 1.0 / float(np.std(z0))
    z0, zc = z0 * scale, zc * scale
    x0 = np.stack([p.x0 for p in pairs])[:, None]
    geoms = [p.geometry or Geometry.for_image(p.x0.shape[1], p.x0.shape[2], p.y0.shape[1])
             for p in pairs]

    init_seed = int(stream(seed, "init").integers(0, 2 ** 63))
    ckpt = new_checkpoint(dcfg, ae.config.latent_channels, seed=init_seed, latent_scale=scale)
    ckpt.ae_digest = digest
    sched = ckpt.schedule
    rng_order, rng_diff, rng_rot = stream(seed, "order"), stream(seed, "diffusion"), stream(seed, "rotation")
    opt = AdamState(lr=dcfg.lr)
    mixed = cfg.mixing == "mixed"
    domains = [p.domain for p in pairs]
    den = lambda zt, t, c: predict_eps(ckpt, zt, t, c)  # noqa: E731

    result = TrainResult(ckpt)
    step = 0
    t_start = time.perf_counter()
    for epoch in range(1, n_epochs + 1):
        eq_epoch = lcfg.eq_enabled and epoch % lcfg.eq_period == 0
        if eq_epoch:
            result.eq_epochs.append(epoch)
        order = epoch_order(domains, rng_order, mixed)
        for i in range(0, len(order), dcfg.batch_size):
            idx = order[i:i + dcfg.batch_size]
            step += 1
            with Tape() as tape:
                terms = ddpm_terms(den, z0[idx], zc[idx], sched, rng_diff)
                z0_hat = recover_z0(Tensor(terms.z_t), terms.t, terms.eps_hat, sched)
                x_hat = decoder_forward(frozen, ae.config, z0_hat * (1.0 / scale))
                parts = image_domain_losses(x_hat, x0[idx])
                l_eq = None
                if eq_epoch:
                    angles = [draw_rotations(rng_rot, geoms[j], lcfg.eq_rotations,
                                             lcfg.eq_fractional) for j in idx]
                    l_eq = eq_loss(x_hat, [pairs[j].y0 for j in idx], [geoms[j] for j in idx],
                                   angles, lcfg.eq_norm)
                total = total_loss(terms.loss, parts, l_eq, weights)
            grads = backward(tape, total)
            tape.release()
            adam_step(ckpt.params, {k: grads[t] for k, t in ckpt.params.items()}, opt)
            row = [step, epoch, total.item(), terms.loss.item(), parts[0].item(),
                   parts[1].item(), parts[2].item(), None if l_eq is None else l_eq.item()]
            result.rows.append(row)
            elapsed = time.perf_counter() - t_start
            result.timing.append([step, epoch, elapsed])
            if progress is not None:
                progress(row, elapsed)
    ckpt.step = step
    if param_digest(ae.params) != digest:
        raise RuntimeError("autoencoder parameters changed during diffusion training")
    return result


def write_log(path, rows) -> None:
    write_csv(path, LOG_HEADER, rows)
