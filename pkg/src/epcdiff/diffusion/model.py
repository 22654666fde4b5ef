"""Conditional latent diffusion: objective, sampler and the equivariance-guided score."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import container
from ..autoencoder import AECheckpoint, decode, decoder_forward, encode
from ..config import DiffusionConfig
from ..engine import Tape, Tensor, backward, mean, square
from ..nn import Params, arrays_to_params, check_shapes, params_to_arrays
from ..phantom import NORM_TO_MU_OFFSET, NORM_TO_MU_SCALE
from ..tomo import (Geometry, backproject, forward_project, rotate_adjoint, rotate_inplane,
                    shift_angles, support_mask)
from .schedule import Schedule, ddim_step, ddim_timesteps, make_schedule, q_sample
from .unet import init_unet, unet_forward

Denoiser = Callable[[Tensor, np.ndarray, Tensor], Tensor]


@dataclass
class DiffusionCheckpoint:
    params: Params
    config: DiffusionConfig
    latent_channels: int
    latent_scale: float = 1.0  # diffusion runs on latent_scale * E(x)
    step: int = 0
    ae_digest: str = ""
    ae_path: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def schedule(self) -> Schedule:
        c = self.config
        return make_schedule(c.T, c.beta_min, c.beta_max)

    def save(self, path) -> Path:
        meta = {"kind": "diffusion", "config": asdict(self.config),
                "schedule": self.schedule.as_dict(), "latent_channels": self.latent_channels,
                "latent_scale": self.latent_scale, "step": self.step,
                "ae_digest": self.ae_digest, "ae_path": self.ae_path, "extra": self.extra}
        return container.save(path, params_to_arrays(self.params), meta=meta)

    @classmethod
    def load(cls, path) -> "DiffusionCheckpoint":
        arrays, meta = container.load(path)
        if meta.get("kind") != "diffusion":
            raise ValueError(f"{path} is not a diffusion checkpoint")
        cfg = DiffusionConfig(**meta["config"])
        params = arrays_to_params(arrays)
        check_shapes(params, init_unet(cfg, meta["latent_channels"]), "diffusion checkpoint")
        return cls(params, cfg, meta["latent_channels"], meta["latent_scale"], meta["step"],
                   meta.get("ae_digest", ""), meta.get("ae_path", ""), meta.get("extra", {}))


def new_checkpoint(cfg: DiffusionConfig, latent_channels: int, seed: int = 0,
                   latent_scale: float = 1.0) -> DiffusionCheckpoint:
    return DiffusionCheckpoint(init_unet(cfg, latent_channels, seed), cfg, latent_channels,
                               latent_scale)


def predict_eps(ckpt: DiffusionCheckpoint, z_t, t, z_c) -> Tensor:
    """Noise estimate for [B, C, S, N', M'] latents (rank-4 inputs get a batch axis)."""
    zt = z_t if isinstance(z_t, Tensor) else Tensor(_batched(z_t))
    zc = z_c if isinstance(z_c, Tensor) else Tensor(_batched(z_c))
    if zt.shape[1] != ckpt.latent_channels:
        raise ValueError(f"latent has {zt.shape[1]} channels, model expects "
                         f"{ckpt.latent_channels}")
    return unet_forward(ckpt.params, ckpt.config, zt, t, zc)


def _batched(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[None] if a.ndim == 4 else a


@dataclass
class DDPMTerms:
    loss: Tensor
    t: np.ndarray
    eps: np.ndarray
    z_t: np.ndarray
    eps_hat: Tensor


def ddpm_terms(denoiser: Denoiser, z0: np.ndarray, zc: np.ndarray, sched: Schedule,
               rng: np.random.Generator) -> DDPMTerms:
    """Draw ``t ~ U{1..T}`` per item and ``eps ~ N(0, I)``; mean squared noise error."""
    z0 = _batched(z0)
    zc = _batched(zc)
    t = rng.integers(1, sched.T + 1, size=z0.shape[0])
    eps = rng.standard_normal(z0.shape)
    z_t = q_sample(z0, t, eps, sched)
    eps_hat = denoiser(Tensor(z_t), t, Tensor(zc))
    loss = mean(square(eps_hat - Tensor(eps)))
    return DDPMTerms(loss, t, eps, z_t, eps_hat)


def ddpm_loss(ckpt: DiffusionCheckpoint, x0, xc, sched: Schedule, seed: int,
              ae: AECheckpoint, denoiser: Denoiser | None = None) -> Tensor:
    """Encode the pair, corrupt the CT latent and score the noise prediction."""
    z0 = encode(x0, ae) * ckpt.latent_scale
    zc = encode(xc, ae) * ckpt.latent_scale
    den = denoiser or (lambda zt, t, c: predict_eps(ckpt, zt, t, c))
    return ddpm_terms(den, z0, zc, sched, np.random.default_rng(seed)).loss


def sample_latent(ckpt: DiffusionCheckpoint, zc: np.ndarray, n_steps: int, seed: int,
                  denoiser: Denoiser | None = None) -> np.ndarray:
    """DDIM from seeded standard normal noise; returns the scaled latent estimate."""
    sched = ckpt.schedule
    zc = _batched(zc)
    z = np.random.default_rng(seed).standard_normal(zc.shape)
    den = denoiser or (lambda zt, t, c: predict_eps(ckpt, zt, t, c))
    for t, t_prev in ddim_timesteps(sched.T, n_steps):
        eps_hat = den(Tensor(z), np.full(z.shape[0], t), Tensor(zc)).data
        z = ddim_step(z, t, t_prev, eps_hat, sched)
    return z


def sample(ckpt: DiffusionCheckpoint, ae: AECheckpoint, xc, n_steps: int = 100,
           seed: int = 0) -> np.ndarray:
    """Synthetic CT [S, N, M] in normalised units from a normalised CBCT volume.

    Only the encoder, the noise network and the decoder run here; no
    tomographic operator is touched.
    """
    xv = xc.values if hasattr(xc, "values") else np.asarray(xc, dtype=np.float64)
    zc = encode(xv, ae) * ckpt.latent_scale
    z = sample_latent(ckpt, zc, n_steps, seed)
    return decode(z[0] / ckpt.latent_scale, ae)


def timed_sample(ckpt, ae, xc, n_steps: int = 100, seed: int = 0) -> tuple[np.ndarray, float]:
    t0 = time.perf_counter()
    out = sample(ckpt, ae, xc, n_steps, seed)
    return out, time.perf_counter() - t0


def equivariance_gradient(x_hat: np.ndarray, y0: np.ndarray, g: Geometry,
                          angles: Sequence[float], fill: float = 0.0) -> np.ndarray:
    """Gradient of ``1/2 * sum_phi ||shift(y0, phi) - A rotate(x_hat, phi)||^2`` in ``x_hat``.

    Equals ``-sum_phi R_phi^T A^T (shift(y0, phi) - A R_phi x_hat)``.
    """
    x_hat = np.asarray(x_hat, dtype=np.float64)
    y = y0.values if hasattr(y0, "values") else np.asarray(y0, dtype=np.float64)
    grad = np.zeros_like(x_hat)
    for phi in angles:
        r = shift_angles(y, phi, g) - forward_project(rotate_inplane(x_hat, phi, fill=fill), g)
        grad -= rotate_adjoint(backproject(r, g), phi)
    return grad


def guided_score(score, x_hat, y0, g: Geometry, angles: Sequence[float], lambda_eq: float,
                 sigma2: float = 1.0, fill: float = 0.0) -> np.ndarray:
    """Base score plus ``(lambda_eq / sigma2) * sum_phi R^T A^T (shift(y0) - A R x_hat)``.

    The correction is the negative scaled gradient of half the equivariance
    residual, i.e. the score of a Gaussian measurement likelihood on the
    rotated projections. Analysis tool only; the default sampler never calls it.
    """
    score = np.asarray(score, dtype=np.float64)
    if score.shape != np.shape(x_hat):
        raise ValueError(f"score {score.shape} and image {np.shape(x_hat)} shapes differ")
    if lambda_eq == 0.0:
        return score.copy()
    return score - (lambda_eq / sigma2) * equivariance_gradient(x_hat, y0, g, angles, fill)


@dataclass
class Guidance:
    """Measurement guidance for the experimental guided sampler (needs CT projections)."""

    y0: np.ndarray
    geometry: Geometry
    angles: Sequence[float]
    lambda_eq: float = 0.1
    sigma2: float = 1.0


def sample_guided(ckpt: DiffusionCheckpoint, ae: AECheckpoint, xc, guidance: Guidance,
                  n_steps: int = 100, seed: int = 0) -> np.ndarray:
    """DDIM where each noise estimate is corrected by the equivariance likelihood score.

    The image-domain correction of :func:`guided_score` is pulled back to the
    latent through the frozen decoder; the corrected latent score
    ``-eps / sqrt(1 - ab) + J^T c`` is turned back into a noise estimate.
    Unlike :func:`sample` this path applies the projector at every step.
    """
    sched = ckpt.schedule
    xv = xc.values if hasattr(xc, "values") else np.asarray(xc, dtype=np.float64)
    zc = _batched(encode(xv, ae) * ckpt.latent_scale)
    z = np.random.default_rng(seed).standard_normal(zc.shape)
    frozen = ae.frozen()
    mask = support_mask(*xv.shape[-2:])
    for t, t_prev in ddim_timesteps(sched.T, n_steps):
        eps_hat = predict_eps(ckpt, z, np.full(z.shape[0], t), zc).data
        ab = float(sched.alpha_bar(t))
        z0_hat = Tensor((z - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab), requires_grad=True)
        with Tape() as tape:
            x_hat = decoder_forward(frozen, ae.config, z0_hat * (1.0 / ckpt.latent_scale))
            mu = (x_hat.data[0, 0] * NORM_TO_MU_SCALE + NORM_TO_MU_OFFSET) * mask
            corr = guided_score(np.zeros_like(mu), mu, guidance.y0, guidance.geometry,
                                guidance.angles, guidance.lambda_eq, guidance.sigma2)
            # chain rule through masking, the affine unit map and the decoder
            probe = np.zeros(x_hat.shape)
            probe[0, 0] = corr * mask * NORM_TO_MU_SCALE
            inner = (x_hat * Tensor(probe)).sum()
        c_z = backward(tape, inner)[z0_hat]
        tape.release()
        # d z0_hat / d z_t = 1 / sqrt(ab)
        eps_hat = eps_hat - np.sqrt(1.0 - ab) * c_z / np.sqrt(ab)
        z = ddim_step(z, t, t_prev, eps_hat, sched)
    return decode(z[0] / ckpt.latent_scale, ae)
