"""Latent diffusion: schedule algebra, conditional U-Net, training objective and sampler."""
from .model import (DDPMTerms, DiffusionCheckpoint, Guidance, ddpm_loss, ddpm_terms,
                    equivariance_gradient, guided_score, new_checkpoint, predict_eps, sample,
                    sample_guided, sample_latent, timed_sample)
from .schedule import (Schedule, ddim_step, ddim_timesteps, make_schedule, q_sample,
                       recover_z0)
from .unet import init_unet, timestep_embedding, unet_forward

__all__ = [
    "Schedule", "make_schedule", "q_sample", "recover_z0", "ddim_step", "ddim_timesteps",
    "timestep_embedding", "init_unet", "unet_forward",
    "DiffusionCheckpoint", "new_checkpoint", "predict_eps", "DDPMTerms", "ddpm_terms",
    "ddpm_loss", "sample", "sample_latent", "timed_sample", "equivariance_gradient",
    "guided_score", "Guidance", "sample_guided",
]
