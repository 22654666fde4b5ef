"""Conditional noise-prediction U-Net on latent volumes."""
from __future__ import annotations

import numpy as np

from ..config import DiffusionConfig
from ..engine import Tensor, concat_channels, resample, silu
from ..nn import ParamBuilder, Params, apply_conv, apply_dense, apply_norm, apply_resblock


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Interleaved sin/cos features over geometrically spaced frequencies (base 10000).

    Column ``2i`` is ``sin(t * f_i)`` and ``2i + 1`` is ``cos(t * f_i)`` with
    ``f_i = 10000 ** (-i / (dim / 2))``.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"embedding dimension must be even and >= 2, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = 10000.0 ** (-np.arange(dim // 2) / (dim // 2))
    arg = t[:, None] * freqs[None, :]
    out = np.empty((t.size, dim))
    out[:, 0::2] = np.sin(arg)
    out[:, 1::2] = np.cos(arg)
    return out


def level_widths(cfg: DiffusionConfig) -> list[int]:
    return [cfg.base_width * (2 ** min(l, 1)) for l in range(cfg.levels)]


def init_unet(cfg: DiffusionConfig, latent_channels: int, seed: int = 0) -> Params:
    w = level_widths(cfg)
    for c in w:
        if c % cfg.groups:
            raise ValueError(f"width {c} not divisible by {cfg.groups} groups")
    b = ParamBuilder(np.random.default_rng(seed))
    b.dense("temb.d1", cfg.temb_dim, cfg.temb_dim)
    b.dense("temb.d2", cfg.temb_dim, cfg.temb_dim)
    b.conv("in", 2 * latent_channels, w[0])
    prev = w[0]
    for l, c in enumerate(w):
        b.resblock(f"down{l}", prev, c, temb=cfg.temb_dim)
        prev = c
    b.resblock("mid", prev, prev, temb=cfg.temb_dim)
    for l in reversed(range(cfg.levels)):
        b.resblock(f"up{l}", prev + w[l], w[l], temb=cfg.temb_dim)
        prev = w[l]
    b.norm("out_n", w[0])
    b.conv("out", w[0], latent_channels, scale=0.1)
    return b.params


def unet_forward(p: Params, cfg: DiffusionConfig, z_t: Tensor, t, z_c: Tensor) -> Tensor:
    """Predicted noise with the shape of ``z_t``.

    ``h0 = conv([z_t || z_c])``; each level is a time-conditioned residual
    block, followed by in-plane downsampling except at the coarsest level. The
    decoder concatenates the matching skip before its block and upsamples.
    """
    if z_t.shape != z_c.shape:
        raise ValueError(f"z_t {z_t.shape} and condition {z_c.shape} shapes differ")
    f = 2 ** (cfg.levels - 1)
    if z_t.shape[-1] % f or z_t.shape[-2] % f:
        raise ValueError(f"latent in-plane extent {z_t.shape[-2:]} not divisible by {f}")
    temb = timestep_embedding(np.broadcast_to(np.asarray(t), (z_t.shape[0],)), cfg.temb_dim)
    te = apply_dense(p, "temb.d2", silu(apply_dense(p, "temb.d1", Tensor(temb))))
    h = apply_conv(p, "in", concat_channels(z_t, z_c))
    skips = []
    for l in range(cfg.levels):
        h = apply_resblock(p, f"down{l}", h, cfg.groups, te)
        skips.append(h)
        if l < cfg.levels - 1:
            h = resample(h, "down_avg2_inplane")
    h = apply_resblock(p, "mid", h, cfg.groups, te)
    for l in reversed(range(cfg.levels)):
        h = apply_resblock(p, f"up{l}", concat_channels(h, skips[l]), cfg.groups, te)
        if l > 0:
            h = resample(h, "up_nearest2_inplane")
    return apply_conv(p, "out", silu(apply_norm(p, "out_n", h, cfg.groups)))
