"""3D residual autoencoder mapping normalised volumes to compact latents.

The encoder halves the in-plane extent ``stages`` times and keeps depth, so a
[S, N, M] volume becomes a [C, S, N / 2**stages, M / 2**stages] latent. The
decoder mirrors it with nearest-neighbour upsampling and ends in ``tanh``.
"""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .config import AEConfig
from .engine import (AdamState, Tape, Tensor, abs_, adam_step, backward, mean, resample, silu,
                     spatial_gradient, tanh)
from .nn import (ParamBuilder, Params, apply_conv, apply_norm, apply_resblock, arrays_to_params,
                 check_shapes, params_to_arrays)
from .tomo import Volume


def widths(cfg: AEConfig) -> list[int]:
    """Channel width per resolution level, full resolution first."""
    return [max(cfg.base_width // 2, cfg.groups)] + [cfg.base_width] * cfg.stages


# full-resolution layers mix in-plane only; 3x3x3 kernels start one level down
INPLANE = (1, 3, 3)


def init_params(cfg: AEConfig, seed: int = 0) -> Params:
    if cfg.latent_channels < 1 or cfg.stages < 1:
        raise ValueError("latent_channels and stages must both be >= 1")
    w = widths(cfg)
    b = ParamBuilder(np.random.default_rng(seed))
    b.conv("enc.in", 1, w[0])
    for s in range(1, cfg.stages + 1):
        b.resblock(f"enc.r{s}", w[s - 1], w[s])
    b.norm("enc.out_n", w[-1])
    b.conv("enc.out", w[-1], cfg.latent_channels)
    b.conv("dec.in", cfg.latent_channels, w[-1])
    b.resblock("dec.mid", w[-1], w[-1])
    for s in range(cfg.stages, 1, -1):
        b.resblock(f"dec.r{s}", w[s], w[s - 1])
    b.conv("dec.full", w[1], w[0], k=INPLANE)
    b.norm("dec.full_n", w[0])
    b.conv("dec.out", w[0], 1)
    return b.params


@dataclass
class AECheckpoint:
    params: Params
    config: AEConfig
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    seed: int = 0

    def save(self, path) -> Path:
        meta = {"kind": "autoencoder", "config": asdict(self.config), "step": self.step,
                "seed": self.seed, "rng_state": self.rng_state}
        return container.save(path, params_to_arrays(self.params), meta=meta)

    @classmethod
    def load(cls, path) -> "AECheckpoint":
        arrays, meta = container.load(path)
        if meta.get("kind") != "autoencoder":
            raise ValueError(f"{path} is not an autoencoder checkpoint")
        cfg = AEConfig(**meta["config"])
        params = arrays_to_params(arrays)
        check_shapes(params, init_params(cfg), "autoencoder checkpoint")
        return cls(params, cfg, meta["step"], meta.get("rng_state", {}), meta.get("seed", 0))

    def frozen(self) -> Params:
        """Parameters as untracked tensors, so no weight gradients are ever formed."""
        return {k: Tensor(v.data, name=k) for k, v in self.params.items()}


def _check_extent(shape: Sequence[int], cfg: AEConfig) -> None:
    f = 2 ** cfg.stages
    if shape[-2] % f or shape[-1] % f:
        raise ValueError(f"in-plane extent {tuple(shape[-2:])} is not divisible by {f} "
                         f"({cfg.stages} downsampling stages)")


def encoder_forward(p: Params, cfg: AEConfig, x: Tensor) -> Tensor:
    """[B, 1, S, N, M] -> [B, C, S, N', M']."""
    _check_extent(x.shape, cfg)
    h = apply_conv(p, "enc.in", x)
    for s in range(1, cfg.stages + 1):
        h = resample(h, "down_avg2_inplane")
        h = apply_resblock(p, f"enc.r{s}", h, cfg.groups)
    h = silu(apply_norm(p, "enc.out_n", h, cfg.groups))
    return apply_conv(p, "enc.out", h)


def decoder_forward(p: Params, cfg: AEConfig, z: Tensor) -> Tensor:
    """[B, C, S, N', M'] -> [B, 1, S, N, M] with values in (-1, 1)."""
    if z.ndim != 5 or z.shape[1] != cfg.latent_channels:
        raise ValueError(f"latent shape {z.shape} does not match {cfg.latent_channels} channels")
    h = apply_conv(p, "dec.in", z)
    h = apply_resblock(p, "dec.mid", h, cfg.groups)
    for s in range(cfg.stages, 1, -1):
        h = resample(h, "up_nearest2_inplane")
        h = apply_resblock(p, f"dec.r{s}", h, cfg.groups)
    h = resample(h, "up_nearest2_inplane")
    h = silu(apply_norm(p, "dec.full_n", apply_conv(p, "dec.full", h), cfg.groups))
    return tanh(apply_conv(p, "dec.out", h))


def _as_batch(x) -> np.ndarray:
    if isinstance(x, Volume):
        if x.unit != "normalized":
            raise ValueError(f"encode expects a normalized volume, got {x.unit!r}")
        x = x.values
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None, None]
    elif arr.ndim == 4:
        arr = arr[:, None]
    if arr.ndim != 5 or arr.shape[1] != 1:
        raise ValueError(f"expected [S, N, M] or [B, S, N, M] volumes, got {np.shape(x)}")
    if arr.min() < -1.0 - 1e-9 or arr.max() > 1.0 + 1e-9:
        raise ValueError("input must lie in the normalized range [-1, 1]")
    return arr


def encode(x, ckpt: AECheckpoint) -> np.ndarray:
    """Latent [C, S, N', M'] of one volume (or [B, C, ...] for a stack)."""
    arr = _as_batch(x)
    _check_extent(arr.shape, ckpt.config)
    z = encoder_forward(ckpt.frozen(), ckpt.config, Tensor(arr)).data
    return z[0] if np.ndim(x if not isinstance(x, Volume) else x.values) == 3 else z


def decode(z, ckpt: AECheckpoint) -> np.ndarray:
    """Normalised volume [S, N, M] (or [B, S, N, M]) from a latent."""
    arr = np.asarray(z, dtype=np.float64)
    single = arr.ndim == 4
    if single:
        arr = arr[None]
    out = decoder_forward(ckpt.frozen(), ckpt.config, Tensor(arr)).data[:, 0]
    return out[0] if single else out


def ae_loss(x_hat, x, weight: float) -> tuple[Tensor, Tensor, Tensor]:
    """``mean|x_hat - x| + weight * mean|grad x_hat - grad x|``; returns (total, l1, edge).

    Inputs are [B, C, S, N, M] tensors (arrays of rank 3 are promoted).
    """
    xh = x_hat if isinstance(x_hat, Tensor) else Tensor(_promote(x_hat))
    xt = x if isinstance(x, Tensor) else Tensor(_promote(x))
    if xh.shape != xt.shape:
        raise ValueError(f"ae_loss: shapes differ, {xh.shape} vs {xt.shape}")
    l1 = mean(abs_(xh - xt))
    edge = mean(abs_(spatial_gradient(xh) - spatial_gradient(xt)))
    return l1 + edge * float(weight), l1, edge


def _promote(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    while a.ndim < 5:
        a = a[None]
    return a


def _crop_batch(vols: list[np.ndarray], rng: np.random.Generator, batch: int,
                crop: int) -> np.ndarray:
    idx = rng.integers(0, len(vols), size=batch)
    out = []
    for i in idx:
        v = vols[int(i)]
        if crop and crop < v.shape[-1]:
            r0 = int(rng.integers(0, v.shape[-2] - crop + 1))
            c0 = int(rng.integers(0, v.shape[-1] - crop + 1))
            v = v[:, r0:r0 + crop, c0:c0 + crop]
        out.append(v)
    return np.stack(out)[:, None]


def train_ae(volumes: Sequence[np.ndarray], cfg: AEConfig, seed: int = 0, log_path=None,
             ckpt_path=None, steps: int | None = None, progress=None) -> AECheckpoint:
    """Adam on the edge-regularised L1 objective over normalised CT volumes.

    Each step draws ``batch_size`` random in-plane crops (full depth). The run
    is a deterministic function of ``(volumes, cfg, seed)``.
    """
    vols = [np.asarray(v, dtype=np.float64) for v in volumes]
    if not vols:
        raise ValueError("train_ae needs at least one volume")
    for v in vols:
        _check_extent(v.shape, cfg)
    if cfg.crop and cfg.crop % (2 ** cfg.stages):
        raise ValueError(f"crop {cfg.crop} not divisible by {2 ** cfg.stages}")
    n_steps = cfg.steps if steps is None else steps
    params = init_params(cfg, seed=int(np.random.SeedSequence([seed, 1]).generate_state(1)[0]))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    opt = AdamState(lr=cfg.lr)
    rows = []
    t0 = time.perf_counter()
    for step in range(1, n_steps + 1):
        # cosine decay to 5% of the base rate
        opt.lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * (step - 1) / n_steps)))
        xb = Tensor(_crop_batch(vols, rng, cfg.batch_size, cfg.crop))
        with Tape() as tape:
            loss, l1, edge = ae_loss(decoder_forward(params, cfg, encoder_forward(params, cfg, xb)),
                                     xb, cfg.edge_weight)
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"autoencoder loss became non-finite at step {step}")
        grads = backward(tape, loss)
        tape.release()
        adam_step(params, {k: grads[t] for k, t in params.items()}, opt)
        rows.append((step, loss.item(), l1.item(), edge.item()))
        if progress is not None:
            progress(step, rows[-1], time.perf_counter() - t0)
    ckpt = AECheckpoint(params, cfg, n_steps, rng.bit_generator.state, seed)
    if log_path is not None:
        write_csv(log_path, ["step", "loss", "l1", "edge"], rows)
    if ckpt_path is not None:
        ckpt.save(ckpt_path)
    return ckpt


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v
