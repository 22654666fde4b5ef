"""Differentiable volume operations on [B, C, D, H, W] tensors."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, active_tape, record

__all__ = [
    "conv3", "group_norm", "resample", "concat_channels", "slice_channels",
    "spatial_gradient", "laplacian", "add_channel", "dense",
]


def _is_tracked(t: Tensor) -> bool:
    tape = active_tape()
    return tape is not None and (t.requires_grad or tape.node_id(t) is not None)


def conv3(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
          pad: int | tuple[int, int, int] | None = None) -> Tensor:
    """3D cross-correlation, zero padded.

    ``w`` has shape [Cout, Cin, kd, kh, kw] with odd extents. ``pad`` (an int
    or a per-axis triple) defaults to ``(k - 1) // 2`` on each axis, so
    stride-1 convolutions keep the spatial shape.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3 expects 5-D input and kernel, got {x.shape} and {w.shape}")
    B, C, D, H, W = x.shape
    O, Ci, kd, kh, kw = w.shape
    if Ci != C:
        raise ValueError(f"conv3: input channels of x {x.shape} do not match kernel {w.shape}")
    if not (kd % 2 and kh % 2 and kw % 2):
        raise ValueError(f"conv3: kernel extents must be odd, got {w.shape[2:]}")
    if bias is not None and bias.shape != (O,):
        raise ValueError(f"conv3: bias shape {bias.shape} does not match {O} output channels")
    if pad is None:
        pad = ((kd - 1) // 2, (kh - 1) // 2, (kw - 1) // 2)
    elif np.ndim(pad) == 0:
        pad = (int(pad),) * 3
    pd, ph, pw = (int(v) for v in pad)
    s = int(stride)
    Do = (D + 2 * pd - kd) // s + 1
    Ho = (H + 2 * ph - kh) // s + 1
    Wo = (W + 2 * pw - kw) // s + 1
    if min(Do, Ho, Wo) < 1:
        raise ValueError(f"conv3: kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")
    padded = pd or ph or pw
    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw))) if padded else x.data
    offsets = [(a, b, c) for a in range(kd) for b in range(kh) for c in range(kw)]
    K = len(offsets)
    cols = np.empty((C, K, B, Do, Ho, Wo))
    for k, (a, b, c) in enumerate(offsets):
        win = xp[:, :, a:a + s * (Do - 1) + 1:s, b:b + s * (Ho - 1) + 1:s, c:c + s * (Wo - 1) + 1:s]
        cols[:, k] = win.transpose(1, 0, 2, 3, 4)
    w2 = w.data.reshape(O, C * K)
    out = (w2 @ cols.reshape(C * K, -1)).reshape(O, B, Do, Ho, Wo).transpose(1, 0, 2, 3, 4)
    if bias is not None:
        out = out + bias.data[None, :, None, None, None]
    out = np.ascontiguousarray(out)
    keep_cols = cols if _is_tracked(w) else None
    xp_shape, w_shape = xp.shape, w.shape

    def vjp(g, needs):
        g2 = g.transpose(1, 0, 2, 3, 4).reshape(O, -1)
        gx = gw = gb = None
        if needs[0]:
            dcols = (w2.T @ g2).reshape(C, K, B, Do, Ho, Wo)
            gxp = np.zeros(xp_shape)
            for k, (a, b, c) in enumerate(offsets):
                gxp[:, :, a:a + s * (Do - 1) + 1:s, b:b + s * (Ho - 1) + 1:s,
                    c:c + s * (Wo - 1) + 1:s] += dcols[:, k].transpose(1, 0, 2, 3, 4)
            gx = gxp[:, :, pd:pd + D, ph:ph + H, pw:pw + W] if padded else gxp
        if needs[1]:
            gw = (g2 @ keep_cols.reshape(C * K, -1).T).reshape(w_shape)
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    inputs = [x, w] if bias is None else [x, w, bias]
    return record("conv3", inputs, out, vjp, stride=s, pad=(pd, ph, pw))


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    B, C = x.shape[:2]
    if C % groups:
        raise ValueError(f"group_norm: {C} channels not divisible into {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"group_norm: affine shapes {gamma.shape}, {beta.shape} != ({C},)")
    xr = x.data.reshape(B, groups, -1)
    mu = xr.mean(axis=2, keepdims=True)
    xc = xr - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))
    xshape = x.shape

    def vjp(g, needs):
        gx = gg = gb = None
        if needs[0]:
            dxh = (g * gd).reshape(B, groups, -1)
            xh = xhat.reshape(B, groups, -1)
            gx = inv * (dxh - dxh.mean(axis=2, keepdims=True)
                        - xh * (dxh * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(xshape)
        if needs[1]:
            gg = (g * xhat).sum(axis=red)
        if needs[2]:
            gb = g.sum(axis=red)
        return gx, gg, gb

    return record("group_norm", [x, gamma, beta], out, vjp, groups=groups, eps=eps)


def resample(x: Tensor, mode: str) -> Tensor:
    """In-plane resampling by a factor of 2; the depth axis is never touched.

    ``down_avg2_inplane`` averages 2x2 blocks over (H, W);
    ``up_nearest2_inplane`` replicates each voxel into a 2x2 block.
    """
    B, C, D, H, W = x.shape
    if mode == "down_avg2_inplane":
        if H % 2 or W % 2:
            raise ValueError(f"resample: down mode needs even H and W, got {H}x{W}")
        out = x.data.reshape(B, C, D, H // 2, 2, W // 2, 2).mean(axis=(4, 6))

        def vjp(g, needs):
            return (np.repeat(np.repeat(g, 2, axis=3), 2, axis=4) * 0.25,)
    elif mode == "up_nearest2_inplane":
        out = np.repeat(np.repeat(x.data, 2, axis=3), 2, axis=4)

        def vjp(g, needs):
            return (g.reshape(B, C, D, H, 2, W, 2).sum(axis=(4, 6)),)
    else:
        raise ValueError(f"resample: unknown mode {mode!r}")
    return record("resample", [x], out, vjp, mode=mode)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.shape[:1] + a.shape[2:] != b.shape[:1] + b.shape[2:]:
        raise ValueError(f"concat_channels: non-channel extents differ, {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record("concat", [a, b], out, lambda g, n: (g[:, :ca], g[:, ca:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def vjp(g, needs):
        gx = np.zeros(shape)
        gx[:, start:stop] = g
        return (gx,)

    return record("slice_channels", [x], x.data[:, start:stop], vjp, start=start, stop=stop)


def _forward_diff(a: np.ndarray, axis: int) -> np.ndarray:
    out = np.zeros_like(a)
    n = a.shape[axis]
    hi = [slice(None)] * a.ndim
    lo = [slice(None)] * a.ndim
    hi[axis] = slice(1, n)
    lo[axis] = slice(0, n - 1)
    out[tuple(lo)] = a[tuple(hi)] - a[tuple(lo)]
    return out


def _forward_diff_adj(g: np.ndarray, axis: int) -> np.ndarray:
    out = np.zeros_like(g)
    n = g.shape[axis]
    hi = [slice(None)] * g.ndim
    lo = [slice(None)] * g.ndim
    hi[axis] = slice(1, n)
    lo[axis] = slice(0, n - 1)
    gl = g[tuple(lo)]
    out[tuple(lo)] -= gl
    out[tuple(hi)] += gl
    return out


def spatial_gradient(x: Tensor) -> Tensor:
    """Forward differences along (D, H, W), zero on each trailing face.

    Channel ``3c + k`` of the output holds the difference of input channel
    ``c`` along spatial axis ``k``.
    """
    B, C, D, H, W = x.shape
    if min(D, H, W) < 2:
        raise ValueError(f"spatial_gradient: spatial extents must be >= 2, got {(D, H, W)}")
    out = np.stack([_forward_diff(x.data, ax) for ax in (2, 3, 4)], axis=2)
    out = out.reshape(B, 3 * C, D, H, W)

    def vjp(g, needs):
        gr = g.reshape(B, C, 3, D, H, W)
        return (sum(_forward_diff_adj(gr[:, :, k], ax) for k, ax in enumerate((2, 3, 4))),)

    return record("spatial_gradient", [x], out, vjp)


def _shift_edge(a: np.ndarray, axis: int, step: int) -> np.ndarray:
    # out[i] = a[clip(i + step)]
    n = a.shape[axis]
    idx = np.clip(np.arange(n) + step, 0, n - 1)
    return np.take(a, idx, axis=axis)


def _shift_edge_adj(g: np.ndarray, axis: int, step: int) -> np.ndarray:
    n = g.shape[axis]
    idx = np.clip(np.arange(n) + step, 0, n - 1)
    out = np.zeros_like(g)
    gm = np.moveaxis(g, axis, 0)
    om = np.moveaxis(out, axis, 0)
    np.add.at(om, idx, gm)
    return out


def laplacian(x: Tensor) -> Tensor:
    """7-point Laplacian (-6 centre, +1 per face neighbour), replicate boundary."""
    if x.ndim != 5 or min(x.shape[2:]) < 1:
        raise ValueError(f"laplacian: expected a non-empty [B, C, D, H, W] tensor, got {x.shape}")
    d = x.data
    out = -6.0 * d
    for ax in (2, 3, 4):
        out = out + _shift_edge(d, ax, 1) + _shift_edge(d, ax, -1)

    def vjp(g, needs):
        gx = -6.0 * g
        for ax in (2, 3, 4):
            gx = gx + _shift_edge_adj(g, ax, 1) + _shift_edge_adj(g, ax, -1)
        return (gx,)

    return record("laplacian", [x], out, vjp)


def add_channel(x: Tensor, v: Tensor) -> Tensor:
    """Add a per-(batch, channel) vector ``v`` [B, C] over all spatial voxels."""
    B, C = x.shape[:2]
    if v.shape != (B, C):
        raise ValueError(f"add_channel: vector shape {v.shape} does not match {(B, C)}")
    expand = (B, C) + (1,) * (x.ndim - 2)
    red = tuple(range(2, x.ndim))
    return record("add_channel", [x, v], x.data + v.data.reshape(expand),
                  lambda g, n: (g, g.sum(axis=red)))


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map of [B, F] rows by ``w`` [F, G] plus ``b`` [G]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"dense: incompatible shapes {x.shape} and {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def vjp(g, needs):
        gx = g @ wd.T if needs[0] else None
        gw = xd.T @ g if needs[1] else None
        gb = g.sum(axis=0) if len(needs) > 2 and needs[2] else None
        return (gx, gw, gb)[:len(needs)]

    return record("dense", [x, w] if b is None else [x, w, b], out, vjp)


def stack_batch(items: Sequence[Tensor]) -> Tensor:
    """Concatenate tensors along the batch axis."""
    sizes = [t.shape[0] for t in items]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in items], axis=0)
    return record("stack_batch", list(items), out,
                  lambda g, n: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(items))))
