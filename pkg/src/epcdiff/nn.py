"""Parameter containers and residual building blocks shared by the networks."""
from __future__ import annotations

import hashlib

import numpy as np

from .engine import Tensor, add_channel, conv3, dense, group_norm, silu

Params = dict[str, Tensor]


class ParamBuilder:
    """Creates named, seeded parameters in a fixed order."""

    def __init__(self, rng: np.random.Generator, prefix: str = ""):
        self.rng = rng
        self.params: Params = {}
        self.prefix = prefix

    def _add(self, name: str, arr: np.ndarray) -> None:
        key = self.prefix + name
        if key in self.params:
            raise KeyError(f"duplicate parameter {key!r}")
        self.params[key] = Tensor(arr, requires_grad=True, name=key)

    def conv(self, name: str, cin: int, cout: int, k: int | tuple[int, int, int] = 3,
             scale: float = 1.0) -> None:
        """He-initialised kernel; ``k`` is a cube extent or a (kd, kh, kw) triple."""
        ks = (k, k, k) if isinstance(k, int) else tuple(k)
        fan_in = cin * int(np.prod(ks))
        self._add(name + ".w", self.rng.normal(0.0, scale * np.sqrt(2.0 / fan_in),
                                               size=(cout, cin) + ks))
        self._add(name + ".b", np.zeros(cout))

    def norm(self, name: str, c: int) -> None:
        self._add(name + ".g", np.ones(c))
        self._add(name + ".b", np.zeros(c))

    def dense(self, name: str, fin: int, fout: int, scale: float = 1.0) -> None:
        self._add(name + ".w", self.rng.normal(0.0, scale * np.sqrt(1.0 / fin), size=(fin, fout)))
        self._add(name + ".b", np.zeros(fout))

    def resblock(self, name: str, cin: int, cout: int, temb: int | None = None) -> None:
        self.conv(name + ".c1", cin, cout)
        self.norm(name + ".n1", cout)
        if temb:
            self.dense(name + ".t", temb, cout)
        # zero-ish second conv keeps the block close to identity at init
        self.conv(name + ".c2", cout, cout, scale=0.1)
        self.norm(name + ".n2", cout)
        if cin != cout:
            self.conv(name + ".skip", cin, cout, k=1)


def apply_conv(p: Params, name: str, x: Tensor) -> Tensor:
    return conv3(x, p[name + ".w"], p[name + ".b"])


def apply_norm(p: Params, name: str, x: Tensor, groups: int) -> Tensor:
    return group_norm(x, groups, p[name + ".g"], p[name + ".b"])


def apply_dense(p: Params, name: str, x: Tensor) -> Tensor:
    return dense(x, p[name + ".w"], p[name + ".b"])


def apply_resblock(p: Params, name: str, x: Tensor, groups: int,
                   temb: Tensor | None = None) -> Tensor:
    """conv -> group_norm -> silu (+ time projection) -> conv -> group_norm, plus skip."""
    h = silu(apply_norm(p, name + ".n1", apply_conv(p, name + ".c1", x), groups))
    if temb is not None:
        h = add_channel(h, apply_dense(p, name + ".t", temb))
    h = apply_norm(p, name + ".n2", apply_conv(p, name + ".c2", h), groups)
    skip = apply_conv(p, name + ".skip", x) if (name + ".skip.w") in p else x
    return h + skip


def param_digest(p: Params) -> str:
    """SHA-256 over parameter names, shapes and raw bytes in sorted order."""
    h = hashlib.sha256()
    for key in sorted(p):
        arr = np.ascontiguousarray(p[key].data, dtype="<f8")
        h.update(key.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def params_to_arrays(p: Params, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.data for k, v in p.items()}


def arrays_to_params(arrays: dict[str, np.ndarray], prefix: str = "") -> Params:
    return {k[len(prefix):]: Tensor(v, requires_grad=True, name=k[len(prefix):])
            for k, v in arrays.items() if k.startswith(prefix)}


def check_shapes(p: Params, reference: Params, what: str) -> None:
    """Reject parameter sets whose names or shapes differ from a freshly built reference."""
    if set(p) != set(reference):
        missing = sorted(set(reference) - set(p))
        extra = sorted(set(p) - set(reference))
        raise ValueError(f"{what}: parameter names differ (missing {missing[:5]}, extra {extra[:5]})")
    for k in reference:
        if p[k].shape != reference[k].shape:
            raise ValueError(f"{what}: parameter {k!r} has shape {p[k].shape}, "
                             f"config expects {reference[k].shape}")
