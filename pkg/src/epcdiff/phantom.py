"""Synthetic paired CT / CBCT volumes from ellipsoid head phantoms."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter, gaussian_filter1d

from .tomo import Geometry, Volume, fbp, forward_project, inscribed_radius, support_mask
from .tomo.types import SinogramStack

MU_WATER = 0.02  # attenuation per voxel
HU_MIN, HU_MAX = -1000.0, 2000.0


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]  # (z, y, x) voxels from the volume centre
    axes: tuple[float, float, float]  # semi-axes (z, y, x) in voxels
    hu: float
    tilt: float = 0.0  # in-plane rotation, radians


@dataclass
class PhantomSpec:
    depth: int
    n_rows: int
    n_cols: int
    ellipsoids: list[Ellipsoid] = field(default_factory=list)
    background_hu: float = -1000.0
    domain: str = "A"
    center_jitter: float = 0.0  # voxels
    value_jitter: float = 0.0  # HU
    blur_sigma: float = 1.5  # in-plane system blur, voxels

    def validate(self) -> None:
        r_max = inscribed_radius(self.n_rows, self.n_cols) - 3.0 * self.blur_sigma
        for e in self.ellipsoids:
            if not HU_MIN <= e.hu <= HU_MAX:
                raise ValueError(f"ellipsoid HU {e.hu} outside [{HU_MIN}, {HU_MAX}]")
            reach = math.hypot(e.center[1], e.center[2]) + max(e.axes[1], e.axes[2])
            reach += self.center_jitter * math.sqrt(2.0)
            if reach > r_max:
                raise ValueError(f"ellipsoid at {e.center} with axes {e.axes} escapes the "
                                 f"inscribed circle (reach {reach:.2f} > {r_max:.2f})")
        if not HU_MIN <= self.background_hu <= HU_MAX:
            raise ValueError(f"background HU {self.background_hu} outside the window")


@dataclass(frozen=True)
class DoseModel:
    """Acquisition settings of the pre-log measurement model."""

    I0: float = 1e5
    n_angles: int = 360
    scatter: float = 0.0  # amplitude k of the blurred-intensity scatter term
    scatter_sigma: float = 20.0  # blur width in detector bins
    electronic_sigma: float = 0.0

    def __post_init__(self):
        if not self.I0 > 0:
            raise ValueError(f"I0 must be positive, got {self.I0}")
        if self.scatter < 0:
            raise ValueError(f"scatter amplitude must be >= 0, got {self.scatter}")


CT_DOSE = DoseModel()
CBCT_DOSE = DoseModel(I0=1e4, n_angles=90, scatter=1.5, scatter_sigma=20.0, electronic_sigma=2.0)


def hu_normalize(v):
    """Clip to [-1000, 2000] HU and map affinely onto [-1, 1]."""
    arr = v.values if isinstance(v, Volume) else np.asarray(v, dtype=np.float64)
    out = (np.clip(arr, HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN) * 2.0 - 1.0
    return Volume(out, unit="normalized") if isinstance(v, Volume) else out


def hu_denormalize(v):
    arr = v.values if isinstance(v, Volume) else np.asarray(v, dtype=np.float64)
    out = (arr + 1.0) * 0.5 * (HU_MAX - HU_MIN) + HU_MIN
    return Volume(out, unit="HU") if isinstance(v, Volume) else out


def hu_to_attenuation(hu):
    return MU_WATER * (1.0 + np.asarray(hu, dtype=np.float64) / 1000.0)


def attenuation_to_hu(mu):
    return (np.asarray(mu, dtype=np.float64) / MU_WATER - 1.0) * 1000.0


# normalized -> attenuation is affine: mu = a * x + b
NORM_TO_MU_SCALE = MU_WATER * 0.5 * (HU_MAX - HU_MIN) / 1000.0
NORM_TO_MU_OFFSET = MU_WATER * (1.0 + HU_MIN / 1000.0) + NORM_TO_MU_SCALE


def make_phantom(spec: PhantomSpec, seed: int = 0, supersample: int = 4) -> Volume:
    """Voxelise the ellipsoids over the background; later ellipsoids overwrite.

    Each voxel is split into ``supersample**2`` in-plane sub-samples so
    boundaries carry partial-volume values. ``seed`` draws per-ellipsoid
    offsets and HU perturbations within the declared jitter.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    S, N, M = spec.depth, spec.n_rows, spec.n_cols
    vol = np.full((S, N, M), float(spec.background_hu))
    ss = max(int(supersample), 1)
    sub = (np.arange(ss) + 0.5) / ss - 0.5
    z = np.arange(S) - (S - 1) / 2.0
    y = np.arange(N) - (N - 1) / 2.0
    x = np.arange(M) - (M - 1) / 2.0
    # sub-sample grids, shape [N*ss, M*ss]
    ys = (y[:, None] + sub[None, :]).ravel()
    xs = (x[:, None] + sub[None, :]).ravel()
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    for e in spec.ellipsoids:
        dz, dy, dx = e.center
        if spec.center_jitter:
            jy, jx = rng.uniform(-spec.center_jitter, spec.center_jitter, size=2)
            dy, dx = dy + jy, dx + jx
        hu = e.hu
        if spec.value_jitter:
            hu = float(np.clip(hu + rng.uniform(-spec.value_jitter, spec.value_jitter),
                               HU_MIN, HU_MAX))
        c, s = math.cos(e.tilt), math.sin(e.tilt)
        xr = (X - dx) * c + (Y - dy) * s
        yr = -(X - dx) * s + (Y - dy) * c
        az, ay, ax = e.axes
        for k in range(S):
            rz = ((z[k] - dz) / az) ** 2
            if rz > 1.0:
                continue
            inside = (xr / ax) ** 2 + (yr / ay) ** 2 <= 1.0 - rz
            frac = inside.reshape(N, ss, M, ss).mean(axis=(1, 3))
            vol[k] = vol[k] * (1.0 - frac) + hu * frac
    if spec.blur_sigma > 0:
        vol = gaussian_filter(vol, (0.0, spec.blur_sigma, spec.blur_sigma), mode="constant",
                              cval=spec.background_hu)
        vol[:, ~support_mask(N, M)] = spec.background_hu
    return Volume(vol, unit="HU")


# modified Shepp-Logan (Toft): additive intensity, semi-axes a (x), b (y), centre, angle in degrees
SHEPP_LOGAN = [
    (1.0, .69, .92, 0.0, 0.0, 0.0), (-.8, .6624, .874, 0.0, -.0184, 0.0),
    (-.2, .11, .31, .22, 0.0, -18.0), (-.2, .16, .41, -.22, 0.0, 18.0),
    (.1, .21, .25, 0.0, .35, 0.0), (.1, .046, .046, 0.0, .1, 0.0),
    (.1, .046, .046, 0.0, -.1, 0.0), (.1, .046, .023, -.08, -.605, 0.0),
    (.1, .023, .023, 0.0, -.606, 0.0), (.1, .023, .046, .06, -.605, 0.0),
]


def shepp_logan(n: int, supersample: int = 4, scale: float = 0.9) -> np.ndarray:
    """2-D modified Shepp-Logan slice on an ``n x n`` grid, intensities in [0, 1].

    The unit-square phantom is shrunk by ``scale`` about the centre so that it
    fits inside the inscribed support disk. Pixels average ``supersample**2``
    point samples.
    """
    ss = max(int(supersample), 1)
    sub = (np.arange(n * ss) + 0.5) / ss  # sub-sample centres in pixel units
    u = (sub - n / 2.0) / (n / 2.0) / scale  # [-1, 1] over the scaled field of view
    X, Y = np.meshgrid(u, -u, indexing="xy")  # y axis points up
    img = np.zeros_like(X)
    for val, a, b, x0, y0, ang in SHEPP_LOGAN:
        t = math.radians(ang)
        xr = (X - x0) * math.cos(t) + (Y - y0) * math.sin(t)
        yr = -(X - x0) * math.sin(t) + (Y - y0) * math.cos(t)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += val
    # additive intensities cancel to tiny negatives in the ventricles
    return np.clip(img.reshape(n, ss, n, ss).mean(axis=(1, 3)), 0.0, 1.0)


def head_spec(depth: int, n_rows: int, n_cols: int, rng: np.random.Generator | None = None,
              domain: str = "A", blur_sigma: float = 1.5) -> PhantomSpec:
    """Skull, brain and a handful of internal structures, all inside the support disk.

    With ``rng`` the layout (sizes, positions, contrasts) is randomised for
    dataset variety; without it a fixed reference head is returned.
    """
    R = inscribed_radius(n_rows, n_cols) - 3.0 * blur_sigma - 0.5
    u = (lambda lo, hi: float(rng.uniform(lo, hi))) if rng is not None else (lambda lo, hi: 0.5 * (lo + hi))
    zc = depth * 4.0  # long axial extent: structures span all slices
    ax_x = R * u(0.86, 0.98)
    ax_y = R * u(0.72, 0.86)
    skull = u(0.08, 0.12) * R
    tilt = u(-0.3, 0.3)
    ells = [
        Ellipsoid((0.0, 0.0, 0.0), (zc, ax_y, ax_x), u(800.0, 1200.0), tilt),
        Ellipsoid((0.0, 0.0, 0.0), (zc, ax_y - skull, ax_x - skull), u(20.0, 60.0), tilt),
    ]
    inner_x, inner_y = ax_x - skull, ax_y - skull
    n_small = 5 if rng is None else int(rng.integers(4, 8))
    for i in range(n_small):
        ang = u(0.0, 2.0 * math.pi) if rng is not None else 2.0 * math.pi * i / n_small
        rad = u(0.0, 0.55)
        a = R * u(0.07, 0.2)
        b = R * u(0.07, 0.2)
        cx = rad * inner_x * math.cos(ang)
        cy = rad * inner_y * math.sin(ang)
        # keep each structure inside the brain ellipse
        scale = min(1.0, 0.9 * min(inner_x - abs(cx), inner_y - abs(cy)) / max(a, b))
        hu = [-600.0, -100.0, 80.0, 300.0, 700.0][i % 5] + u(-50.0, 50.0)
        cz = u(-depth / 2.0, depth / 2.0)
        az = depth * u(0.3, 1.2)
        ells.append(Ellipsoid((cz, cy, cx), (az, b * scale, a * scale), hu, u(0.0, math.pi)))
    return PhantomSpec(depth, n_rows, n_cols, ells, background_hu=-1000.0, domain=domain,
                       blur_sigma=blur_sigma)


def _measure(mu: np.ndarray, g: Geometry, d: DoseModel, rng: np.random.Generator,
             noise: bool) -> np.ndarray:
    line = forward_project(mu, g)
    if not noise:
        return line
    counts = rng.poisson(d.I0 * np.exp(-line)).astype(np.float64)
    if d.scatter > 0:
        counts = counts + d.scatter * gaussian_filter1d(counts, d.scatter_sigma, axis=-1,
                                                        mode="nearest")
    if d.electronic_sigma > 0:
        counts = counts + rng.normal(0.0, d.electronic_sigma, size=counts.shape)
    return -np.log(np.maximum(counts, 1.0) / d.I0)


def _simulate(v: Volume, d: DoseModel, seed: int, noise: bool, n_det: int | None,
              window: str) -> tuple[SinogramStack, Volume]:
    if v.unit != "HU":
        raise ValueError(f"simulation expects an HU volume, got {v.unit!r}")
    S, N, M = v.shape
    g = Geometry.for_image(N, M, d.n_angles, n_det=n_det)
    rng = np.random.default_rng(seed)
    mu = hu_to_attenuation(v.values)
    y = _measure(mu, g, d, rng, noise)
    rec = fbp(y, g, window)
    x = hu_normalize(Volume(attenuation_to_hu(rec), unit="HU"))
    return SinogramStack(y, g), x


def simulate_ct(v: Volume, d: DoseModel = CT_DOSE, seed: int = 0, noise: bool = True,
                window: str = "ram_lak") -> tuple[SinogramStack, Volume]:
    """Dense-view, high-dose acquisition: post-log sinogram y0 and normalised FBP x0.

    ``noise=False`` is the infinite-dose limit (noiseless line integrals).
    """
    return _simulate(v, d, seed, noise, None, window)


def simulate_cbct(v: Volume, d: DoseModel = CBCT_DOSE, seed: int = 0, noise: bool = True,
                  window: str = "ram_lak") -> tuple[SinogramStack, Volume]:
    """Sparse-view, low-dose acquisition with additive low-pass scatter.

    Pre-log intensities become ``I + k * blur(I) + N(0, sigma_e^2)``; the
    reconstruction inherits the resulting HU bias (cupping) and streaks.
    """
    return _simulate(v, d, seed, noise, None, window)


def with_dose(d: DoseModel, **changes) -> DoseModel:
    return replace(d, **changes)
