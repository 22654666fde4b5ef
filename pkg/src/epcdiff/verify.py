"""Invariant checks across modules, reported as (check, value, threshold, passed) rows."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diffusion import ddim_step, ddim_timesteps, make_schedule, q_sample, recover_z0
from .engine import Tensor, conv3, group_norm, square
from .gradcheck import gradient_error
from .losses import image_domain_losses
from .phantom import head_spec, hu_to_attenuation, make_phantom, shepp_logan
from .tomo import Geometry, adjoint_test, fbp, forward_project, rotate_inplane, shift_angles


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    passed: bool
    seconds: float = 0.0


def equivariance_error(mu: np.ndarray, g: Geometry, phi: float) -> float:
    """``max |shift(A v, phi) - A rotate(v, phi)| / max |A v|`` for an attenuation volume."""
    av = forward_project(mu, g)
    lhs = shift_angles(av, phi, g)
    rhs = forward_project(rotate_inplane(mu, phi, fill=0.0), g)
    return float(np.abs(lhs - rhs).max() / np.abs(av).max())


def reference_phantom(depth: int = 8, size: int = 64) -> np.ndarray:
    return hu_to_attenuation(make_phantom(head_spec(depth, size, size), seed=0).values)


def check_adjoint(trials: int = 20) -> float:
    worst = 0.0
    for n_angles in (90, 360):
        g = Geometry.for_image(64, 64, n_angles)
        for k in range(trials):
            worst = max(worst, adjoint_test(g, seed=k, depth=8)["relative_gap"])
    return worst


def check_exact_equivariance() -> float:
    mu = reference_phantom()
    g = Geometry.for_image(64, 64, 360)
    return max(equivariance_error(mu, g, phi) for phi in (math.pi / 2, math.pi, 1.5 * math.pi))


def check_step_equivariance(n: int = 20, seed: int = 0) -> float:
    mu = reference_phantom()
    g = Geometry.for_image(64, 64, 360)
    rng = np.random.default_rng(seed)
    return max(equivariance_error(mu, g, int(k) * g.angle_step)
               for k in rng.integers(1, g.n_angles, size=n))


def check_schedule() -> float:
    """Largest deviation among the schedule identities (0 when all hold exactly)."""
    s = make_schedule(1000, 1e-4, 5e-3)
    dev = abs(s.alpha_bars[0] - 0.9999)
    dev = max(dev, abs(s.alpha_bars[-1] - math.exp(np.sum(np.log1p(-s.betas)))))
    if not np.all(np.diff(s.alpha_bars) < 0):
        dev = math.inf
    return float(dev)


def check_inversion(n: int = 100, seed: int = 0) -> float:
    s = make_schedule()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        z0 = rng.standard_normal((4, 2, 4, 4))
        eps = rng.standard_normal(z0.shape)
        t = int(rng.integers(1, s.T + 1))
        zt = q_sample(z0, t, eps, s)
        worst = max(worst, float(np.abs(recover_z0(zt, t, eps, s) - z0).max()))
        z = zt
        # chained DDIM with the exact noise retraces the trajectory to z0
        for a, b in ddim_timesteps(t, min(t, 7)):
            z = ddim_step(z, a, b, (z - np.sqrt(s.alpha_bar(a)) * z0) / np.sqrt(1 - s.alpha_bar(a)), s)
        worst = max(worst, float(np.abs(z - z0).max()))
    return worst


def check_gradients(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, 2, 3, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 2, 3, 3, 3)), requires_grad=True)
    gam = Tensor(rng.standard_normal(4), requires_grad=True)
    bet = Tensor(rng.standard_normal(4), requires_grad=True)
    ref = rng.standard_normal((1, 4, 3, 4, 4))
    err = gradient_error(lambda: square(group_norm(conv3(x, w), 2, gam, bet)).sum(),
                         [x, w, gam, bet])

    def img():
        y = conv3(x, w)
        a, b, c = image_domain_losses(y, ref)
        return a + b * 2.0 + c * 3.0
    return max(err, gradient_error(img, [x, w]))


def check_fbp() -> float:
    """PSNR (range 1) of noiseless 360-view FBP of a 128^2 Shepp-Logan slice."""
    from .metrics import psnr
    ph = shepp_logan(128)
    g = Geometry.for_image(128, 128, 360)
    rec = fbp(forward_project(ph[None], g), g)[0]
    return psnr(float(np.mean((rec - ph) ** 2)), data_range=1.0)


def _timed(name: str, fn: Callable[[], float], threshold: float, lower_is_better: bool = True) -> Check:
    t0 = time.perf_counter()
    value = float(fn())
    ok = value < threshold if lower_is_better else value >= threshold
    return Check(name, value, threshold, bool(ok), time.perf_counter() - t0)


def run_checks(level: str = "quick") -> list[Check]:
    """``quick``: adjoint, exact equivariance, schedule, inversion, gradients.
    ``full`` adds integer-step equivariance, FBP accuracy and Monte Carlo moments."""
    if level not in ("quick", "full"):
        raise ValueError(f"level must be 'quick' or 'full', got {level!r}")
    checks = [
        _timed("adjoint_gap", lambda: check_adjoint(3 if level == "quick" else 20), 1e-12),
        _timed("equivariance_quarter_turns", check_exact_equivariance, 1e-12),
        _timed("schedule_identities", check_schedule, 1e-12),
        _timed("diffusion_inversion", check_inversion, 1e-10),
        _timed("gradient_rel_error", check_gradients, 1e-5),
    ]
    if level == "full":
        checks += [
            _timed("equivariance_integer_steps", check_step_equivariance, 1e-2),
            _timed("fbp_psnr_db", check_fbp, 30.0, lower_is_better=False),
            _timed("forward_moments_max_z", check_moments, 3.0),
        ]
    return checks


def check_moments(n: int = 10_000, seed: int = 0) -> float:
    """Largest |z-score| of Monte Carlo mean and variance of q_sample at t in {1, 500, 1000}."""
    s = make_schedule()
    rng = np.random.default_rng(seed)
    z0 = np.array([0.7, -1.3, 0.2])
    worst = 0.0
    for t in (1, 500, 1000):
        eps = rng.standard_normal((n, z0.size))
        zt = q_sample(np.broadcast_to(z0, eps.shape), t, eps, s)
        ab = float(s.alpha_bar(t))
        var = 1.0 - ab
        m_se = math.sqrt(var / n)
        v_se = var * math.sqrt(2.0 / (n - 1))
        worst = max(worst, float(np.max(np.abs(zt.mean(axis=0) - math.sqrt(ab) * z0) / m_se)),
                    float(np.max(np.abs(zt.var(axis=0, ddof=1) - var) / v_se)))
    return worst


def report_csv(checks: list[Check]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["check", "value", "threshold", "passed", "seconds"])
    for c in checks:
        w.writerow([c.name, repr(c.value), repr(c.threshold), int(c.passed), f"{c.seconds:.3f}"])
    return buf.getvalue()
