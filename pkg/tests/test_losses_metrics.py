import csv
import math

import numpy as np
import pytest

from epcdiff.engine import Tape, Tensor, backward
from epcdiff.gradcheck import gradient_error
from epcdiff.losses import LossWeights, image_domain_losses, total_loss
from epcdiff.metrics import (PSNR_CAP, aggregate, compute_metrics, line_profile, psnr,
                             ssim_2d, write_metrics_csv)
from epcdiff.phantom import Ellipsoid, PhantomSpec, hu_normalize, make_phantom
from epcdiff.tomo import Volume


def t(a):
    return Tensor(np.asarray(a, dtype=np.float64)[None, None])


# -- image-domain losses ------------------------------------------------------------------

def test_image_losses_vanish_on_identity():
    x = np.random.default_rng(0).standard_normal((3, 4, 4))
    assert [v.item() for v in image_domain_losses(t(x), t(x))] == [0.0, 0.0, 0.0]


def test_image_losses_constant_offset():
    x = np.random.default_rng(1).standard_normal((3, 4, 4))
    l1, edge, lap = image_domain_losses(t(x - 0.25), t(x))
    assert l1.item() == pytest.approx(0.25, abs=1e-12)
    assert edge.item() == pytest.approx(0.0, abs=1e-12)
    assert lap.item() == pytest.approx(0.0, abs=1e-12)


def test_image_losses_brute_force():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((2, 3, 4, 4))
    d = a - b
    D, H, W = d.shape
    l1 = edge = lap = 0.0
    for i in range(D):
        for j in range(H):
            for k in range(W):
                l1 += abs(d[i, j, k])
                for di, dj, dk in ((1, 0, 0), (0, 1, 0), (0, 0, 1)):
                    ii, jj, kk = i + di, j + dj, k + dk
                    if ii < D and jj < H and kk < W:
                        edge += abs(d[ii, jj, kk] - d[i, j, k])
                s = -6.0 * d[i, j, k]
                for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0),
                                   (0, 0, 1), (0, 0, -1)):
                    ii = min(max(i + di, 0), D - 1)
                    jj = min(max(j + dj, 0), H - 1)
                    kk = min(max(k + dk, 0), W - 1)
                    s += d[ii, jj, kk]
                lap += abs(s)
    n = D * H * W
    got = [v.item() for v in image_domain_losses(t(a), t(b))]
    assert got == pytest.approx([l1 / n, edge / (3 * n), lap / n], rel=1e-12)


def test_image_losses_shape_mismatch():
    with pytest.raises(ValueError):
        image_domain_losses(t(np.zeros((3, 4, 4))), t(np.zeros((3, 4, 5))))


def test_image_losses_gradients():
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((1, 1, 3, 4, 4))
    xh = Tensor(x0 + rng.standard_normal(x0.shape), requires_grad=True)
    for k in range(3):
        assert gradient_error(lambda: image_domain_losses(xh, x0)[k], [xh]) < 1e-5


# -- total loss ---------------------------------------------------------------------------

def test_weights_validation_and_defaults():
    assert LossWeights() == LossWeights(0.6, 0.2, 0.2, 0.1)
    with pytest.raises(ValueError):
        LossWeights(eq=-0.1)


def test_total_loss_zero_weights_is_ddpm():
    ones = tuple(Tensor(np.array(v)) for v in (1.0, 2.0, 3.0))
    out = total_loss(Tensor(np.array(0.7)), ones, Tensor(np.array(4.0)), LossWeights(0, 0, 0, 0))
    assert out.item() == 0.7


def test_total_loss_default_weights_unit_parts():
    one = Tensor(np.array(1.0))
    out = total_loss(Tensor(np.array(0.5)), (one, one, one), one, LossWeights())
    assert out.item() == pytest.approx(0.5 + 1.1, abs=1e-15)


def test_total_loss_absent_equivariance_term():
    one = Tensor(np.array(1.0))
    out = total_loss(Tensor(np.array(0.5)), (one, one, one), None, LossWeights())
    assert out.item() == pytest.approx(1.5, abs=1e-15)


@pytest.mark.parametrize("slot", range(4))
def test_total_loss_linear_in_each_term(slot):
    w = LossWeights()
    base = [Tensor(np.array(v)) for v in (0.3, 0.4, 0.5, 0.6)]

    def value(vals):
        return total_loss(Tensor(np.array(1.0)), tuple(vals[:3]), vals[3], w).item()

    doubled = list(base)
    doubled[slot] = Tensor(np.array(2.0 * base[slot].item()))
    weight = (w.l1, w.edge, w.lap, w.eq)[slot]
    assert value(doubled) - value(base) == pytest.approx(weight * base[slot].item(), rel=1e-12)


@pytest.mark.parametrize("bad", ["ddpm", "l1", "edge", "lap", "eq"])
def test_total_loss_rejects_non_finite_naming_term(bad):
    vals = {k: Tensor(np.array(1.0)) for k in ("ddpm", "l1", "edge", "lap", "eq")}
    vals[bad] = Tensor(np.array(float("nan")))
    with pytest.raises(FloatingPointError, match=bad):
        total_loss(vals["ddpm"], (vals["l1"], vals["edge"], vals["lap"]), vals["eq"],
                   LossWeights())


def test_total_loss_gradient_is_weighted_sum():
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((1, 1, 3, 4, 4))
    xh = Tensor(x0 + rng.standard_normal(x0.shape), requires_grad=True)
    w = LossWeights()

    def fn():
        parts = image_domain_losses(xh, x0)
        return total_loss((xh * xh).mean(), parts, (xh * 2.0).mean(), w)

    assert gradient_error(fn, [xh]) < 1e-5
    with Tape() as tape:
        total = fn()
    g_total = backward(tape, total)[xh]
    g_sum = np.zeros(xh.shape)
    terms = [lambda: (xh * xh).mean()] + [
        (lambda k: lambda: image_domain_losses(xh, x0)[k])(k) for k in range(3)] + [
        lambda: (xh * 2.0).mean()]
    for weight, term in zip((1.0, w.l1, w.edge, w.lap, w.eq), terms):
        with Tape() as tape:
            val = term()
        g_sum += weight * backward(tape, val)[xh]
    assert np.allclose(g_total, g_sum, rtol=1e-12, atol=1e-15)


# -- metrics ------------------------------------------------------------------------------

def test_metrics_identity():
    x = np.tanh(np.random.default_rng(5).standard_normal((2, 16, 16)))
    r = compute_metrics(x, x)
    assert r.ssim == 1.0 and r.mae == 0.0 and r.psnr == PSNR_CAP


def test_psnr_formula():
    assert psnr(1e-3) == pytest.approx(10 * math.log10(4000.0), abs=1e-12)
    assert psnr(1e-3) == pytest.approx(36.02, abs=5e-3)
    x = np.zeros((1, 16, 16))
    y = x + math.sqrt(1e-3)
    r = compute_metrics(y, x)
    assert r.psnr == pytest.approx(10 * math.log10(4000.0), abs=1e-9)
    assert r.mse_db == pytest.approx(-30.0, abs=1e-9)
    assert r.mae_db == pytest.approx(20 * math.log10(math.sqrt(1e-3)), abs=1e-9)


@pytest.mark.parametrize("a,b", [(0.2, 0.2), (0.5, -0.3), (-1.0, 1.0), (0.0, 0.9)])
def test_ssim_constant_images_closed_form(a, b):
    c1 = (0.01 * 2.0) ** 2
    expect = (2 * a * b + c1) / (a * a + b * b + c1)
    got = ssim_2d(np.full((16, 16), a), np.full((16, 16), b))
    assert got == pytest.approx(expect, abs=1e-9)


def test_metrics_symmetric_and_bounded():
    rng = np.random.default_rng(6)
    a, b = np.tanh(rng.standard_normal((2, 3, 20, 20)))
    r1, r2 = compute_metrics(a, b), compute_metrics(b, a)
    assert r1.psnr == pytest.approx(r2.psnr) and r1.ssim == pytest.approx(r2.ssim, abs=1e-12)
    assert r1.mae == r2.mae and r1.mse == r2.mse
    assert -1.0 <= r1.ssim <= 1.0 and r1.psnr >= 0.0
    assert len(r1.per_slice) == 3


def test_metrics_shape_and_unit_checks():
    with pytest.raises(ValueError):
        compute_metrics(np.zeros((1, 16, 16)), np.zeros((1, 16, 15)))
    with pytest.raises(ValueError):
        compute_metrics(Volume(np.zeros((1, 16, 16)), unit="HU"), np.zeros((1, 16, 16)))


def test_line_profile_uniform_and_length():
    v = hu_normalize(np.full((3, 8, 10), 500.0))
    prof = line_profile(v)
    assert prof.shape == (10, 2)
    assert np.allclose(prof[:, 1], 500.0)
    assert np.array_equal(prof[:, 0], np.arange(10))


def test_line_profile_through_centered_disk():
    spec = PhantomSpec(3, 33, 33, [Ellipsoid((0, 0, 0), (10, 8, 8), 300.0)],
                       background_hu=-1000.0, blur_sigma=0.0)
    v = make_phantom(spec)
    prof = line_profile(v)
    cols = prof[:, 0] - 16
    inside = np.abs(cols) <= 7
    outside = np.abs(cols) >= 9
    assert np.allclose(prof[inside, 1], 300.0)
    assert np.allclose(prof[outside, 1], -1000.0)


def test_line_profile_index_errors():
    with pytest.raises(IndexError):
        line_profile(np.zeros((2, 4, 4)), slice_index=2)
    with pytest.raises(IndexError):
        line_profile(np.zeros((2, 4, 4)), row_index=-1)


def test_metrics_csv_aggregate_rows(tmp_path):
    rng = np.random.default_rng(7)
    ref = np.tanh(rng.standard_normal((3, 2, 16, 16)))
    reports = [compute_metrics(np.clip(r + 0.1 * rng.standard_normal(r.shape), -1, 1), r)
               for r in ref]
    path = write_metrics_csv(tmp_path / "m.csv", ["a", "b", "c"], reports)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["id", "psnr", "ssim", "mae", "mae_db", "mse", "mse_db"]
    body = np.array([[float(v) for v in r[1:]] for r in rows[1:4]])
    assert rows[4][0] == "mean" and rows[5][0] == "std"
    assert np.allclose([float(v) for v in rows[4][1:]], body.mean(axis=0), rtol=1e-12)
    assert np.allclose([float(v) for v in rows[5][1:]], body.std(axis=0, ddof=1), rtol=1e-12)
    mean, std = aggregate(reports[:1])
    assert std == [0.0] * 6
