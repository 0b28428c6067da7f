import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from urbangs.metrics import (EmptyEvaluation, depth_metrics, l1_loss, photometric_loss, psnr, ssim)


# Loop-based references written from the metric definitions; they share no code with the package.

def depth_ref(pred, gt):
    n = 0
    s_abs = s_rel = s_sq = hits = 0.0
    n_rel = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if not (math.isfinite(p) and math.isfinite(g) and p > 0 and g > 0):
            continue
        n += 1
        s_abs += abs(p - g)
        s_sq += (p - g) ** 2
        if g >= 1e-6:
            s_rel += abs(p - g) / g
            n_rel += 1
        if max(p / g, g / p) < 1.25:
            hits += 1
    return s_abs / n, s_rel / n_rel, math.sqrt(s_sq / n), hits / n, n


def psnr_ref(pred, gt):
    tot = 0.0
    vals = list(zip(pred.ravel().tolist(), gt.ravel().tolist()))
    for a, b in vals:
        tot += (a - b) ** 2
    mse = tot / len(vals)
    return 99.0 if mse == 0 else min(99.0, -10 * math.log10(mse))


def window_ref():
    g = [math.exp(-((i - 5) ** 2) / (2 * 1.5 ** 2)) for i in range(11)]
    s = sum(g)
    return [[g[i] * g[j] / (s * s) for j in range(11)] for i in range(11)]


def ssim_ref(x, y):
    w = window_ref()
    h, wd, c = x.shape
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    total, count = 0.0, 0
    for ch in range(c):
        for i in range(h - 10):
            for j in range(wd - 10):
                mx = my = sxx = syy = sxy = 0.0
                for a in range(11):
                    for b in range(11):
                        u, v, k = x[i + a, j + b, ch], y[i + a, j + b, ch], w[a][b]
                        mx += k * u
                        my += k * v
                        sxx += k * u * u
                        syy += k * v * v
                        sxy += k * u * v
                vx, vy, cxy = sxx - mx * mx, syy - my * my, sxy - mx * my
                total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
                count += 1
    return total / count


def depth_pair(rng):
    shape = tuple(rng.integers(3, 12, 2))
    gt = rng.uniform(0.5, 60, shape)
    pred = gt * rng.lognormal(0, 0.3, shape)
    pred[rng.uniform(size=shape) < 0.1] = 0.0
    gt[rng.uniform(size=shape) < 0.1] = np.nan
    pred[rng.uniform(size=shape) < 0.05] = np.inf
    return pred, gt


@pytest.mark.parametrize("seed", range(50))
def test_depth_metrics_oracle(seed):
    pred, gt = depth_pair(np.random.default_rng(seed))
    d = depth_metrics(pred, gt)
    ref = depth_ref(pred, gt)
    for got, want in zip((d.l1, d.abs_rel, d.rmse, d.delta_125), ref[:4]):
        assert abs(got - want) <= 1e-9 * max(1.0, abs(want))
    assert d.valid_pixel_count == ref[4]


@pytest.mark.parametrize("seed", range(50))
def test_psnr_ssim_oracle(seed):
    rng = np.random.default_rng(1000 + seed)
    h, w = rng.integers(11, 16, 2)
    x = rng.uniform(size=(h, w, 3))
    y = np.clip(x + rng.normal(0, rng.uniform(0.01, 0.3), x.shape), 0, 1)
    assert abs(psnr(x, y) - psnr_ref(x, y)) <= 1e-9
    assert abs(ssim(x, y).value - ssim_ref(x, y)) <= 1e-9


def test_depth_metrics_examples():
    d = depth_metrics(np.array([[2.0, 4.0]]), np.array([[2.0, 2.0]]))
    assert d.l1 == 1.0 and d.abs_rel == 0.5 and d.rmse == math.sqrt(2.0) and d.delta_125 == 0.5
    with pytest.raises(EmptyEvaluation):
        depth_metrics(np.zeros((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        depth_metrics(np.ones((2, 2)), np.ones((2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.01, 100))
def test_depth_metrics_scale_consistency(seed, k):
    # uniformly scaling both maps leaves the relative metrics unchanged and scales the absolute ones
    pred, gt = depth_pair(np.random.default_rng(seed))
    a, b = depth_metrics(pred, gt), depth_metrics(pred * k, gt * k)
    assert b.abs_rel == pytest.approx(a.abs_rel, rel=1e-9)
    assert b.delta_125 == a.delta_125 or abs(b.delta_125 - a.delta_125) <= 1.0 / a.valid_pixel_count
    assert b.l1 == pytest.approx(k * a.l1, rel=1e-9)
    assert b.rmse == pytest.approx(k * a.rmse, rel=1e-9)


def test_psnr_examples():
    x = np.zeros((4, 4, 3))
    assert psnr(x, x) == 99.0
    assert psnr(x, x + 0.1) == pytest.approx(20.0)
    mask = np.zeros((4, 4, 3), bool)
    mask[0] = True
    y = x.copy()
    y[1:] = 0.5
    assert psnr(y, x, mask) == 99.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_psnr_monotone_in_noise(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(8, 8, 3))
    n = rng.normal(size=x.shape)
    vals = [psnr(x + s * n, x) for s in (0.01, 0.02, 0.05, 0.1)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_ssim_symmetry_and_identity(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(14, 13, 3))
    y = rng.uniform(size=(14, 13, 3))
    assert ssim(x, y).value == pytest.approx(ssim(y, x).value, abs=1e-12)
    assert ssim(x, x).value == pytest.approx(1.0, abs=1e-12)
    assert ssim(x, y).value < 1.0


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


@pytest.mark.parametrize("seed", range(20))
def test_ssim_gradient(seed):
    import fdcheck
    checked, bad = fdcheck.check_ssim(seed)
    assert checked > 0 and bad == 0


def test_l1_and_photometric(rng):
    x = rng.uniform(size=(12, 12, 3))
    y = rng.uniform(size=(12, 12, 3))
    v, g = l1_loss(x, y)
    assert v == pytest.approx(np.abs(x - y).mean())
    mask = np.zeros((12, 12), bool)
    mask[:3] = True
    v, g = l1_loss(x, y, mask)
    assert v == pytest.approx(np.abs(x - y)[:3].mean())
    assert np.all(g[3:] == 0)
    assert l1_loss(x, y, np.zeros((12, 12), bool))[0] == 0.0
    total, l1, ls, _ = photometric_loss(x, y, 0.2)
    assert total == pytest.approx(0.8 * l1 + 0.2 * ls, abs=1e-12)
