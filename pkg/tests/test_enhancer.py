import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from urbangs.core import Camera, DepthMap, Image, RigidTransform
from urbangs.enhancer import (PERIODIC, REAL_TIME, DepthPool, EarlyStopper, EnhancerConfig, PoolUpdateContext,
                              average_pool, confidence, enhance, loss_ref, loss_smooth, loss_warp,
                              select_neighbors, update_pool, warp)

import fdcheck


def cam(w=24, h=16, f=20.0, t=(0.0, 0.0, 0.0)):
    return Camera(f, f, (w - 1) / 2, (h - 1) / 2, w, h, RigidTransform(np.eye(3), t))


# confidence gate on hand-set ratios around 2.0
PREV = np.ones((4, 4))
CUR = np.array([
    [1.0, 1.5, 1.999999, 2.0],
    [0.5, 0.5000001, 2.0000001, 3.0],
    [0.75, 1.25, 0.4999999, 2.5],
    [0.0, -1.0, np.nan, np.inf],
])
EXPECTED = np.array([
    [1, 1, 1, 0],
    [0, 1, 0, 0],
    [1, 1, 0, 0],
    [0, 0, 0, 0],
], dtype=float)


def test_confidence_exhaustive_grid():
    np.testing.assert_array_equal(confidence(CUR, PREV, 2.0).values, EXPECTED)


def test_confidence_symmetric_in_arguments():
    a = np.where(np.isfinite(CUR) & (CUR > 0), CUR, 1.0)
    np.testing.assert_array_equal(confidence(a, PREV).values, confidence(PREV, a).values)


def test_confidence_scaled_grid():
    # the gate only sees ratios, so a common scale leaves it unchanged
    for k in (0.25, 4.0, 1024.0):
        np.testing.assert_array_equal(confidence(CUR * k, PREV * k).values, EXPECTED)


def test_confidence_shape_check():
    with pytest.raises(ValueError):
        confidence(np.ones((2, 2)), np.ones((3, 2)))


def test_average_pool_partial_patches():
    x = np.arange(15, dtype=float).reshape(3, 5)
    out = average_pool(x, 2)
    assert out.shape == (2, 3)
    assert out[0, 0] == np.mean([0, 1, 5, 6])
    assert out[1, 2] == 14.0
    assert out[0, 2] == np.mean([4, 9])


def loss_ref_p1(x, r, c):
    tot = 0.0
    for xi, ri, ci in zip(x.ravel(), r.ravel(), c.ravel()):
        if ri > 0:
            d = xi - ri
            tot += ci * (abs(d) + d * d)
    return tot / x.size


@pytest.mark.parametrize("seed", range(10))
def test_loss_ref_reduces_to_pixels_at_p1(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(1, 5, (6, 7))
    r = rng.uniform(1, 5, (6, 7))
    r[rng.uniform(size=r.shape) < 0.2] = 0.0
    c = (rng.uniform(size=r.shape) < 0.7).astype(float)
    assert loss_ref(x, r, c, 1)[0] == pytest.approx(loss_ref_p1(x, r, c), rel=1e-12)


def test_loss_ref_example():
    x = np.array([[3.0, 3.0], [3.0, 3.0]])
    r = np.array([[1.0, 1.0], [1.0, 1.0]])
    c = np.array([[1.0, 1.0], [0.0, 0.0]])
    # one patch: delta 2, pooled confidence 0.5
    assert loss_ref(x, r, c, 2)[0] == pytest.approx(0.5 * (2 + 4))


def test_loss_smooth_examples():
    img = np.zeros((3, 3, 3))
    ramp = np.tile([1.0, 2.0, 3.0], (3, 1))
    assert loss_smooth(ramp, img)[0] == pytest.approx(6 / 9)
    assert loss_smooth(np.full((3, 3), 2.0), img)[0] == 0.0
    edge = img.copy()
    edge[:, 1:] = 1.0
    assert loss_smooth(ramp, edge)[0] == pytest.approx((3 * np.exp(-1) + 3) / 9)
    holes = ramp.copy()
    holes[:, 1] = 0.0
    assert loss_smooth(holes, img)[0] == 0.0


def test_loss_warp_example():
    c = cam()
    d = np.full((16, 24), 5.0)
    loss, _ = loss_warp(d + 1.0, [(DepthMap(d), c), (DepthMap(d), c)], c)
    assert loss == pytest.approx(2.0)


@pytest.mark.parametrize("name", ["loss_ref", "loss_warp", "loss_smooth"])
@pytest.mark.parametrize("seed", range(20))
def test_refinement_gradients(name, seed):
    checked, bad = fdcheck.ALL[name](seed)
    assert checked > 0 and bad == 0


@pytest.mark.parametrize("seed", range(10))
def test_plane_disparity(seed):
    rng = np.random.default_rng(seed)
    b = float(rng.uniform(-0.8, 0.8))
    d = float(rng.uniform(2.0, 12.0))
    src, dst = cam(), cam(t=(b, 0.0, 0.0))
    out = warp(np.full((16, 24), d), src, dst).values
    shift = src.fx * b / d
    cols = {int(np.rint(u - shift)) for u in range(24)} & set(range(24))
    hit = {int(c) for c in np.nonzero(out[0] > 0)[0]}
    assert hit == cols
    np.testing.assert_allclose(out[out > 0], d, atol=1e-3)


def test_identity_warp():
    rng = np.random.default_rng(0)
    d = rng.uniform(1, 30, (16, 24))
    d[3, 4] = 0.0
    c = cam()
    np.testing.assert_array_equal(warp(d, c, c).values, d)


def test_warp_round_trip_integer_shift():
    src, dst = cam(), cam(t=(0.5, 0.0, 0.0))
    d = np.full((16, 24), 5.0)     # disparity of exactly 2 px
    there = warp(d, src, dst)
    back = warp(there.values, dst, src).values
    # the two leftmost source columns leave the destination frame and stay lost
    np.testing.assert_array_equal(back[:, 2:], d[:, 2:])
    assert np.all(back[:, :2] == 0)


def test_warp_zbuffer_keeps_nearest():
    src = cam()
    d = np.full((16, 24), 8.0)
    d[:, 12] = 4.0
    out = warp(d, src, cam(t=(0.4, 0, 0))).values
    # near column lands 2 px left and wins where it overlaps the far surface
    assert np.all(out[:, 10] == 4.0)


def test_early_stopper_exactly_patience():
    s = EarlyStopper(8)
    seq = [0.0] + [float(i) for i in range(1, 9)]
    flags = [s.update(v) for v in seq]
    assert flags == [False] * 8 + [True]
    s = EarlyStopper(8)
    seq = [0.0, 1, 2, 3, 4, 5, 6, 7, 6.5, 7, 8]
    assert not any(s.update(v) for v in seq)


def test_enhance_stops_after_eight_rises():
    # flat start pulled toward a checkerboard: every accepted step roughens the map
    h, w = 16, 16
    d0 = np.full((h, w), 5.0)
    ref = 5.0 + np.indices((h, w)).sum(0) % 2
    cfg = EnhancerConfig(lambda_smooth=1e-4, lambda_w=0.0, patch_size=1, steps=500, step_size=1e-4)
    res = enhance(DepthMap(d0), DepthMap(ref), np.ones((h, w)), Image(np.zeros((h, w, 3))), [], cam(w, h), cfg)
    smooth = [e["smooth"] for e in res.history]
    assert res.stopped_early
    assert res.accepted == 8
    assert all(b > a for a, b in zip(smooth, smooth[1:]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_enhance_monotone_descent(seed):
    rng = np.random.default_rng(seed)
    h, w = 16, 24
    c = cam(w, h)
    d_init = rng.uniform(2, 8, (h, w))
    d_ref = d_init * rng.lognormal(0, 0.2, (h, w))
    conf = (rng.uniform(size=(h, w)) < 0.8).astype(float)
    nbr = [(DepthMap(rng.uniform(2, 8, (h, w))), cam(w, h, t=(0.1, 0, 0)))]
    cfg = EnhancerConfig(steps=30, step_size=float(rng.uniform(0.001, 0.5)))
    res = enhance(DepthMap(d_init), DepthMap(d_ref), conf, Image(rng.uniform(size=(h, w, 3))), nbr, c, cfg)
    totals = [e["total"] for e in res.history]
    assert all(b <= a for a, b in zip(totals, totals[1:]))
    assert res.accepted == len(totals) - 1
    assert np.all(res.depth.values > 0)


def test_enhance_zero_weights_is_identity():
    rng = np.random.default_rng(2)
    d = DepthMap(rng.uniform(1, 4, (16, 24)))
    cfg = EnhancerConfig(lambda_ref=0, lambda_smooth=0, lambda_w=0)
    res = enhance(d, d, np.ones((16, 24)), Image(np.zeros((16, 24, 3))), [], cam(), cfg)
    np.testing.assert_array_equal(res.depth.values, d.values)
    assert res.steps == 0


def test_enhance_keeps_invalid_pixels_invalid():
    rng = np.random.default_rng(3)
    d = rng.uniform(1, 4, (16, 24))
    d[:4] = 0.0
    res = enhance(DepthMap(d), DepthMap(d * 1.1), np.ones_like(d), Image(np.zeros((16, 24, 3))), [], cam())
    assert np.all(res.depth.values[:4] == 0)


def test_enhance_nonfinite_aborts():
    d = np.full((16, 24), 3.0)
    ref = d.copy()
    ref[0, 0] = 1e200   # squares past the float range
    res = enhance(DepthMap(d), DepthMap(ref), np.ones_like(d), Image(np.zeros((16, 24, 3))), [], cam())
    assert res.aborted
    np.testing.assert_array_equal(res.depth.values, d)


def test_select_neighbors():
    keys = [(f, c) for f in range(6) for c in "ab"]
    ts = {k: float(k[0]) for k in keys}
    ids = {k: k[1] for k in keys}
    assert select_neighbors((2, "a"), keys, ts, ids, 3) == [(1, "a"), (3, "a"), (0, "a")]


def pool_ctx(it, pool, current, period):
    c = cam(8, 8)
    return PoolUpdateContext(
        iteration=it, global_iteration=100 + it, current_view=current,
        render_depth=lambda k: DepthMap(np.full((8, 8), 2.0)), image=lambda k: Image(np.zeros((8, 8, 3))),
        camera=lambda k: c, neighbors=lambda k: [], config=EnhancerConfig(update_period=period, steps=2))


@pytest.mark.parametrize("strategy", [REAL_TIME, PERIODIC])
def test_pool_update_counts(strategy):
    keys = ["v0", "v1", "v2"]
    pool = DepthPool({k: DepthMap(np.full((8, 8), 1.5)) for k in keys})
    counts = []
    for it in range(1, 61):
        counts.append(len(update_pool(pool, strategy, pool_ctx(it, pool, keys[it % 3], 5))))
    if strategy == REAL_TIME:
        assert set(counts) == {0, 1}
        assert [i + 1 for i, c in enumerate(counts) if c] == list(range(5, 61, 5))
    else:
        assert set(counts) == {0, 3}
        assert [i + 1 for i, c in enumerate(counts) if c] == [15, 30, 45, 60]
    assert max(pool.last_update.values()) == 160


def test_pool_rejects_unknown():
    pool = DepthPool({"v": DepthMap(np.ones((8, 8)))})
    with pytest.raises(ValueError):
        update_pool(pool, "sometimes", pool_ctx(1, pool, "v", 1))
    with pytest.raises(KeyError):
        pool.replace("w", DepthMap(np.ones((8, 8))), 0)


def test_enhancer_config_validation():
    with pytest.raises(ValueError):
        EnhancerConfig(steps=0)
    with pytest.raises(ValueError):
        EnhancerConfig(lambda_w=-1)
    with pytest.raises(ValueError):
        EnhancerConfig.from_dict({"lambda_q": 1})
    assert EnhancerConfig().patch_for(64) == 8
