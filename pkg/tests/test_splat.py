import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from urbangs.core import Camera, RigidTransform
from urbangs.scenegraph import transform_gaussians
from urbangs.splat import (ALPHA_MIN, GaussianSet, backward, logit, quat_multiply, quat_to_rotmat, render,
                           render_backward, render_with_context, rotmat_to_quat, smallest_axis_normal)
from urbangs.splat.gaussians import normalize_quats

import fdcheck
from conftest import random_rotation

CAM16 = Camera(16.0, 16.0, 7.5, 7.5, 16, 16)


def one(center, scale=0.1, opacity=0.5, color=(1.0, 0.5, 0.25), q=(1.0, 0, 0, 0)):
    g = GaussianSet.from_points(np.array([center], float), np.array([color]), scale, opacity)
    g.rotations[:] = np.asarray(q) / np.linalg.norm(q)
    return g


def oracle(g: GaussianSet, cam: Camera):
    """Brute-force per-pixel compositing written from the splatting equations."""
    H, W = cam.height, cam.width
    Wr = cam.world_to_camera.rotation
    tw = cam.world_to_camera.translation
    prims = []
    for k in range(len(g)):
        t = Wr @ g.centers[k] + tw
        if t[2] <= 0.05:
            continue
        q = g.rotations[k] / np.linalg.norm(g.rotations[k])
        R = quat_to_rotmat(q[None])[0]
        S = np.diag(np.exp(g.log_scales[k]))
        cov = R @ S @ S @ R.T
        lim = 1.3 * 0.5 * np.array([W / cam.fx, H / cam.fy])
        jx, jy = np.clip(t[:2] / t[2], -lim, lim) * t[2]
        J = np.array([[cam.fx / t[2], 0, -cam.fx * jx / t[2] ** 2], [0, cam.fy / t[2], -cam.fy * jy / t[2] ** 2]])
        c2 = J @ Wr @ cov @ Wr.T @ J.T + 0.3 * np.eye(2)
        mu = np.array([cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy])
        o = 1.0 / (1.0 + np.exp(-g.opacity_logits[k]))
        Q = np.linalg.inv(c2)
        # conditional mean of camera z given the screen offset
        slope = Q @ (J @ (Wr @ cov @ Wr.T)[:, 2])
        prims.append((t[2], k, mu, Q, o, slope))
    prims.sort(key=lambda p: (p[0], p[1]))
    C = np.zeros((H, W, 3))
    D = np.zeros((H, W))
    A = np.zeros((H, W))
    n = np.zeros((H, W), int)
    for r in range(H):
        for c in range(W):
            T = 1.0
            for z, k, mu, Q, o, slope in prims:
                d = np.array([c, r]) - mu
                m = d @ Q @ d
                if m > 9.0:
                    continue
                a = min(0.99, o * np.exp(-0.5 * m))
                if a < 1 / 255:
                    continue
                C[r, c] += g.colors[k] * a * T
                D[r, c] += (z + slope @ d) * a * T
                A[r, c] += a * T
                T *= 1 - a
                n[r, c] += 1
                if T < 1e-4:
                    break
    return C, D, A, n


def test_empty_scene():
    out = render(GaussianSet.empty(), CAM16)
    assert not out.alpha.any()
    assert not out.depth.valid.any()
    assert not out.color.values.any()


def test_single_opaque_gaussian_depth():
    g = one([0.0, 0.0, 5.0], scale=0.5, opacity=0.999)
    out = render(g, CAM16)
    assert abs(out.depth.values[7, 7] - 5.0) < 1e-3
    assert abs(out.depth.values[8, 8] - 5.0) < 1e-3


def test_single_gaussian_depth_is_camera_z(rng):
    # an isotropic splat centered on the optical axis has no depth slope
    for _ in range(10):
        c = np.array([0.0, 0.0, rng.uniform(2, 8)])
        out = render(one(c, scale=0.3, opacity=0.9), CAM16)
        v = out.depth.values[out.depth.valid]
        assert v.size and np.all(np.abs(v - c[2]) < 1e-9)


def test_flat_splat_on_slanted_plane_reports_plane_depth():
    # a disc lying in the plane z = 4 + 0.5 y: every covered pixel sees the plane, not the center depth
    th = np.arctan(0.5)
    # rotation about x taking ẑ to the plane normal (0, -sin, cos)
    g = one([0.0, 0.0, 4.0], 0.3, 0.95, q=(np.cos(th / 2), np.sin(th / 2), 0.0, 0.0))
    g.log_scales[0, 2] = np.log(1e-4)
    out = render(g, CAM16)
    rows = np.arange(16)[:, None] * np.ones((1, 16))
    y_over_z = (rows - 7.5) / 16.0
    plane = 4.0 / (1.0 - 0.5 * y_over_z)
    near_center = out.depth.valid & (np.abs(rows - 7.5) < 3)
    assert near_center.sum() > 10
    err = np.abs(out.depth.values - plane)[near_center]
    center_err = np.abs(4.0 - plane)[near_center]
    # what remains is the perspective curvature the linear slope cannot follow
    assert err.max() < 0.3 * center_err.max()


def test_two_gaussians_on_a_ray_matches_oracle():
    g = GaussianSet.concat([one([0, 0, 2.0], 0.2, 0.5, (1, 0, 0)), one([0, 0, 10.0], 1.0, 0.98, (0, 1, 0))])
    out = render(g, CAM16)
    C, D, A, _ = oracle(g, CAM16)
    np.testing.assert_allclose(out.alpha, A, atol=1e-9)
    ref = D[7, 7] / A[7, 7]
    assert abs(out.depth.values[7, 7] - ref) < 1e-9
    assert 2.0 < ref < 10.0


@pytest.mark.parametrize("seed", range(6))
def test_compositing_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    g = fdcheck.random_gaussians(rng, 32, wide=seed % 2 == 1)
    out = render(g, CAM16)
    C, D, A, n = oracle(g, CAM16)
    np.testing.assert_allclose(out.color.values, C, atol=1e-6)
    np.testing.assert_allclose(out.alpha, A, atol=1e-6)
    np.testing.assert_array_equal(out.n_contrib, n)
    valid = A >= ALPHA_MIN
    np.testing.assert_array_equal(out.depth.valid, valid)
    np.testing.assert_allclose(out.depth.values[valid], (D / np.where(A > 0, A, 1))[valid], atol=1e-6)
    assert out.alpha.max() <= 1.0


def test_alpha_equals_one_minus_transmittance(rng):
    g = fdcheck.random_gaussians(rng, 20)
    out, ctx = render_with_context(g, CAM16)
    np.testing.assert_allclose(out.alpha, 1.0 - ctx.T_final, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_render_gradients_match_finite_differences(seed):
    checked, bad = fdcheck.check_render(seed)
    assert checked > 80
    assert bad == 0


def test_saturated_scene_gradients():
    # stacked opaque splats exercise early termination in both passes
    rng = np.random.default_rng(7)
    g = fdcheck.random_gaussians(rng, 30)
    g.opacity_logits[:] = rng.uniform(1.5, 2.0, 30)
    g.log_scales[:] = rng.uniform(-1.5, -1.0, (30, 3))
    _, ctx = render_with_context(g, CAM16)
    gC = rng.normal(size=(16, 16, 3))
    an = backward(ctx, gC, None, None)
    h = 1e-5
    for k in range(30):
        for j in range(3):
            gp, gm = g.copy(), g.copy()
            gp.centers[k, j] += h
            gm.centers[k, j] -= h
            op, om = render(gp, CAM16), render(gm, CAM16)
            if not (np.array_equal(op.n_contrib, ctx.n_contrib) and np.array_equal(om.n_contrib, ctx.n_contrib)):
                continue
            fd = ((gC * op.color.values).sum() - (gC * om.color.values).sum()) / (2 * h)
            assert fdcheck.close(fd, an.centers[k, j])


def test_zero_upstream_gives_zero_gradients(rng):
    g = fdcheck.random_gaussians(rng)
    gr = render_backward(g, CAM16)
    for v in gr.params().values():
        assert not v.any()


def test_backward_rejects_bad_shapes(rng):
    g = fdcheck.random_gaussians(rng)
    _, ctx = render_with_context(g, CAM16)
    with pytest.raises(ValueError):
        backward(ctx, np.zeros((8, 8, 3)))


def test_occluded_color_gradient_vanishes():
    front = one([0, 0, 2.0], 1.0, 0.999, (1, 1, 1))
    back = one([0, 0, 6.0], 0.1, 0.5, (0, 0, 0))
    for _ in range(4):
        front = GaussianSet.concat([front, one([0, 0, 2.0 + 0.01 * len(front)], 1.0, 0.999)])
    g = GaussianSet.concat([front, back])
    gr = render_backward(g, CAM16, d_color=np.ones((16, 16, 3)))
    assert np.abs(gr.colors[-1]).max() < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_isotropic_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    g = one([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(3, 6)], scale=rng.uniform(0.05, 0.5), opacity=0.7)
    base = render(g, CAM16)
    q = rng.normal(size=4)
    g.rotations[:] = q / np.linalg.norm(q)
    rot = render(g, CAM16)
    np.testing.assert_allclose(rot.color.values, base.color.values, atol=1e-6)
    np.testing.assert_allclose(rot.depth.values, base.depth.values, atol=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_rigid_scene_motion_invariance(seed):
    rng = np.random.default_rng(seed)
    g = fdcheck.random_gaussians(rng, 12)
    T = RigidTransform(random_rotation(rng), rng.normal(size=3))
    moved_cam = CAM16.with_pose(T.compose(CAM16.pose))
    a = render(g, CAM16)
    b = render(transform_gaussians(g, T), moved_cam)
    np.testing.assert_allclose(b.color.values, a.color.values, atol=1e-7)
    np.testing.assert_allclose(b.alpha, a.alpha, atol=1e-7)


def test_behind_camera_is_culled():
    out = render(one([0, 0, -3.0], 1.0, 0.99), CAM16)
    assert not out.alpha.any()


def test_smallest_axis_axis_aligned():
    g = one([0, 0, 0])
    g.log_scales[:] = np.log([1.0, 1.0, 0.1])
    np.testing.assert_allclose(smallest_axis_normal(g), [[0, 0, 1]], atol=1e-12)


def test_smallest_axis_rotated_about_x():
    g = one([0, 0, 0], q=(np.cos(np.pi / 4), np.sin(np.pi / 4), 0, 0))
    g.log_scales[:] = np.log([1.0, 1.0, 0.1])
    # z axis maps to (0, -1, 0); z == 0 so the largest component is made positive
    np.testing.assert_allclose(smallest_axis_normal(g), [[0, 1, 0]], atol=1e-12)


def test_smallest_axis_isotropic_tie():
    q = np.array([0.9, 0.1, -0.3, 0.2])
    g = one([0, 0, 0], q=q)
    R = quat_to_rotmat(normalize_quats(g.rotations)[0])[0]
    n = smallest_axis_normal(g)[0]
    ax = R[:, 0] if R[2, 0] >= 0 else -R[:, 0]
    np.testing.assert_allclose(n, ax, atol=1e-12)


def test_smallest_axis_points_up(rng):
    g = fdcheck.random_gaussians(rng, 50)
    n = smallest_axis_normal(g)
    assert np.all(n[:, 2] >= 0)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)


def test_quaternion_helpers(rng):
    R = random_rotation(rng)
    q = rotmat_to_quat(R)
    np.testing.assert_allclose(quat_to_rotmat(q[None])[0], R, atol=1e-12)
    a, b = rng.normal(size=4), rng.normal(size=4)
    a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
    Rab = quat_to_rotmat(quat_multiply(a, b)[None])[0]
    np.testing.assert_allclose(Rab, quat_to_rotmat(a[None])[0] @ quat_to_rotmat(b[None])[0], atol=1e-12)


def test_gaussianset_rejects_non_unit_quaternions():
    with pytest.raises(ValueError):
        GaussianSet(np.zeros((1, 3)), np.zeros((1, 3)), np.array([[2.0, 0, 0, 0]]), np.zeros(1), np.zeros((1, 3)))
    assert float(logit(0.5)) == 0.0
