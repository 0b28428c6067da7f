"""Differentiable EWA splatting of 3D Gaussians into a pinhole camera.

Each Gaussian is projected to a 2D footprint with covariance J W Σ Wᵀ Jᵀ
(plus a 0.3 px² dilation) and truncated at three standard deviations.
Pixels composite every overlapping footprint front to back in camera-z
order, skipping contributions with alpha below 1/255 and stopping once
transmittance falls under 1e-4; footprints are binned into 4x4 pixel tiles.

Each splat contributes the conditional mean of its camera z along the pixel
ray under the linearized projection, z + gᵀ(p − μ₂) with g = Σ₂⁻¹ J Σ_cam ẑ,
so a flat splat lying on a slanted surface reports that surface's depth
across its whole footprint rather than its center depth. Expected depth is
the alpha-weighted per-contribution z normalized by accumulated alpha, and
pixels whose alpha falls below ``ALPHA_MIN`` get invalid depth.

The backward pass walks the same contributions back to front, recovering
per-pixel transmittance by division as the reference CUDA rasterizer
does. Per-contribution alpha is clamped at 0.99 so that division stays
well conditioned.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from ..core import Camera, DepthMap, Image
from .gaussians import (GaussianGrads, GaussianSet, normalize_grad, normalize_quats, quat_to_rotmat,
                        rotmat_grad_to_quat, sigmoid)

ALPHA_MIN = 0.2
NEAR_PLANE = 0.05
COV_DILATION = 0.3
MAX_ALPHA = 0.99
# contributions below this alpha are skipped; a pixel stops accumulating once T < MIN_TRANSMITTANCE
MIN_ALPHA = 1.0 / 255.0
MIN_TRANSMITTANCE = 1e-4
TRUNCATION_SIGMA = 3.0
# the projection Jacobian is evaluated with x/z, y/z clamped to this multiple of the half field of view
JACOBIAN_FOV_MARGIN = 1.3


@dataclass(frozen=True)
class RenderOutput:
    color: Image
    depth: DepthMap
    alpha: np.ndarray
    # alpha-normalized depth before validity masking; used for gradients
    depth_raw: np.ndarray
    n_contrib: np.ndarray


@dataclass
class _Projected:
    idx: np.ndarray          # indices (into the GaussianSet) of visible Gaussians
    order: np.ndarray        # positions into idx, sorted by z ascending
    t: np.ndarray            # camera-frame centers (M,3)
    mean2: np.ndarray        # (M,2)
    cov3: np.ndarray         # (M,3,3)
    cov2: np.ndarray         # (M,2,2), dilated
    conic: np.ndarray        # (M,3): a, b, c of the inverse 2D covariance
    M: np.ndarray            # (M,2,3) = J W
    J: np.ndarray            # (M,2,3)
    R: np.ndarray            # (M,3,3) body rotation
    qn: np.ndarray
    qnorm: np.ndarray
    scales: np.ndarray
    opacity: np.ndarray
    radius: np.ndarray
    jt: np.ndarray           # (M,2) camera x, y used in the Jacobian (clamped)
    clamped: np.ndarray      # (M,2) bool
    zcov: np.ndarray         # (M,2) = J Σ_cam ẑ, screen/depth covariance
    slope: np.ndarray        # (M,2) depth change per pixel offset


@dataclass
class RenderContext:
    gaussians: GaussianSet
    camera: Camera
    proj: _Projected
    accum_color: np.ndarray
    accum_depth: np.ndarray
    accum_alpha: np.ndarray
    T_final: np.ndarray
    n_contrib: np.ndarray
    tile_offsets: np.ndarray
    tile_items: np.ndarray
    last: np.ndarray


def _preprocess(g: GaussianSet, cam: Camera) -> _Projected:
    W = cam.world_to_camera.rotation
    tw = cam.world_to_camera.translation
    t_all = g.centers @ W.T + tw
    vis = t_all[:, 2] > NEAR_PLANE
    idx = np.nonzero(vis)[0]
    t = t_all[idx]
    qn, qnorm = normalize_quats(g.rotations[idx]) if idx.size else (np.zeros((0, 4)), np.zeros((0, 1)))
    R = quat_to_rotmat(qn)
    s = np.exp(g.log_scales[idx])
    L = R * s[:, None, :]
    cov3 = L @ np.transpose(L, (0, 2, 1))
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = cam.fx / tz
    lim = JACOBIAN_FOV_MARGIN * 0.5 * np.array([cam.width / cam.fx, cam.height / cam.fy])
    ratio = t[:, :2] / tz[:, None]
    clamped = np.abs(ratio) > lim
    jt = np.clip(ratio, -lim, lim) * tz[:, None]
    J[:, 0, 2] = -cam.fx * jt[:, 0] / tz ** 2
    J[:, 1, 1] = cam.fy / tz
    J[:, 1, 2] = -cam.fy * jt[:, 1] / tz ** 2
    M = J @ W
    cov2 = M @ cov3 @ np.transpose(M, (0, 2, 1))
    cov2[:, 0, 0] += COV_DILATION
    cov2[:, 1, 1] += COV_DILATION
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.ceil(TRUNCATION_SIGMA * np.sqrt(lam))
    mean2 = np.stack([cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy], axis=1)
    on_screen = ((mean2[:, 0] + radius >= 0) & (mean2[:, 0] - radius <= cam.width - 1)
                 & (mean2[:, 1] + radius >= 0) & (mean2[:, 1] - radius <= cam.height - 1))
    order = np.nonzero(on_screen)[0]
    order = order[np.argsort(tz[order], kind="stable")]
    zcov = M @ (cov3 @ W[2])[..., None]
    zcov = zcov[..., 0]
    slope = np.stack([conic[:, 0] * zcov[:, 0] + conic[:, 1] * zcov[:, 1],
                      conic[:, 1] * zcov[:, 0] + conic[:, 2] * zcov[:, 1]], axis=1)
    return _Projected(idx, order, t, mean2, cov3, cov2, conic, M, J, R, qn, qnorm, s,
                      sigmoid(g.opacity_logits[idx]), radius, jt, clamped, zcov, slope)


TILE = 4


@numba.njit(cache=True)
def _pixel_box(mx, my, r, H, W):
    x0 = max(0, int(np.floor(mx - r)))
    x1 = min(W - 1, int(np.ceil(mx + r)))
    y0 = max(0, int(np.floor(my - r)))
    y1 = min(H - 1, int(np.ceil(my + r)))
    return x0, x1, y0, y1


@numba.njit(cache=True)
def _bin_tiles(order, mean2, radius, H, W):
    """Per-tile lists of Gaussians (depth-sorted, since ``order`` is) in CSR form."""
    tw = (W + TILE - 1) // TILE
    th = (H + TILE - 1) // TILE
    offsets = np.zeros(tw * th + 1, dtype=np.int64)
    for k in range(order.shape[0]):
        i = order[k]
        x0, x1, y0, y1 = _pixel_box(mean2[i, 0], mean2[i, 1], radius[i], H, W)
        if x0 > x1 or y0 > y1:
            continue
        for ty in range(y0 // TILE, y1 // TILE + 1):
            for tx in range(x0 // TILE, x1 // TILE + 1):
                offsets[ty * tw + tx + 1] += 1
    for t in range(tw * th):
        offsets[t + 1] += offsets[t]
    fill = offsets[:-1].copy()
    items = np.empty(offsets[-1], dtype=np.int64)
    for k in range(order.shape[0]):
        i = order[k]
        x0, x1, y0, y1 = _pixel_box(mean2[i, 0], mean2[i, 1], radius[i], H, W)
        if x0 > x1 or y0 > y1:
            continue
        for ty in range(y0 // TILE, y1 // TILE + 1):
            for tx in range(x0 // TILE, x1 // TILE + 1):
                t = ty * tw + tx
                items[fill[t]] = i
                fill[t] += 1
    return offsets, items


@numba.njit(cache=True)
def _pack(items, mean2, conic, opac):
    # tile-ordered copy of the per-Gaussian footprint data for sequential access
    pk = np.empty((items.shape[0], 6))
    for j in range(items.shape[0]):
        i = items[j]
        pk[j, 0] = mean2[i, 0]
        pk[j, 1] = mean2[i, 1]
        pk[j, 2] = conic[i, 0]
        pk[j, 3] = conic[i, 1]
        pk[j, 4] = conic[i, 2]
        pk[j, 5] = opac[i]
    return pk


@numba.njit(cache=True)
def _raster_forward(offsets, items, mean2, conic, opac, colors, depth, slope, H, W):
    C = np.zeros((H, W, 3))
    D = np.zeros((H, W))
    A = np.zeros((H, W))
    T = np.ones((H, W))
    ncon = np.zeros((H, W), dtype=np.int32)
    # list position one past the last contribution, per pixel
    last = np.zeros((H, W), dtype=np.int64)
    cut = TRUNCATION_SIGMA * TRUNCATION_SIGMA
    tw = (W + TILE - 1) // TILE
    pk = _pack(items, mean2, conic, opac)
    for t in range(offsets.shape[0] - 1):
        start = offsets[t]
        end = offsets[t + 1]
        ty0 = (t // tw) * TILE
        tx0 = (t % tw) * TILE
        for py in range(ty0, min(ty0 + TILE, H)):
            for px in range(tx0, min(tx0 + TILE, W)):
                tr = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dd = 0.0
                aa = 0.0
                n = 0
                stop = start
                for j in range(start, end):
                    dx = px - pk[j, 0]
                    dy = py - pk[j, 1]
                    maha = pk[j, 2] * dx * dx + 2.0 * pk[j, 3] * dx * dy + pk[j, 4] * dy * dy
                    if maha > cut:
                        continue
                    i = items[j]
                    a = pk[j, 5] * np.exp(-0.5 * maha)
                    if a > MAX_ALPHA:
                        a = MAX_ALPHA
                    if a < MIN_ALPHA:
                        continue
                    w = a * tr
                    c0 += colors[i, 0] * w
                    c1 += colors[i, 1] * w
                    c2 += colors[i, 2] * w
                    dd += (depth[i] + slope[i, 0] * dx + slope[i, 1] * dy) * w
                    aa += w
                    tr *= 1.0 - a
                    n += 1
                    stop = j + 1
                    if tr < MIN_TRANSMITTANCE:
                        break
                C[py, px, 0] = c0
                C[py, px, 1] = c1
                C[py, px, 2] = c2
                D[py, px] = dd
                A[py, px] = aa
                T[py, px] = tr
                ncon[py, px] = n
                last[py, px] = stop
    return C, D, A, T, ncon, last


@numba.njit(cache=True)
def _raster_backward(offsets, items, mean2, conic, opac, colors, depth, slope, T_final, last, gC, gD, gA):
    H, W = T_final.shape
    n = mean2.shape[0]
    d_mean2 = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_opac = np.zeros(n)
    d_col = np.zeros((n, 3))
    d_depth = np.zeros(n)
    d_slope = np.zeros((n, 2))
    cut = TRUNCATION_SIGMA * TRUNCATION_SIGMA
    tw = (W + TILE - 1) // TILE
    for t in range(offsets.shape[0] - 1):
        start = offsets[t]
        ty0 = (t // tw) * TILE
        tx0 = (t % tw) * TILE
        for py in range(ty0, min(ty0 + TILE, H)):
            for px in range(tx0, min(tx0 + TILE, W)):
                tr = T_final[py, px]
                s0 = 0.0
                s1 = 0.0
                s2 = 0.0
                sd = 0.0
                sa = 0.0
                g0 = gC[py, px, 0]
                g1 = gC[py, px, 1]
                g2 = gC[py, px, 2]
                gd = gD[py, px]
                ga = gA[py, px]
                for j in range(last[py, px] - 1, start - 1, -1):
                    i = items[j]
                    mx = mean2[i, 0]
                    my = mean2[i, 1]
                    ca = conic[i, 0]
                    cb = conic[i, 1]
                    cc = conic[i, 2]
                    dx = px - mx
                    dy = py - my
                    maha = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if maha > cut:
                        continue
                    gexp = np.exp(-0.5 * maha)
                    a = opac[i] * gexp
                    clamped = a > MAX_ALPHA
                    if clamped:
                        a = MAX_ALPHA
                    if a < MIN_ALPHA:
                        continue
                    inv = 1.0 / (1.0 - a)
                    tk = tr * inv
                    w = a * tk
                    c0 = colors[i, 0]
                    c1 = colors[i, 1]
                    c2 = colors[i, 2]
                    z = depth[i] + slope[i, 0] * dx + slope[i, 1] * dy
                    dA = (g0 * (c0 * tk - s0 * inv) + g1 * (c1 * tk - s1 * inv) + g2 * (c2 * tk - s2 * inv)
                          + gd * (z * tk - sd * inv) + ga * (tk - sa * inv))
                    s0 += c0 * w
                    s1 += c1 * w
                    s2 += c2 * w
                    sd += z * w
                    sa += w
                    tr = tk
                    d_col[i, 0] += g0 * w
                    d_col[i, 1] += g1 * w
                    d_col[i, 2] += g2 * w
                    d_depth[i] += gd * w
                    d_slope[i, 0] += gd * w * dx
                    d_slope[i, 1] += gd * w * dy
                    d_mean2[i, 0] -= gd * w * slope[i, 0]
                    d_mean2[i, 1] -= gd * w * slope[i, 1]
                    if not clamped:
                        d_opac[i] += dA * gexp
                        dm = -0.5 * dA * a
                        d_conic[i, 0] += dm * dx * dx
                        d_conic[i, 1] += dm * 2.0 * dx * dy
                        d_conic[i, 2] += dm * dy * dy
                        d_mean2[i, 0] -= dm * (2.0 * ca * dx + 2.0 * cb * dy)
                        d_mean2[i, 1] -= dm * (2.0 * cb * dx + 2.0 * cc * dy)
    return d_mean2, d_conic, d_opac, d_col, d_depth, d_slope


def render_with_context(gaussians: GaussianSet, camera: Camera) -> tuple[RenderOutput, RenderContext]:
    H, W = camera.height, camera.width
    p = _preprocess(gaussians, camera)
    colors = gaussians.colors[p.idx]
    offsets, items = _bin_tiles(p.order, p.mean2, p.radius, H, W)
    C, D, A, T, ncon, last = _raster_forward(offsets, items, p.mean2, p.conic, p.opacity, colors,
                                             p.t[:, 2].copy(), p.slope, H, W)
    valid = A >= ALPHA_MIN
    depth_raw = np.where(A > 0, D / np.where(A > 0, A, 1.0), 0.0)
    out = RenderOutput(Image(C), DepthMap(np.where(valid, depth_raw, 0.0)), A, depth_raw, ncon)
    return out, RenderContext(gaussians, camera, p, C, D, A, T, ncon, offsets, items, last)


def render(gaussians: GaussianSet, camera: Camera) -> RenderOutput:
    return render_with_context(gaussians, camera)[0]


def backward(ctx: RenderContext, d_color=None, d_depth=None, d_alpha=None) -> GaussianGrads:
    """Gradients of a scalar loss given its gradients on the render outputs.

    ``d_depth`` is taken with respect to the masked expected depth; entries on
    invalid pixels are ignored.
    """
    H, W = ctx.camera.height, ctx.camera.width
    n = len(ctx.gaussians)
    gC = np.zeros((H, W, 3)) if d_color is None else np.asarray(d_color, dtype=np.float64)
    gDepth = np.zeros((H, W)) if d_depth is None else np.asarray(d_depth, dtype=np.float64)
    gA = np.zeros((H, W)) if d_alpha is None else np.asarray(d_alpha, dtype=np.float64)
    if gC.shape != (H, W, 3) or gDepth.shape != (H, W) or gA.shape != (H, W):
        raise ValueError("upstream gradient shapes do not match the render")
    grads = GaussianGrads.zeros(n)
    p = ctx.proj
    if p.order.size == 0:
        return grads

    # depth = D / A on valid pixels
    A = ctx.accum_alpha
    valid = A >= ALPHA_MIN
    safeA = np.where(valid, A, 1.0)
    gD = np.where(valid, gDepth / safeA, 0.0)
    gA = gA - np.where(valid, gDepth * ctx.accum_depth / safeA ** 2, 0.0)

    colors = ctx.gaussians.colors[p.idx]
    d_mean2, d_conic, d_opac, d_col, d_z, d_slope = _raster_backward(
        ctx.tile_offsets, ctx.tile_items, p.mean2, p.conic, p.opacity, colors, p.t[:, 2].copy(), p.slope,
        ctx.T_final, ctx.last, np.ascontiguousarray(gC), np.ascontiguousarray(gD), np.ascontiguousarray(gA))

    cam = ctx.camera
    Wr = cam.world_to_camera.rotation
    tx, ty, tz = p.t[:, 0], p.t[:, 1], p.t[:, 2]

    # slope = Q zcov with Q the conic matrix
    k = p.zcov
    d_zcov = np.stack([p.conic[:, 0] * d_slope[:, 0] + p.conic[:, 1] * d_slope[:, 1],
                       p.conic[:, 1] * d_slope[:, 0] + p.conic[:, 2] * d_slope[:, 1]], axis=1)
    d_conic = d_conic + np.stack([d_slope[:, 0] * k[:, 0], d_slope[:, 0] * k[:, 1] + d_slope[:, 1] * k[:, 0],
                                  d_slope[:, 1] * k[:, 1]], axis=1)

    # conic = inverse(cov2)
    Gq = np.empty((p.idx.size, 2, 2))
    Gq[:, 0, 0] = d_conic[:, 0]
    Gq[:, 0, 1] = Gq[:, 1, 0] = 0.5 * d_conic[:, 1]
    Gq[:, 1, 1] = d_conic[:, 2]
    Q = np.empty_like(Gq)
    Q[:, 0, 0] = p.conic[:, 0]
    Q[:, 0, 1] = Q[:, 1, 0] = p.conic[:, 1]
    Q[:, 1, 1] = p.conic[:, 2]
    G_cov2 = -Q @ Gq @ Q

    # cov2 = M cov3 Mᵀ
    d_M = 2.0 * G_cov2 @ p.M @ p.cov3
    d_cov3 = np.transpose(p.M, (0, 2, 1)) @ G_cov2 @ p.M
    # zcov = M cov3 w with w the camera z row
    w3 = Wr[2]
    cw = p.cov3 @ w3
    d_M += d_zcov[:, :, None] * cw[:, None, :]
    mk = np.einsum("nij,ni->nj", p.M, d_zcov)
    d_cov3 += 0.5 * (mk[:, :, None] * w3[None, None, :] + w3[None, :, None] * mk[:, None, :])
    d_J = d_M @ Wr.T

    d_t = np.zeros((p.idx.size, 3))
    free = ~p.clamped
    jx, jy = p.jt[:, 0], p.jt[:, 1]
    d_t[:, 0] = d_J[:, 0, 2] * (-cam.fx / tz ** 2) * free[:, 0] + d_mean2[:, 0] * cam.fx / tz
    d_t[:, 1] = d_J[:, 1, 2] * (-cam.fy / tz ** 2) * free[:, 1] + d_mean2[:, 1] * cam.fy / tz
    # a clamped jx equals ±lim·tz, which adds a tz dependence
    d_t[:, 2] = (d_J[:, 0, 0] * (-cam.fx / tz ** 2) + d_J[:, 1, 1] * (-cam.fy / tz ** 2)
                 + d_J[:, 0, 2] * (cam.fx * jx / tz ** 3) * (2 - p.clamped[:, 0])
                 + d_J[:, 1, 2] * (cam.fy * jy / tz ** 3) * (2 - p.clamped[:, 1])
                 - d_mean2[:, 0] * cam.fx * tx / tz ** 2 - d_mean2[:, 1] * cam.fy * ty / tz ** 2
                 + d_z)
    grads.centers[p.idx] = d_t @ Wr

    # cov3 = (R S)(R S)ᵀ
    Lm = p.R * p.scales[:, None, :]
    d_L = 2.0 * d_cov3 @ Lm
    d_R = d_L * p.scales[:, None, :]
    d_s = np.sum(d_L * p.R, axis=1)
    grads.log_scales[p.idx] = d_s * p.scales
    d_qn = rotmat_grad_to_quat(p.qn, d_R)
    grads.rotations[p.idx] = normalize_grad(p.qn, p.qnorm, d_qn)
    grads.opacity_logits[p.idx] = d_opac * p.opacity * (1.0 - p.opacity)
    grads.colors[p.idx] = d_col
    return grads


def render_backward(gaussians: GaussianSet, camera: Camera, d_color=None, d_depth=None,
                    d_alpha=None) -> GaussianGrads:
    _, ctx = render_with_context(gaussians, camera)
    return backward(ctx, d_color, d_depth, d_alpha)
