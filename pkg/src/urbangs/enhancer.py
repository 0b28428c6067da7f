"""Depth refinement: confidence gating, the refinement losses, and the depth pool.

The refinement objective is

    L = λ_ref·L_ref + λ_smooth·L_smooth + λ_w·L_w

minimized here by projected gradient descent directly on the depth grid. The
`DepthEnhancer` protocol lets a learned prior (for example a process reached
through the PFM handshake in `urbangs.pipeline.handshake`) take its place.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Callable, Hashable, Protocol, Sequence

import numpy as np

from .core import Camera, DepthMap, Image, as_array, pixel_grid, project_points, unproject

log = logging.getLogger(__name__)

REAL_TIME = "real_time"
PERIODIC = "periodic"
STRATEGIES = (REAL_TIME, PERIODIC)


@dataclass(frozen=True)
class EnhancerConfig:
    lambda_c: float = 2.0
    lambda_ref: float = 1.0
    lambda_smooth: float = 1.0 / 8.0
    lambda_w: float = 1.0 / 16.0
    # None means H // 8
    patch_size: int | None = None
    steps: int = 80
    early_stop_patience: int = 8
    update_period: int = 20
    neighbor_count: int = 6
    # per-pixel step in meters per unit of (H·W)-scaled gradient
    step_size: float = 0.05
    scale_shift: bool = False
    min_depth: float = 1e-3

    def __post_init__(self):
        for name in ("lambda_c", "lambda_ref", "lambda_smooth", "lambda_w", "step_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.patch_size is not None and self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.update_period < 1 or self.early_stop_patience < 1:
            raise ValueError("update_period and early_stop_patience must be >= 1")

    def patch_for(self, height: int) -> int:
        return self.patch_size if self.patch_size is not None else max(1, height // 8)

    @classmethod
    def from_dict(cls, d: dict) -> "EnhancerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown EnhancerConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ConfidenceMap:
    values: np.ndarray

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def confidence(d_cur, d_prev, lambda_c: float = 2.0) -> ConfidenceMap:
    """1 where both depths are valid and max(cur/prev, prev/cur) < λ_C, else 0."""
    a = as_array(d_cur)
    b = as_array(d_prev)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    ok = np.isfinite(a) & np.isfinite(b) & (a > 0) & (b > 0)
    sa = np.where(ok, a, 1.0)
    sb = np.where(ok, b, 1.0)
    ratio = np.maximum(sa / sb, sb / sa)
    c = (ok & (ratio < lambda_c)).astype(np.float64)
    c.setflags(write=False)
    return ConfidenceMap(c)


def _patch_ids(h: int, w: int, p: int):
    nh, nw = -(-h // p), -(-w // p)
    rows = np.arange(h) // p
    cols = np.arange(w) // p
    return (rows[:, None] * nw + cols[None, :]).ravel(), nh * nw


def average_pool(x, p: int, weights=None) -> np.ndarray:
    """p x p average pooling; trailing partial patches average their actual pixels."""
    x = as_array(x)
    h, w = x.shape
    ids, n = _patch_ids(h, w, p)
    wt = np.ones(h * w) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    num = np.bincount(ids, weights=x.ravel() * wt, minlength=n)
    den = np.bincount(ids, weights=wt, minlength=n)
    return np.divide(num, den, out=np.zeros(n), where=den > 0).reshape(-(-h // p), -(-w // p))


def loss_ref(d_hat, d_ref, conf, p: int):
    """Confidence-gated L1 + L2 between patch-pooled depths, averaged over patches.

    Depths are pooled over the pixels where ``d_ref`` is valid; confidence is
    pooled over all pixels. Returns (loss, gradient on d_hat).
    """
    x = as_array(d_hat)
    r = as_array(d_ref)
    c = as_array(conf)
    h, w = x.shape
    ids, n = _patch_ids(h, w, p)
    valid = (r > 0).ravel().astype(np.float64)
    cnt = np.bincount(ids, weights=valid, minlength=n)
    c_pool = np.bincount(ids, weights=c.ravel(), minlength=n) / np.bincount(ids, minlength=n)
    safe = np.where(cnt > 0, cnt, 1.0)
    delta = (np.bincount(ids, weights=x.ravel() * valid, minlength=n)
             - np.bincount(ids, weights=r.ravel() * valid, minlength=n)) / safe
    delta = np.where(cnt > 0, delta, 0.0)
    loss = float(np.mean(c_pool * (np.abs(delta) + delta ** 2)))
    d_delta = c_pool * (np.sign(delta) + 2 * delta) / n
    grad = (d_delta / safe)[ids] * valid
    return loss, grad.reshape(h, w)


def warp(d_src, cam_src: Camera, cam_dst: Camera) -> DepthMap:
    """Forward-splat the source depth into the destination view with a z-buffer.

    Each valid source pixel lands on its nearest destination pixel; the closest
    surface wins and untouched pixels are invalid.
    """
    d = as_array(d_src)
    valid = d > 0
    out = np.full(cam_dst.height * cam_dst.width, np.inf)
    if valid.any():
        pix = pixel_grid(cam_src.width, cam_src.height)[valid]
        world = unproject(cam_src, pix, d[valid])
        uv, z, front = project_points(cam_dst, world)
        uv, z = uv[front], z[front]
        col = np.rint(uv[:, 0])
        row = np.rint(uv[:, 1])
        inside = (col >= 0) & (col < cam_dst.width) & (row >= 0) & (row < cam_dst.height)
        flat = (row[inside] * cam_dst.width + col[inside]).astype(np.int64)
        np.minimum.at(out, flat, z[inside])
    out[~np.isfinite(out)] = 0.0
    return DepthMap(out.reshape(cam_dst.height, cam_dst.width))


def _loss_warp_pre(d_hat: np.ndarray, warped: Sequence[np.ndarray]):
    loss = 0.0
    grad = np.zeros_like(d_hat)
    for wd in warped:
        m = (wd > 0) & (d_hat > 0)
        n = int(m.sum())
        if n == 0:
            continue
        diff = d_hat[m] - wd[m]
        loss += float(np.abs(diff).sum() / n)
        grad[m] += np.sign(diff) / n
    return loss, grad


def loss_warp(d_hat_i, neighbors: Sequence[tuple], cam_i: Camera):
    """Sum over neighbors of the mean |W_{j→i}(D_j) − D̂_i| on pixels the warp reaches.

    ``neighbors`` holds (depth, camera) pairs. Warped maps are treated as constants.
    """
    x = as_array(d_hat_i)
    warped = [warp(dj, cj, cam_i).values for dj, cj in neighbors]
    return _loss_warp_pre(x, warped)


def _image_weights(image) -> tuple[np.ndarray, np.ndarray]:
    img = as_array(image)
    if img.ndim == 2:
        img = img[..., None]
    gx = np.mean(np.abs(img[:, 1:] - img[:, :-1]), axis=2)
    gy = np.mean(np.abs(img[1:] - img[:-1]), axis=2)
    return np.exp(-gx), np.exp(-gy)


def loss_smooth(d_hat, image, weights=None):
    """Edge-aware smoothness (1/HW)·Σ |∂x D|e^{−|∂x I|} + |∂y D|e^{−|∂y I|}.

    Forward differences; pairs touching an invalid (≤ 0) depth contribute zero.
    """
    x = as_array(d_hat)
    h, w = x.shape
    wx, wy = _image_weights(image) if weights is None else weights
    if wx.shape != (h, w - 1):
        raise ValueError("image and depth dimensions differ")
    ok = x > 0
    dx = x[:, 1:] - x[:, :-1]
    dy = x[1:] - x[:-1]
    mx = ok[:, 1:] & ok[:, :-1]
    my = ok[1:] & ok[:-1]
    hw = h * w
    loss = float((np.sum(np.abs(dx) * wx * mx) + np.sum(np.abs(dy) * wy * my)) / hw)
    gx = np.sign(dx) * wx * mx / hw
    gy = np.sign(dy) * wy * my / hw
    grad = np.zeros_like(x)
    grad[:, 1:] += gx
    grad[:, :-1] -= gx
    grad[1:] += gy
    grad[:-1] -= gy
    return loss, grad


class EarlyStopper:
    """Signals a stop once the tracked value has risen `patience` times in a row."""

    def __init__(self, patience: int):
        self.patience = patience
        self.streak = 0
        self.last = None

    def update(self, value: float) -> bool:
        if self.last is not None and value > self.last:
            self.streak += 1
        else:
            self.streak = 0
        self.last = value
        return self.streak >= self.patience


@dataclass
class EnhanceResult:
    depth: DepthMap
    steps: int = 0
    accepted: int = 0
    stopped_early: bool = False
    aborted: bool = False
    history: list[dict] = field(default_factory=list)


class DepthEnhancer(Protocol):
    def __call__(self, d_init: DepthMap, d_ref: DepthMap, conf: ConfidenceMap, image: Image,
                 neighbors: Sequence[tuple[DepthMap, Camera]], cam_i: Camera,
                 config: EnhancerConfig) -> EnhanceResult: ...


def diffuse_objective(x, d_ref, conf, weights, warped, config: EnhancerConfig, p: int):
    """Weighted refinement objective and its gradient; returns (total, parts, grad)."""
    parts = {"ref": 0.0, "smooth": 0.0, "warp": 0.0}
    grad = np.zeros_like(x)
    if config.lambda_ref > 0:
        parts["ref"], g = loss_ref(x, d_ref, conf, p)
        grad += config.lambda_ref * g
    # tracked even at zero weight: it drives the early stop
    parts["smooth"], g = loss_smooth(x, None, weights)
    grad += config.lambda_smooth * g
    if config.lambda_w > 0 and warped:
        parts["warp"], g = _loss_warp_pre(x, warped)
        grad += config.lambda_w * g
    total = config.lambda_ref * parts["ref"] + config.lambda_smooth * parts["smooth"] + config.lambda_w * parts["warp"]
    return total, parts, grad


def enhance(d_init, d_ref, conf, image, neighbors: Sequence[tuple], cam_i: Camera,
            config: EnhancerConfig = EnhancerConfig()) -> EnhanceResult:
    """Refine ``d_init`` by projected gradient descent on the refinement objective.

    A step that would raise the objective is rejected and the step size halved,
    so accepted iterates descend monotonically. The loop stops after
    ``config.steps`` steps or once the smoothness term has risen for
    ``config.early_stop_patience`` consecutive accepted steps. Only pixels valid
    in ``d_init`` are optimized; the rest stay invalid.
    """
    init = d_init if isinstance(d_init, DepthMap) else DepthMap(d_init)
    if config.lambda_ref == 0 and config.lambda_smooth == 0 and config.lambda_w == 0:
        return EnhanceResult(init)
    x0 = init.values.copy()
    mask = x0 > 0
    if not mask.any():
        return EnhanceResult(init)
    r = as_array(d_ref)
    c = as_array(conf)
    h, w = x0.shape
    p = config.patch_for(h)
    weights = _image_weights(image)
    warped = [warp(dj, cj, cam_i).values for dj, cj in neighbors] if config.lambda_w > 0 else []

    def objective(x, a=1.0, b=0.0):
        y = np.where(mask, a * x + b, 0.0)
        return diffuse_objective(y, r, c, weights, warped, config, p)

    scale, shift = 1.0, 0.0
    x = x0
    total, parts, g = objective(x)
    if not np.isfinite(total):
        log.warning("non-finite refinement objective at start; keeping initial depth")
        return EnhanceResult(init, aborted=True)
    result = EnhanceResult(init)
    result.history.append({"step": 0, "total": total, **parts})
    stopper = EarlyStopper(config.early_stop_patience)
    stopper.update(parts["smooth"])
    step = config.step_size
    hw = float(h * w)
    for k in range(1, config.steps + 1):
        result.steps = k
        gx = np.where(mask, g * scale, 0.0)
        prop = np.where(mask, np.maximum(x - step * hw * gx, config.min_depth), 0.0)
        p_scale, p_shift = scale, shift
        if config.scale_shift:
            # per-pixel step projected onto the global scale and shift directions
            gm, xm = g[mask], x[mask]
            p_scale = scale - step * hw * float(np.sum(gm * xm) / np.sum(xm * xm))
            p_shift = shift - step * hw * float(np.mean(gm))
        n_total, n_parts, n_g = objective(prop, p_scale, p_shift)
        if not np.isfinite(n_total):
            log.warning("non-finite refinement objective at step %d; keeping initial depth", k)
            return EnhanceResult(init, steps=k, aborted=True, history=result.history)
        if n_total <= total:
            x, total, parts, g = prop, n_total, n_parts, n_g
            scale, shift = p_scale, p_shift
            result.accepted += 1
            result.history.append({"step": k, "total": total, **parts})
            if stopper.update(parts["smooth"]):
                result.stopped_early = True
                break
        else:
            step *= 0.5
    out = np.where(mask, np.maximum(scale * x + shift, config.min_depth), 0.0)
    result.depth = DepthMap(out)
    return result


@dataclass
class DepthPool:
    """Latest supervision depth per training view plus the iteration of its last update."""

    entries: dict
    last_update: dict = field(default_factory=dict)

    def __post_init__(self):
        for key in self.entries:
            self.last_update.setdefault(key, -1)

    def __getitem__(self, key) -> DepthMap:
        return self.entries[key]

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self):
        return list(self.entries)

    def replace(self, key, depth: DepthMap, iteration: int):
        if key not in self.entries:
            raise KeyError(key)
        self.entries[key] = depth
        self.last_update[key] = iteration


def select_neighbors(key, keys: Sequence, timestamps: dict, camera_ids: dict, count: int = 6) -> list:
    """The ``count`` temporally closest views of the same camera, excluding ``key``."""
    t0 = timestamps[key]
    same = [k for k in keys if k != key and camera_ids[k] == camera_ids[key]]
    same.sort(key=lambda k: (abs(timestamps[k] - t0), timestamps[k]))
    return same[:count]


@dataclass
class PoolUpdateContext:
    """What the pool updater needs from the trainer at one iteration.

    ``iteration`` counts trainer iterations since depth supervision started
    (first such iteration is 1); ``global_iteration`` is recorded in the pool.
    """

    iteration: int
    global_iteration: int
    current_view: Hashable
    render_depth: Callable[[Hashable], DepthMap]
    image: Callable[[Hashable], Image]
    camera: Callable[[Hashable], Camera]
    neighbors: Callable[[Hashable], list]
    config: EnhancerConfig
    enhancer: DepthEnhancer = None


def _enhance_view(pool: DepthPool, key, ctx: PoolUpdateContext, rendered: DepthMap) -> EnhanceResult:
    conf = confidence(rendered, pool[key], ctx.config.lambda_c)
    nbrs = [(pool[j], ctx.camera(j)) for j in ctx.neighbors(key)]
    enh = ctx.enhancer or enhance
    return enh(rendered, rendered, conf, ctx.image(key), nbrs, ctx.camera(key), ctx.config)


def update_pool(pool: DepthPool, strategy: str, ctx: PoolUpdateContext) -> list:
    """Run the configured update strategy at one trainer iteration.

    real_time: every N iterations the current view is re-rendered, enhanced and
    replaced. periodic: every N·V iterations all V views are enhanced from the same
    Gaussian state and replaced together. Returns the updated view keys.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown pool update strategy {strategy!r}")
    n = ctx.config.update_period
    if strategy == REAL_TIME:
        if ctx.iteration % n:
            return []
        key = ctx.current_view
        res = _enhance_view(pool, key, ctx, ctx.render_depth(key))
        pool.replace(key, res.depth, ctx.global_iteration)
        return [key]
    period = n * len(pool)
    if ctx.iteration % period:
        return []
    refreshed = {key: _enhance_view(pool, key, ctx, ctx.render_depth(key)).depth for key in pool.keys()}
    for key, depth in refreshed.items():
        pool.replace(key, depth, ctx.global_iteration)
    return list(refreshed)
