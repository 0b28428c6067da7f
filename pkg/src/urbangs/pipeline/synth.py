"""Analytic ray-cast street scenes with ground truth and a corrupted depth estimate.

A scene is a finite ground plane at z = ground_height (the road), axis-aligned
boxes, and optionally one rigid box that moves linearly. Cameras ride an ego
path looking along +y. Images are flat-shaded with procedural checker
albedo. The "estimated" depth emulates an imperfect metric depth network:
GT × smooth per-region scale drift, plus Gaussian noise, minus dropout patches.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from ..core import Camera, DepthMap, Image, MaskSet, RigidTransform
from .dataset import Dataset, ViewRecord

LIGHT = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])


@dataclass
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    color: tuple[float, float, float] = (0.6, 0.5, 0.4)
    checker: float = 1.0


@dataclass
class Mover:
    size: tuple[float, float, float] = (1.8, 4.0, 1.5)
    start: tuple[float, float, float] = (2.5, 10.0, 0.75)
    velocity: tuple[float, float, float] = (0.0, 0.6, 0.0)
    color: tuple[float, float, float] = (0.75, 0.15, 0.12)
    checker: float = 0.5


@dataclass
class NoiseModel:
    drift_sigma: float = 0.12
    drift_cells: tuple[int, int] = (4, 3)
    additive_sigma: float = 0.05
    dropout_patches: int = 2
    dropout_size: int = 10


@dataclass
class CameraRig:
    name: str
    yaw_deg: float = 0.0
    pitch_deg: float = 0.0
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class SceneSpec:
    width: int = 96
    height: int = 64
    focal: float = 64.0
    frames: int = 8
    frame_dt: float = 0.1
    ego_start: tuple[float, float, float] = (0.0, 0.0, 1.6)
    ego_step: tuple[float, float, float] = (0.0, 1.0, 0.0)
    cameras: list[CameraRig] = field(default_factory=lambda: [
        CameraRig("front_left", 30.0, -12.0), CameraRig("front", 0.0, -12.0),
        CameraRig("front_right", -30.0, -12.0)])
    ground_height: float | None = 0.0
    ground_extent: tuple[float, float, float, float] = (-9.0, 9.0, -5.0, 40.0)
    ground_color: tuple[float, float, float] = (0.42, 0.42, 0.45)
    ground_checker: float = 2.0
    boxes: list[Box] = field(default_factory=list)
    mover: Mover | None = None
    sky_color: tuple[float, float, float] = (0.55, 0.7, 0.9)
    texture_amplitude: float = 0.18
    supersample: int = 3
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        if self.width < 2 or self.height < 2 or self.focal <= 0 or self.frames < 1:
            raise ValueError("invalid image size, focal length or frame count")
        if not self.cameras:
            raise ValueError("need at least one camera")
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")
        for b in self.boxes:
            if min(b.size) <= 0:
                raise ValueError("box sizes must be positive")
        n = self.noise
        if n.drift_sigma < 0 or n.additive_sigma < 0 or n.dropout_patches < 0 or n.dropout_size < 0:
            raise ValueError("noise amplitudes must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return _build(cls, d)


def _build(cls, d):
    kinds = {
        "cameras": lambda v: [_build(CameraRig, c) for c in v],
        "boxes": lambda v: [_build(Box, b) for b in v],
        "mover": lambda v: None if v is None else _build(Mover, v),
        "noise": lambda v: _build(NoiseModel, v),
    }
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        if k in kinds and cls is SceneSpec:
            v = kinds[k](v)
        elif isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    return cls(**kw)


def default_street_scene(**overrides) -> SceneSpec:
    """Road corridor lined with building blocks, a parked car and one moving car."""
    boxes = [
        Box((-7.0, 8.0, 3.0), (3.0, 8.0, 6.0), (0.72, 0.62, 0.50), 1.5),
        Box((-7.5, 20.0, 4.0), (3.0, 10.0, 8.0), (0.45, 0.52, 0.62), 2.0),
        Box((-7.0, 32.0, 2.5), (3.0, 9.0, 5.0), (0.62, 0.44, 0.40), 1.5),
        Box((7.0, 6.0, 2.5), (3.0, 7.0, 5.0), (0.50, 0.60, 0.48), 1.5),
        Box((7.5, 17.0, 3.5), (3.0, 9.0, 7.0), (0.70, 0.68, 0.60), 2.0),
        Box((7.0, 30.0, 3.0), (3.0, 10.0, 6.0), (0.40, 0.44, 0.55), 1.5),
        Box((-3.5, 14.0, 0.7), (1.8, 4.2, 1.4), (0.20, 0.35, 0.70), 0.5),
    ]
    spec = dict(boxes=boxes, mover=Mover())
    spec.update(overrides)
    return SceneSpec(**spec)


def camera_rotation(yaw_deg: float, pitch_deg: float = 0.0) -> np.ndarray:
    """Camera-to-world rotation for a camera looking along +y, yawed left by yaw_deg."""
    base = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
    a = np.radians(yaw_deg)
    rz = np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])
    p = np.radians(pitch_deg)
    # pitch about the camera x axis; negative looks down
    rx = np.array([[1.0, 0.0, 0.0], [0.0, np.cos(p), -np.sin(p)], [0.0, np.sin(p), np.cos(p)]])
    return rz @ base @ rx


def _checker(u, v, period, amp):
    if period <= 0 or amp == 0:
        return np.ones_like(u)
    s = (np.floor(u / period) + np.floor(v / period)) % 2
    return 1.0 + amp * (2 * s - 1)


def _ray_box(o, d, center, size):
    lo = np.asarray(center) - 0.5 * np.asarray(size)
    hi = np.asarray(center) + 0.5 * np.asarray(size)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    t1 = np.nan_to_num(t1, nan=-np.inf)
    t2 = np.nan_to_num(t2, nan=np.inf)
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tnear = tmin.max(axis=1)
    tfar = tmax.min(axis=1)
    axis = tmin.argmax(axis=1)
    hit = (tnear <= tfar) & (tnear > 1e-6)
    return np.where(hit, tnear, np.inf), axis


def _shade(base, normal, albedo):
    lam = np.clip(normal @ LIGHT, 0.0, 1.0)
    return np.clip(np.asarray(base)[None, :] * (0.55 + 0.45 * lam)[:, None] * albedo[:, None], 0.0, 1.0)


def cast_rays(spec: SceneSpec, origin, dirs, mover_center=None):
    """Intersect rays (P,3) with the scene.

    Returns (t, rgb, kind) where t is the ray parameter (inf on a miss) and kind is
    0 sky, 1 ground, 2 static box, 3 mover.
    """
    P = dirs.shape[0]
    t = np.full(P, np.inf)
    rgb = np.tile(np.asarray(spec.sky_color, dtype=np.float64), (P, 1))
    kind = np.zeros(P, dtype=np.int8)
    amp = spec.texture_amplitude

    if spec.ground_height is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = (spec.ground_height - origin[2]) / dirs[:, 2]
        tg = np.where(np.isfinite(tg) & (tg > 1e-6), tg, np.inf)
        hp = origin + dirs * np.where(np.isfinite(tg), tg, 0.0)[:, None]
        x0, x1, y0, y1 = spec.ground_extent
        inside = (hp[:, 0] >= x0) & (hp[:, 0] <= x1) & (hp[:, 1] >= y0) & (hp[:, 1] <= y1)
        tg = np.where(inside, tg, np.inf)
        m = tg < t
        alb = _checker(hp[:, 0], hp[:, 1], spec.ground_checker, amp)
        lane = (np.abs(hp[:, 0]) < 0.12) & (np.floor(hp[:, 1] / 1.5) % 2 == 0)
        alb = np.where(lane, 2.0, alb)
        col = _shade(spec.ground_color, np.tile([0.0, 0.0, 1.0], (P, 1)), alb)
        t = np.where(m, tg, t)
        rgb[m] = col[m]
        kind[m] = 1

    objects = [(b.center, b.size, b.color, b.checker, 2) for b in spec.boxes]
    if spec.mover is not None and mover_center is not None:
        mv = spec.mover
        objects.append((mover_center, mv.size, mv.color, mv.checker, 3))
    for center, size, color, period, k in objects:
        tb, axis = _ray_box(origin, dirs, center, size)
        m = tb < t
        if not m.any():
            continue
        hp = origin + dirs[m] * tb[m, None]
        ax = axis[m]
        normal = np.zeros((m.sum(), 3))
        normal[np.arange(ax.size), ax] = -np.sign(dirs[m][np.arange(ax.size), ax])
        # face-local checker coordinates come from the two in-plane world axes
        u = np.where(ax == 0, hp[:, 1], hp[:, 0])
        v = np.where(ax == 2, hp[:, 1], hp[:, 2])
        alb = _checker(u, v, period, amp)
        t[m] = tb[m]
        rgb[m] = _shade(color, normal, alb)
        kind[m] = k
    return t, rgb, kind


def _drift_field(rng, h, w, cells, sigma):
    cx, cy = cells
    grid = rng.normal(0.0, 1.0, size=(cy + 1, cx + 1))
    rr = np.linspace(0, cy, h)[:, None] * np.ones((1, w))
    cc = np.ones((h, 1)) * np.linspace(0, cx, w)[None, :]
    return sigma * map_coordinates(grid, [rr, cc], order=1)


def corrupt_depth(gt: np.ndarray, noise: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    h, w = gt.shape
    valid = gt > 0
    est = gt.copy()
    if noise.drift_sigma > 0:
        est = est * (1.0 + _drift_field(rng, h, w, noise.drift_cells, noise.drift_sigma))
    if noise.additive_sigma > 0:
        est = est + rng.normal(0.0, noise.additive_sigma, size=gt.shape)
    for _ in range(noise.dropout_patches if noise.dropout_size > 0 else 0):
        r0 = int(rng.integers(0, max(1, h - noise.dropout_size)))
        c0 = int(rng.integers(0, max(1, w - noise.dropout_size)))
        est[r0:r0 + noise.dropout_size, c0:c0 + noise.dropout_size] = 0.0
    return np.where(valid & (est > 0), est, 0.0)


def mover_track(spec: SceneSpec) -> list[RigidTransform]:
    mv = spec.mover
    return [RigidTransform(np.eye(3), np.asarray(mv.start) + f * np.asarray(mv.velocity)) for f in range(spec.frames)]


def synth_scene(spec: SceneSpec, seed: int = 0) -> Dataset:
    """Render every (frame, camera) of the scene; deterministic given the seed."""
    rng = np.random.default_rng(seed)
    W, H, n = spec.width, spec.height, spec.supersample
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    track = mover_track(spec) if spec.mover is not None else None
    # sub-pixel offsets for anti-aliased color; depth uses the center ray
    offs = (np.arange(n) + 0.5) / n - 0.5
    cols, rows = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    views = []
    for f in range(spec.frames):
        ego = np.asarray(spec.ego_start) + f * np.asarray(spec.ego_step)
        mover_center = track[f].translation if track is not None else None
        for rig in spec.cameras:
            R = camera_rotation(rig.yaw_deg, rig.pitch_deg)
            origin = ego + np.asarray(rig.offset)
            cam = Camera(spec.focal, spec.focal, cx, cy, W, H, RigidTransform(R, origin))

            def rays(u, v):
                d_cam = np.stack([(u - cx) / spec.focal, (v - cy) / spec.focal, np.ones_like(u)], axis=-1)
                return d_cam.reshape(-1, 3) @ R.T

            t, _, kind = cast_rays(spec, origin, rays(cols, rows), mover_center)
            rgb = np.zeros((H * W, 3))
            for du in offs:
                for dv in offs:
                    rgb += cast_rays(spec, origin, rays(cols + du, rows + dv), mover_center)[1]
            rgb /= n * n
            # unit camera-z ray direction: the ray parameter is the planar depth
            gt = np.where(np.isfinite(t), t, 0.0).reshape(H, W)
            kind = kind.reshape(H, W)
            est = corrupt_depth(gt, spec.noise, rng)
            masks = MaskSet(kind == 0, kind == 1)
            views.append(ViewRecord(
                frame=f, camera_id=rig.name, timestamp=f * spec.frame_dt, camera=cam,
                image=Image(rgb.reshape(H, W, 3)), depth=DepthMap(est), masks=masks,
                gt_depth=DepthMap(gt), dynamic=kind == 3))
    tracks = {"mover": track} if track is not None else {}
    return Dataset(views, spec.frames, tracks)


def spec_to_dict(spec) -> dict:
    out = {}
    for f in fields(spec):
        v = getattr(spec, f.name)
        if is_dataclass(v):
            v = spec_to_dict(v)
        elif isinstance(v, list):
            v = [spec_to_dict(x) if is_dataclass(x) else x for x in v]
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out
