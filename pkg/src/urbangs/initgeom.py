"""Dense initialization from per-view metric depth and progressive opacity pruning."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import Camera, DepthMap, Image, MaskSet, pixel_grid, unproject
from .splat.gaussians import GaussianSet, logit, sigmoid

log = logging.getLogger(__name__)

RESET_OPACITY_LOGIT = float(logit(0.1))
MIN_INIT_SCALE = 1e-3
MAX_INIT_SCALE = 1.0


class EmptyPruneError(RuntimeError):
    """Pruning removed every Gaussian."""


@dataclass(frozen=True)
class PruneConfig:
    rounds: int = 3
    iters_per_round: int = 300
    low_res: tuple[int, int] = (60, 40)
    # "percentile" keeps a fixed fraction per round; "absolute" applies opacity >= tau
    mode: str = "percentile"
    keep_fraction: float | None = None
    opacity_threshold: float = 0.05
    reset_opacity_logit: float = RESET_OPACITY_LOGIT
    target_count: int = 4000

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.target_count < 1:
            raise ValueError("target_count must be >= 1")
        if self.keep_fraction is not None and not 0 < self.keep_fraction <= 1:
            raise ValueError("keep_fraction must lie in (0, 1]")
        if not 0 < self.opacity_threshold < 1:
            raise ValueError("opacity_threshold must lie in (0, 1)")
        if self.mode not in ("percentile", "absolute"):
            raise ValueError(f"unknown prune mode {self.mode!r}")
        object.__setattr__(self, "low_res", tuple(int(v) for v in self.low_res))

    def fraction_for(self, initial_count: int) -> float:
        if self.keep_fraction is not None:
            return self.keep_fraction
        if initial_count <= self.target_count:
            return 1.0
        return (self.target_count / initial_count) ** (1.0 / self.rounds)

    @classmethod
    def from_dict(cls, d: dict) -> "PruneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown PruneConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray
    road: np.ndarray
    # index of the view each point came from
    view: np.ndarray

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, index) -> "PointCloud":
        return PointCloud(self.points[index], self.colors[index], self.road[index], self.view[index])

    @staticmethod
    def concat(clouds: Sequence["PointCloud"]) -> "PointCloud":
        return PointCloud(np.concatenate([c.points for c in clouds]).reshape(-1, 3),
                          np.concatenate([c.colors for c in clouds]).reshape(-1, 3),
                          np.concatenate([c.road for c in clouds]).astype(bool),
                          np.concatenate([c.view for c in clouds]).astype(np.int64))


def build_point_cloud(views: Sequence[tuple[Camera, DepthMap, Image, MaskSet]], stride: int = 1) -> PointCloud:
    """Unproject every valid non-sky pixel (on a stride grid) of every view."""
    if not views:
        raise ValueError("need at least one view")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    clouds = []
    for vi, (cam, depth, image, masks) in enumerate(views):
        d = np.asarray(depth.values if isinstance(depth, DepthMap) else depth, dtype=np.float64)
        img = image.values if isinstance(image, Image) else np.asarray(image, dtype=np.float64)
        if d.shape != (cam.height, cam.width) or img.shape[:2] != d.shape or masks.sky.shape != d.shape:
            raise ValueError(f"view {vi}: image, depth, mask and camera sizes disagree")
        take = np.zeros(d.shape, dtype=bool)
        take[::stride, ::stride] = True
        take &= np.isfinite(d) & (d > 0) & ~masks.sky
        pix = pixel_grid(cam.width, cam.height)[take]
        pts = unproject(cam, pix, d[take]) if pix.size else np.zeros((0, 3))
        rgb = img[take] if img.ndim == 3 else np.repeat(img[take][:, None], 3, axis=1)
        clouds.append(PointCloud(pts, rgb, masks.road[take], np.full(len(pts), vi)))
    return PointCloud.concat(clouds)


def knn_scales(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance to the k nearest other points, clamped to [1e-3, 1] m."""
    n = points.shape[0]
    if n <= 1:
        return np.full(n, MIN_INIT_SCALE)
    kk = min(k, n - 1)
    dist, _ = cKDTree(points).query(points, k=kk + 1)
    return np.clip(dist[:, 1:].mean(axis=1), MIN_INIT_SCALE, MAX_INIT_SCALE)


def init_gaussians(points, neighbor_k: int = 3, colors=None) -> GaussianSet:
    """Isotropic Gaussians on the points, sized by nearest-neighbor spacing, opacity 0.1."""
    if isinstance(points, PointCloud):
        colors = points.colors if colors is None else colors
        points = points.points
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("need at least one point")
    colors = np.full((pts.shape[0], 3), 0.5) if colors is None else np.clip(colors, 0.0, 1.0)
    return GaussianSet.from_points(pts, colors, knn_scales(pts, neighbor_k), 0.1)


def prune_round(gaussians: GaussianSet, tau: float | None = None, keep_fraction: float | None = None,
                keep_count: int | None = None, reset_opacity_logit: float = RESET_OPACITY_LOGIT):
    """Keep Gaussians by opacity and reset the survivors' opacity.

    Exactly one selector applies: ``tau`` keeps opacity >= tau; ``keep_fraction`` or
    ``keep_count`` keeps the top-opacity Gaussians (ties broken by index).
    Returns (pruned set, kept indices into the input).
    """
    if sum(x is not None for x in (tau, keep_fraction, keep_count)) != 1:
        raise ValueError("give exactly one of tau, keep_fraction, keep_count")
    o = gaussians.opacities
    n = len(gaussians)
    if tau is not None:
        if not 0 < tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        kept = np.nonzero(o >= tau)[0]
    else:
        if keep_count is None:
            keep_count = int(math.floor(n * keep_fraction + 1e-9))
        keep_count = max(0, min(n, keep_count))
        kept = np.sort(np.argsort(-o, kind="stable")[:keep_count])
    out = gaussians.subset(kept)
    out.opacity_logits[:] = reset_opacity_logit
    return out, kept


def percentile_schedule(initial_count: int, config: PruneConfig) -> list[int]:
    """Survivor counts after each percentile-mode round, starting with the initial count."""
    frac = config.fraction_for(initial_count)
    counts = [initial_count]
    for r in range(config.rounds):
        # rounding up keeps every intermediate count >= target, so the last round lands on it
        n_keep = int(math.ceil(counts[-1] * frac - 1e-9))
        if r == config.rounds - 1:
            n_keep = min(counts[-1] if config.keep_fraction is None else n_keep, config.target_count)
        counts.append(max(n_keep, 1) if counts[-1] else 0)
    return counts


@dataclass
class PruneResult:
    gaussians: GaussianSet
    # indices into the initial set, one per survivor
    kept: np.ndarray
    counts: list[int] = field(default_factory=list)
    threshold_per_round: list[float] = field(default_factory=list)


def progressive_prune(initial: GaussianSet, config: PruneConfig,
                      fit: Callable[[GaussianSet, int], GaussianSet]) -> PruneResult:
    """Alternate short fits with opacity pruning and opacity resets.

    ``fit(gaussians, iters)`` is the trainer handle: it optimizes a copy of the
    set for ``iters`` steps at the pruning resolution and returns it. Attributes
    other than opacity are copied unchanged through each prune.
    """
    g = initial
    kept = np.arange(len(initial))
    counts = [len(initial)]
    thresholds = []
    schedule = percentile_schedule(len(initial), config)
    for r in range(config.rounds):
        g = fit(g, config.iters_per_round)
        last = r == config.rounds - 1
        if config.mode == "absolute":
            g_new, idx = prune_round(g, tau=config.opacity_threshold, reset_opacity_logit=config.reset_opacity_logit)
            thresholds.append(config.opacity_threshold)
            if last and len(g_new) > config.target_count:
                g_new, idx2 = prune_round(g.subset(idx), keep_count=config.target_count,
                                          reset_opacity_logit=config.reset_opacity_logit)
                idx = idx[idx2]
        else:
            n_keep = schedule[r + 1]
            o = np.sort(g.opacities)[::-1]
            thresholds.append(float(o[n_keep - 1]) if n_keep else 1.0)
            g_new, idx = prune_round(g, keep_count=n_keep, reset_opacity_logit=config.reset_opacity_logit)
        kept = kept[idx]
        g = g_new
        counts.append(len(g))
        log.info("prune round %d: %d -> %d Gaussians", r + 1, counts[-2], counts[-1])
        if len(g) == 0:
            raise EmptyPruneError(f"pruning round {r + 1} removed every Gaussian")
    return PruneResult(g, kept, counts, thresholds)


__all__ = [
    "EmptyPruneError", "PointCloud", "PruneConfig", "PruneResult", "build_point_cloud", "init_gaussians",
    "knn_scales", "percentile_schedule", "progressive_prune", "prune_round", "sigmoid",
]
