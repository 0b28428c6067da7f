"""Scene-graph initialization, the joint training loop, evaluation and checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from ..core import DepthMap, Image, RigidTransform
from ..enhancer import (PERIODIC, REAL_TIME, STRATEGIES, DepthPool, EnhancerConfig, PoolUpdateContext,
                        select_neighbors, update_pool)
from ..initgeom import (PointCloud, PruneConfig, build_point_cloud, init_gaussians, percentile_schedule,
                        progressive_prune)
from ..metrics import EmptyEvaluation, depth_metrics, photometric_loss, psnr, ssim
from ..scenegraph import (DynamicNode, GroundPrior, SceneGraph, compose, fit_ground_prior, road_loss,
                          scale_regularizer, split_grads)
from ..splat.gaussians import PARAM_NAMES, GaussianGrads, GaussianSet, normalize_quats
from ..splat.render import backward, render, render_with_context
from .dataset import Dataset, ViewRecord, resize_view

log = logging.getLogger(__name__)

INIT_PROGRESSIVE = "progressive"
INIT_RANDOM = "random"
LOSS_TERMS = ("l1", "ssim", "road", "depth", "opacity", "reg")


class NumericalError(FloatingPointError):
    def __init__(self, term: str, iteration: int):
        super().__init__(f"non-finite {term} loss at iteration {iteration}")
        self.term = term
        self.iteration = iteration


def _from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class LearningRates:
    centers: float = 0.004
    log_scales: float = 0.01
    rotations: float = 0.004
    opacity_logits: float = 0.05
    colors: float = 0.01
    background: float = 0.01
    # road-node centers get their own, larger rate
    road_centers: float = 0.004

    def __post_init__(self):
        if any(v < 0 for v in asdict(self).values()):
            raise ValueError("learning rates must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    lambda_r: float = 0.2
    lambda_road: float = 0.1
    lambda_depth: float = 0.5
    lambda_opacity: float = 0.05
    lambda_reg: float = 0.01
    total_iters: int = 2000
    rgb_only_iters: int = 1200
    seed: int = 0
    # (width, height) used for training; None keeps the dataset resolution
    resolution: tuple[int, int] | None = None
    holdout_every: int = 4
    strategy: str = REAL_TIME
    use_enhancer: bool = True
    use_road_node: bool = True
    init: str = INIT_PROGRESSIVE
    point_stride: int = 2
    dynamic_count: int = 300
    lambda_normal: float = 10.0
    lambda_flat: float = 1.0
    max_scale_ratio: float = 10.0
    eval_every: int = 0
    # depth-phase iterations to wait before the first pool update
    enhancer_delay: int = 0
    learning_rates: LearningRates = field(default_factory=LearningRates)

    def __post_init__(self):
        if not 0 <= self.lambda_r <= 1:
            raise ValueError("lambda_r must lie in [0, 1]")
        for name in ("lambda_road", "lambda_depth", "lambda_opacity", "lambda_reg", "lambda_normal", "lambda_flat"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.total_iters < 0 or self.rgb_only_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.rgb_only_iters > self.total_iters:
            raise ValueError("rgb_only_iters must not exceed total_iters")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.init not in (INIT_PROGRESSIVE, INIT_RANDOM):
            raise ValueError(f"unknown init {self.init!r}")
        if self.point_stride < 1 or self.dynamic_count < 0 or self.eval_every < 0 or self.enhancer_delay < 0:
            raise ValueError("point_stride must be >= 1; dynamic_count, eval_every, enhancer_delay >= 0")
        if self.resolution is not None:
            object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))
        if isinstance(self.learning_rates, dict):
            object.__setattr__(self, "learning_rates", _from_dict(LearningRates, self.learning_rates))

    @property
    def depth_phase(self) -> bool:
        return self.total_iters > self.rgb_only_iters

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_dict(cls, d)

    def as_dict(self) -> dict:
        d = asdict(self)
        if d["resolution"] is not None:
            d["resolution"] = list(d["resolution"])
        return d


class Adam:
    """Adam over named arrays with one learning rate per parameter group."""

    def __init__(self, lrs: dict, betas=(0.9, 0.999), eps=1e-15):
        self.lrs = dict(lrs)
        self.b1, self.b2 = betas
        self.eps = eps
        self.state: dict = {}

    def step(self, key, group: str, param: np.ndarray, grad: np.ndarray) -> None:
        lr = self.lrs[group]
        if lr == 0 or param.size == 0:
            return
        m, v, t = self.state.get(key, (np.zeros_like(param), np.zeros_like(param), 0))
        t += 1
        m = self.b1 * m + (1 - self.b1) * grad
        v = self.b2 * v + (1 - self.b2) * grad * grad
        mhat = m / (1 - self.b1 ** t)
        vhat = v / (1 - self.b2 ** t)
        param -= lr * mhat / (np.sqrt(vhat) + self.eps)
        self.state[key] = (m, v, t)


def _step_set(opt: Adam, name: str, g: GaussianSet, grads: GaussianGrads, groups: dict | None = None) -> None:
    groups = groups or {}
    for p in PARAM_NAMES:
        opt.step((name, p), groups.get(p, p), getattr(g, p), getattr(grads, p))
    if len(g):
        g.rotations[:] = normalize_quats(g.rotations)[0]
    np.clip(g.colors, 0.0, 1.0, out=g.colors)


@dataclass
class TrainedModel:
    graph: SceneGraph
    background: np.ndarray
    prior: GroundPrior | None = None


def composite(color: np.ndarray, alpha: np.ndarray, background) -> np.ndarray:
    """Render over a constant background color: C + (1 − A)·bg."""
    return color + (1.0 - alpha)[..., None] * np.asarray(background, dtype=np.float64)


def render_model(model, view_camera, frame: int):
    """(composited image, render output) of a model or bare graph at one frame."""
    graph, bg = (model.graph, model.background) if isinstance(model, TrainedModel) else (model, np.zeros(3))
    out = render(compose(graph, frame).gaussians, view_camera)
    return np.clip(composite(out.color.values, out.alpha, bg), 0.0, 1.0), out


# ---------------------------------------------------------------- photometric fitting

def _photometric_grads(pred, gt, alpha, bg, nonsky, cfg: TrainConfig, exclude=None):
    """Photometric and opacity terms with their gradients on (color, alpha, background)."""
    if exclude is not None and exclude.any():
        pred = np.where(exclude[..., None], gt, pred)
    total, l1, l_ssim, g_img = photometric_loss(pred, gt, cfg.lambda_r)
    if exclude is not None and exclude.any():
        g_img = np.where(exclude[..., None], 0.0, g_img)
    hw = alpha.size
    op_diff = alpha - nonsky
    l_op = float(np.abs(op_diff).sum() / hw)
    g_alpha = -np.sum(g_img * bg, axis=2) + cfg.lambda_opacity * np.sign(op_diff) / hw
    g_bg = np.sum(g_img * (1.0 - alpha)[..., None], axis=(0, 1))
    return total, l1, l_ssim, l_op, g_img, g_alpha, g_bg


def make_fitter(views: Sequence[ViewRecord], cfg: TrainConfig, rng: np.random.Generator,
                background: np.ndarray | None = None):
    """Photometric fit handle ``fit(gaussians, iters)`` for static geometry.

    Only the photometric and opacity terms apply; dynamic pixels are excluded
    from the loss. The background color is learned
    and persists across calls through the returned closure.
    """
    bg = np.full(3, 0.5) if background is None else background
    lrs = asdict(cfg.learning_rates)

    def fit(g: GaussianSet, iters: int) -> GaussianSet:
        g = g.copy()
        opt = Adam(lrs)
        for _ in range(iters):
            v = views[int(rng.integers(len(views)))]
            out, ctx = render_with_context(g, v.camera)
            pred = composite(out.color.values, out.alpha, bg)
            nonsky = (~v.masks.sky).astype(np.float64)
            _, _, _, _, g_img, g_alpha, g_bg = _photometric_grads(pred, v.image.values, out.alpha, bg, nonsky,
                                                                   cfg, v.dynamic)
            grads = backward(ctx, d_color=g_img, d_alpha=g_alpha)
            _step_set(opt, "fit", g, grads)
            opt.step("bg", "background", bg, g_bg)
            np.clip(bg, 0.0, 1.0, out=bg)
        return g

    fit.background = bg
    return fit


# ---------------------------------------------------------------- initialization

@dataclass
class InitReport:
    initial_count: int
    final_count: int
    counts: list[int]
    dynamic_count: int
    ground_height: float | None
    mode: str

    def as_dict(self) -> dict:
        return asdict(self)


def _train_views(dataset: Dataset, cfg: TrainConfig) -> tuple[list[ViewRecord], list[ViewRecord]]:
    train, held = dataset.split(cfg.holdout_every)
    if cfg.resolution is not None:
        w, h = cfg.resolution
        train = [resize_view(v, w, h) for v in train]
        held = [resize_view(v, w, h) for v in held]
    return train, held


def _dynamic_points(views: Sequence[ViewRecord], track: list[RigidTransform], stride: int):
    clouds = []
    for i, v in enumerate(views):
        if v.dynamic is None or not v.dynamic.any():
            continue
        d = np.where(v.dynamic, v.depth.values, 0.0)
        pc = build_point_cloud([(v.camera, DepthMap(d), v.image, v.masks)], stride)
        pc.points = track[v.frame].inverse().apply(pc.points) if len(pc) else pc.points
        pc.view = np.full(len(pc), i)
        clouds.append(pc)
    return PointCloud.concat(clouds) if clouds else None


def initialize_graph(dataset: Dataset, cfg: TrainConfig, prune: PruneConfig | None = None,
                     views: Sequence[ViewRecord] | None = None) -> tuple[TrainedModel, InitReport]:
    """Dense point cloud -> (pruned or randomly subsampled) Gaussians -> scene graph.

    Dynamic pixels with a known rigid track seed a dynamic node in the object
    frame; everything else feeds the static and road nodes.
    """
    prune = prune or PruneConfig()
    rng = np.random.default_rng(cfg.seed)
    if views is None:
        views = _train_views(dataset, cfg)[0]
    track = None
    if len(dataset.tracks) == 1:
        name, track = next(iter(dataset.tracks.items()))
    static_in = []
    for v in views:
        d = v.depth.values
        if track is not None and v.dynamic is not None:
            d = np.where(v.dynamic, 0.0, d)
        static_in.append((v.camera, DepthMap(d), v.image, v.masks))
    cloud = build_point_cloud(static_in, cfg.point_stride)
    if len(cloud) == 0:
        raise ValueError("no valid depth pixels to initialize from")
    prior = fit_ground_prior(cloud.points[cloud.road]) if cloud.road.sum() >= 3 else None

    if cfg.init == INIT_PROGRESSIVE:
        low = [resize_view(v, *prune.low_res) for v in views]
        fit = make_fitter(low, cfg, rng)
        result = progressive_prune(init_gaussians(cloud), prune, fit)
        g, kept, counts = result.gaussians, result.kept, result.counts
        background = fit.background.copy()
    else:
        n = percentile_schedule(len(cloud), prune)[-1] if prune.mode == "percentile" else prune.target_count
        kept = np.sort(rng.choice(len(cloud), size=min(n, len(cloud)), replace=False))
        g = init_gaussians(cloud.subset(kept))
        counts = [len(cloud), len(g)]
        background = np.full(3, 0.5)
    road = cloud.road[kept]
    if cfg.use_road_node:
        static_node, road_node = g.subset(np.nonzero(~road)[0]), g.subset(np.nonzero(road)[0])
    else:
        static_node, road_node = g, GaussianSet.empty()

    dyn_nodes = []
    if track is not None:
        pts = _dynamic_points(views, track, 1)
        if pts is not None and len(pts) and cfg.dynamic_count > 0:
            take = np.sort(rng.choice(len(pts), size=min(cfg.dynamic_count, len(pts)), replace=False))
            dyn_nodes.append(DynamicNode(init_gaussians(pts.subset(take)), list(track), name))
    graph = SceneGraph(static_node, road_node, dyn_nodes, dataset.frame_count)
    report = InitReport(len(cloud), len(g), [int(c) for c in counts], sum(len(d.gaussians) for d in dyn_nodes),
                        None if prior is None else prior.mean_height, cfg.init)
    return TrainedModel(graph, background, prior), report


def without_road_node(model: TrainedModel) -> TrainedModel:
    """Copy of the model with road Gaussians folded into the static node."""
    g = model.graph.copy()
    merged = GaussianSet.concat([g.static_node, g.road_node])
    graph = SceneGraph(merged, GaussianSet.empty(), g.dynamic_nodes, g.frame_count)
    return TrainedModel(graph, model.background.copy(), model.prior)


def copy_model(model: TrainedModel) -> TrainedModel:
    return TrainedModel(model.graph.copy(), model.background.copy(), model.prior)


# ---------------------------------------------------------------- training

def _eval_snapshot(model: TrainedModel, views: Sequence[ViewRecord]) -> dict:
    rep = evaluate(model, views)
    agg = rep["aggregate"]
    return {"psnr": agg["psnr"], "ssim": agg["ssim"], "abs_rel": agg["depth"].get("abs_rel")}


def train(dataset: Dataset, model: TrainedModel, cfg: TrainConfig, enh: EnhancerConfig | None = None,
          views: Sequence[ViewRecord] | None = None, heldout: Sequence[ViewRecord] | None = None):
    """Optimize all node parameters; returns (model, log records).

    The model is updated in place. One record per iteration lists every loss
    term, the weighted total and the pool-update events; optional held-out
    snapshots are separate records with ``"event": "eval"``.
    """
    enh = enh or EnhancerConfig()
    if views is None or heldout is None:
        tv, hv = _train_views(dataset, cfg)
        views = tv if views is None else views
        heldout = hv if heldout is None else heldout
    if not views:
        raise ValueError("no training views")
    graph, bg = model.graph, model.background
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(asdict(cfg.learning_rates))
    by_key = {v.key: v for v in views}
    pool = DepthPool({v.key: v.depth for v in views})
    timestamps = {v.key: v.timestamp for v in views}
    cam_ids = {v.key: v.camera_id for v in views}
    keys = list(by_key)
    order: list[int] = []
    records: list[dict] = []
    names = graph.node_names()

    def render_depth(key):
        v = by_key[key]
        return render(compose(graph, v.frame).gaussians, v.camera).depth

    for it in range(cfg.total_iters):
        if not order:
            order = list(rng.permutation(len(views))[::-1])
        v = views[order.pop()]
        comp = compose(graph, v.frame)
        out, ctx = render_with_context(comp.gaussians, v.camera)
        pred = composite(out.color.values, out.alpha, bg)
        nonsky = (~v.masks.sky).astype(np.float64)
        photo, l1, l_ssim, l_op, g_img, g_alpha, g_bg = _photometric_grads(pred, v.image.values, out.alpha, bg,
                                                                           nonsky, cfg)
        depth_on = it >= cfg.rgb_only_iters
        terms = {"l1": l1, "ssim": l_ssim, "road": 0.0, "depth": 0.0, "opacity": l_op, "reg": 0.0}
        g_depth = None
        if depth_on:
            target = pool[v.key]
            n_valid = int(target.valid.sum())
            if n_valid:
                m = target.valid & out.depth.valid
                diff = out.depth.values - target.values
                terms["depth"] = float(np.abs(diff[m]).sum() / n_valid)
                g_depth = cfg.lambda_depth * np.where(m, np.sign(diff), 0.0) / n_valid
        grads = backward(ctx, d_color=g_img, d_depth=g_depth, d_alpha=g_alpha)
        node_grads = split_grads(graph, comp, grads)

        nodes = graph.nodes()
        all_g = GaussianSet.concat(nodes)
        l_reg, g_reg = scale_regularizer(all_g, cfg.max_scale_ratio)
        terms["reg"] = l_reg
        start = 0
        for ng, node in zip(node_grads, nodes):
            ng.log_scales += cfg.lambda_reg * g_reg[start:start + len(node)]
            start += len(node)
        if depth_on and cfg.use_road_node and model.prior is not None and len(graph.road_node):
            rl = road_loss(graph.road_node, model.prior, cfg.lambda_normal, cfg.lambda_flat)
            terms["road"] = rl.total
            node_grads[1] += rl.grads.scaled(cfg.lambda_road)

        total = (photo + cfg.lambda_road * terms["road"] + cfg.lambda_depth * terms["depth"]
                 + cfg.lambda_opacity * terms["opacity"] + cfg.lambda_reg * terms["reg"])
        weights = {"l1": 1 - cfg.lambda_r, "ssim": cfg.lambda_r, "road": cfg.lambda_road,
                   "depth": cfg.lambda_depth, "opacity": cfg.lambda_opacity, "reg": cfg.lambda_reg}
        for name, value in terms.items():
            if not (math.isfinite(value) and math.isfinite(weights[name] * value)):
                raise NumericalError(name, it)
        if not math.isfinite(total):
            raise NumericalError("total", it)

        for name, ng, node in zip(names, node_grads, nodes):
            _step_set(opt, name, node, ng, {"centers": "road_centers"} if name == "road" else None)
        opt.step("bg", "background", bg, g_bg)
        np.clip(bg, 0.0, 1.0, out=bg)

        updated = []
        pool_iter = it - cfg.rgb_only_iters - cfg.enhancer_delay + 1
        if depth_on and cfg.use_enhancer and pool_iter >= 1:
            ctx_pool = PoolUpdateContext(
                iteration=pool_iter, global_iteration=it, current_view=v.key,
                render_depth=render_depth, image=lambda k: by_key[k].image, camera=lambda k: by_key[k].camera,
                neighbors=lambda k: select_neighbors(k, keys, timestamps, cam_ids, enh.neighbor_count),
                config=enh)
            updated = update_pool(pool, cfg.strategy, ctx_pool)
        rec = {"iter": it, "frame": v.frame, "camera": v.camera_id, **terms,
               "weights": weights,
               "total": total, "pool_updates": len(updated),
               "pool_updated": [[k[0], k[1]] for k in updated]}
        records.append(rec)
        if cfg.eval_every and heldout and ((it + 1) % cfg.eval_every == 0 or it + 1 == cfg.total_iters):
            records.append({"event": "eval", "iter": it, **_eval_snapshot(model, heldout)})
    return model, records


def weighted_total(rec: dict) -> float:
    w = rec["weights"]
    return sum(w[k] * rec[k] for k in LOSS_TERMS)


def write_logs(records: Sequence[dict], path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_logs(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------- evaluation

def evaluate(model, views: Sequence[ViewRecord]) -> dict:
    """Per-view and aggregate PSNR/SSIM and depth metrics against GT depth.

    Depth aggregates pool every valid pixel of every view.
    """
    per_view = []
    preds, gts = [], []
    for v in views:
        img, out = render_model(model, v.camera, v.frame)
        entry = {"frame": v.frame, "camera": v.camera_id, "psnr": psnr(img, v.image.values),
                 "ssim": ssim(img, v.image.values).value}
        if v.gt_depth is not None:
            try:
                entry["depth"] = depth_metrics(out.depth, v.gt_depth).as_dict()
            except EmptyEvaluation:
                entry["depth"] = None
            preds.append(out.depth.values.ravel())
            gts.append(v.gt_depth.values.ravel())
        per_view.append(entry)
    agg_depth = {}
    if preds:
        try:
            agg_depth = depth_metrics(DepthMap(np.concatenate(preds)[None]), DepthMap(np.concatenate(gts)[None])).as_dict()
        except EmptyEvaluation:
            agg_depth = {}
    agg = {"psnr": float(np.mean([e["psnr"] for e in per_view])) if per_view else None,
           "ssim": float(np.mean([e["ssim"] for e in per_view])) if per_view else None,
           "depth": agg_depth}
    return {"views": per_view, "aggregate": agg, "lpips": "unavailable", "view_count": len(per_view)}


def evaluate_split(model, dataset: Dataset, split: str, cfg: TrainConfig | None = None) -> dict:
    cfg = cfg or TrainConfig()
    if split not in ("train", "heldout"):
        raise ValueError(f"unknown split {split!r}")
    train_v, held_v = _train_views(dataset, cfg)
    rep = evaluate(model, train_v if split == "train" else held_v)
    rep["split"] = split
    return rep


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True))


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: TrainedModel, path, extra: dict | None = None) -> Path:
    arrays = {"background": model.background, "frame_count": np.array(model.graph.frame_count)}
    names = []
    for name, g in zip(model.graph.node_names(), model.graph.nodes()):
        names.append(name)
        for p in PARAM_NAMES:
            arrays[f"{name}/{p}"] = getattr(g, p)
    for d in model.graph.dynamic_nodes:
        arrays[f"{d.name}/poses"] = np.stack([p.matrix() for p in d.poses])
    if model.prior is not None:
        arrays["prior/mean_height"] = np.array(model.prior.mean_height)
        arrays["prior/normal"] = model.prior.normal
    meta = {"nodes": names, "dynamic": [d.name for d in model.graph.dynamic_nodes], **(extra or {})}
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def load_checkpoint(path) -> tuple[TrainedModel, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))

        def node(name):
            return GaussianSet(*(z[f"{name}/{p}"] for p in PARAM_NAMES))

        dyn = [DynamicNode(node(n), [RigidTransform.from_matrix(m) for m in z[f"{n}/poses"]], n)
               for n in meta["dynamic"]]
        graph = SceneGraph(node("static"), node("road"), dyn, int(z["frame_count"]))
        prior = GroundPrior(float(z["prior/mean_height"]), z["prior/normal"]) if "prior/mean_height" in z else None
        return TrainedModel(graph, np.array(z["background"]), prior), meta


def run(dataset: Dataset, cfg: TrainConfig, enh: EnhancerConfig | None = None,
        prune: PruneConfig | None = None) -> dict:
    """Initialize, train and evaluate on the held-out split in one call."""
    views, held = _train_views(dataset, cfg)
    model, init_rep = initialize_graph(dataset, cfg, prune, views)
    model, records = train(dataset, model, cfg, enh, views, held)
    return {"model": model, "init": init_rep, "logs": records, "heldout": evaluate(model, held),
            "config": cfg}


__all__ = [
    "Adam", "InitReport", "LearningRates", "NumericalError", "TrainConfig", "TrainedModel", "composite",
    "copy_model", "without_road_node",
    "evaluate", "evaluate_split", "initialize_graph", "load_checkpoint", "make_fitter", "read_logs",
    "read_report", "render_model", "run", "save_checkpoint", "train", "weighted_total", "write_logs",
    "write_report", "PERIODIC", "REAL_TIME",
]
