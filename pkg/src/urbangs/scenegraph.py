"""Scene graph of Gaussian nodes and the road-plane regularizers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import RigidTransform
from .splat.gaussians import (GaussianGrads, GaussianSet, _smallest_axis, normalize_grad, normalize_quats,
                              quat_left_matrix, quat_multiply, quat_to_rotmat, rotmat_grad_to_quat,
                              rotmat_to_quat)

WORLD_UP = np.array([0.0, 0.0, 1.0])
NORM_EPS = 1e-12


@dataclass
class DynamicNode:
    """Rigid object: Gaussians in the object frame plus one object-to-world pose per frame."""

    gaussians: GaussianSet
    poses: list[RigidTransform]
    name: str = "object"


@dataclass
class SceneGraph:
    static_node: GaussianSet
    road_node: GaussianSet
    dynamic_nodes: list[DynamicNode] = field(default_factory=list)
    frame_count: int = 1

    def __post_init__(self):
        for node in self.dynamic_nodes:
            if len(node.poses) != self.frame_count:
                raise ValueError(f"dynamic node {node.name!r} has {len(node.poses)} poses, "
                                 f"expected {self.frame_count}")

    def nodes(self) -> list[GaussianSet]:
        return [self.static_node, self.road_node] + [d.gaussians for d in self.dynamic_nodes]

    def node_names(self) -> list[str]:
        return ["static", "road"] + [d.name for d in self.dynamic_nodes]

    @property
    def count(self) -> int:
        return sum(len(n) for n in self.nodes())

    def copy(self) -> "SceneGraph":
        return SceneGraph(self.static_node.copy(), self.road_node.copy(),
                          [DynamicNode(d.gaussians.copy(), list(d.poses), d.name) for d in self.dynamic_nodes],
                          self.frame_count)


@dataclass
class Composition:
    """A flattened per-frame GaussianSet plus the bookkeeping to route gradients back."""

    gaussians: GaussianSet
    slices: list[slice]
    frame: int


def transform_gaussians(g: GaussianSet, pose: RigidTransform) -> GaussianSet:
    if len(g) == 0:
        return g.copy()
    q_pose = rotmat_to_quat(pose.rotation)
    rot = quat_multiply(np.broadcast_to(q_pose, g.rotations.shape), g.rotations)
    return GaussianSet(pose.apply(g.centers), g.log_scales.copy(), rot, g.opacity_logits.copy(), g.colors.copy())


def compose(graph: SceneGraph, frame: int) -> Composition:
    if not 0 <= frame < graph.frame_count:
        raise IndexError(f"frame {frame} out of range [0, {graph.frame_count})")
    parts = [graph.static_node, graph.road_node]
    parts += [transform_gaussians(d.gaussians, d.poses[frame]) for d in graph.dynamic_nodes]
    slices, start = [], 0
    for p in parts:
        slices.append(slice(start, start + len(p)))
        start += len(p)
    return Composition(GaussianSet.concat(parts), slices, frame)


def split_grads(graph: SceneGraph, comp: Composition, grads: GaussianGrads) -> list[GaussianGrads]:
    """Per-node gradients (node parameter frames) from gradients on the composed set."""
    out = [grads.slice(comp.slices[0]), grads.slice(comp.slices[1])]
    for k, node in enumerate(graph.dynamic_nodes):
        g = grads.slice(comp.slices[2 + k])
        pose = node.poses[comp.frame]
        Lq = quat_left_matrix(rotmat_to_quat(pose.rotation))
        out.append(GaussianGrads(g.centers @ pose.rotation, g.log_scales, g.rotations @ Lq,
                                 g.opacity_logits, g.colors))
    return out


@dataclass(frozen=True)
class GroundPrior:
    mean_height: float
    normal: np.ndarray = field(default_factory=lambda: WORLD_UP.copy())

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("ground normal must be unit length")
        if not np.isfinite(self.mean_height):
            raise ValueError("mean height must be finite")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "mean_height", float(self.mean_height))


def fit_ground_prior(road_points) -> GroundPrior:
    pts = np.asarray(road_points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < 3:
        raise ValueError("need at least 3 road points to fit the ground prior")
    return GroundPrior(float(np.mean(pts[:, 2])), WORLD_UP.copy())


@dataclass
class RoadLoss:
    plane: float
    shape: float
    total: float
    grads: GaussianGrads


def road_loss(road_node: GaussianSet, prior: GroundPrior, lambda_normal: float = 10.0,
              lambda_flat: float = 1.0) -> RoadLoss:
    """Height and flatness penalties for the road Gaussians.

    plane = mean (μ_z − μ̄_z)²; shape = mean λ_normal‖n − ẑ‖ + λ_flat·s_min, with n the
    smallest-scale axis and s_min the smallest activated scale.
    """
    m = len(road_node)
    grads = GaussianGrads.zeros(m)
    if m == 0:
        return RoadLoss(0.0, 0.0, 0.0, grads)

    dz = road_node.centers[:, 2] - prior.mean_height
    plane = float(np.mean(dz ** 2))
    grads.centers[:, 2] = 2.0 * dz / m

    normals, axis, sign = _smallest_axis(road_node)
    diff = normals - prior.normal
    dist = np.sqrt(np.sum(diff ** 2, axis=1) + NORM_EPS)
    s_min = np.exp(road_node.log_scales[np.arange(m), axis])
    shape = float(np.mean(lambda_normal * dist + lambda_flat * np.abs(s_min)))

    grads.log_scales[np.arange(m), axis] = lambda_flat * np.sign(s_min) * s_min / m
    d_normal = lambda_normal * diff / dist[:, None] / m
    # normal = sign * R[:, axis]
    d_R = np.zeros((m, 3, 3))
    d_R[np.arange(m), :, axis] = d_normal * sign[:, None]
    qn, qnorm = normalize_quats(road_node.rotations)
    grads.rotations[:] = normalize_grad(qn, qnorm, rotmat_grad_to_quat(qn, d_R))
    return RoadLoss(plane, shape, plane + shape, grads)


def scale_regularizer(g: GaussianSet, max_ratio: float = 10.0):
    """Mean penalty max(s_max/s_min − max_ratio, 0) and its gradient on log_scales."""
    n = len(g)
    grad = np.zeros((n, 3))
    if n == 0:
        return 0.0, grad
    ls = g.log_scales
    imax = np.argmax(ls, axis=1)
    imin = np.argmin(ls, axis=1)
    r = np.arange(n)
    ratio = np.exp(ls[r, imax] - ls[r, imin])
    excess = ratio - max_ratio
    active = excess > 0
    value = float(np.sum(excess[active]) / n)
    dr = np.where(active, ratio / n, 0.0)
    np.add.at(grad, (r, imax), dr)
    np.add.at(grad, (r, imin), -dr)
    return value, grad


__all__ = [
    "Composition", "DynamicNode", "GroundPrior", "RoadLoss", "SceneGraph", "compose", "fit_ground_prior",
    "quat_to_rotmat", "road_loss", "scale_regularizer", "split_grads", "transform_gaussians",
]
