from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

PARAM_NAMES = ("centers", "log_scales", "rotations", "opacity_logits", "colors")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(N,4) unit quaternions (w, x, y, z) -> (N,3,3) rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_to_quat(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull dL/dR (N,3,3) back to dL/dq for unit q (before normalization)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = dR
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([dw, dx, dy, dz], axis=1)


def normalize_quats(q: np.ndarray):
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    return q / norm, norm


def normalize_grad(qn: np.ndarray, norm: np.ndarray, dqn: np.ndarray) -> np.ndarray:
    """Gradient through q -> q/|q|."""
    return (dqn - qn * np.sum(qn * dqn, axis=1, keepdims=True)) / norm


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b, broadcasting over leading dims."""
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_left_matrix(a: np.ndarray) -> np.ndarray:
    """4x4 matrix L with a ⊗ b = L @ b."""
    w, x, y, z = a
    return np.array([[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]])


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Single 3x3 rotation -> unit quaternion (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


@dataclass
class GaussianSet:
    """Columnar Gaussian parameters in their unconstrained (optimized) form.

    scale = exp(log_scales), opacity = sigmoid(opacity_logits); rotations are
    (w, x, y, z) quaternions kept at unit norm; colors are plain RGB.
    """

    centers: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        n = self.centers.shape[0]
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        if n and np.any(np.abs(np.linalg.norm(self.rotations, axis=1) - 1.0) > 1e-6):
            raise ValueError("rotations must be unit quaternions")

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_points(cls, centers, colors, scale=0.01, opacity=0.1) -> "GaussianSet":
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        n = centers.shape[0]
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        scale = np.broadcast_to(np.asarray(scale, dtype=np.float64).reshape(-1, 1) if np.ndim(scale) else
                                np.float64(scale), (n, 3))
        return cls(centers, np.log(scale), rot, np.full(n, float(logit(opacity))), colors)

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def params(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "GaussianSet":
        return GaussianSet(**{k: v.copy() for k, v in self.params().items()})

    def subset(self, index) -> "GaussianSet":
        return GaussianSet(**{k: v[index].copy() for k, v in self.params().items()})

    @staticmethod
    def concat(sets) -> "GaussianSet":
        sets = list(sets)
        if not sets:
            return GaussianSet.empty()
        return GaussianSet(**{k: np.concatenate([getattr(s, k) for s in sets]) for k in PARAM_NAMES})


@dataclass
class GaussianGrads:
    centers: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GaussianGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 3)))

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def __iadd__(self, other: "GaussianGrads"):
        for name in PARAM_NAMES:
            getattr(self, name).__iadd__(getattr(other, name))
        return self

    def scaled(self, k: float) -> "GaussianGrads":
        return GaussianGrads(**{n: v * k for n, v in self.params().items()})

    def slice(self, sl) -> "GaussianGrads":
        return GaussianGrads(**{n: v[sl] for n, v in self.params().items()})


def smallest_axis_normal(gaussians: GaussianSet) -> np.ndarray:
    """Body axis of the smallest scale, in world coordinates, oriented to z >= 0.

    Ties pick the lowest axis index. Normals with z == 0 are flipped so that their
    largest-magnitude component is positive.
    """
    normals, _, _ = _smallest_axis(gaussians)
    return normals


def _smallest_axis(gaussians: GaussianSet, zero_tol: float = 1e-9):
    n = len(gaussians)
    if n == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=int), np.zeros(0)
    qn, _ = normalize_quats(gaussians.rotations)
    R = quat_to_rotmat(qn)
    axis = np.argmin(gaussians.log_scales, axis=1)
    raw = R[np.arange(n), :, axis]
    sign = np.where(raw[:, 2] < 0, -1.0, 1.0)
    flat = np.abs(raw[:, 2]) <= zero_tol
    if np.any(flat):
        big = raw[np.arange(n), np.argmax(np.abs(raw), axis=1)]
        sign = np.where(flat, np.where(big < 0, -1.0, 1.0), sign)
    return raw * sign[:, None], axis, sign
