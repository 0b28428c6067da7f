"""Depth accuracy, image quality, and the photometric training losses."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .core import as_array

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
ABS_REL_MIN_GT = 1e-6


@dataclass(frozen=True)
class DepthEval:
    l1: float
    abs_rel: float
    rmse: float
    delta_125: float
    valid_pixel_count: int

    def as_dict(self) -> dict:
        return asdict(self)


class EmptyEvaluation(ValueError):
    """Raised when prediction and ground truth share no valid pixel."""


def depth_metrics(pred, gt) -> DepthEval:
    p = as_array(pred)
    g = as_array(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    mask = np.isfinite(p) & np.isfinite(g) & (p > 0) & (g > 0)
    if not mask.any():
        raise EmptyEvaluation("no pixel is valid in both depth maps")
    p, g = p[mask], g[mask]
    diff = p - g
    rel_mask = g >= ABS_REL_MIN_GT
    ratio = np.maximum(p / g, g / p)
    return DepthEval(
        l1=float(np.mean(np.abs(diff))),
        abs_rel=float(np.mean(np.abs(diff[rel_mask]) / g[rel_mask])),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        delta_125=float(np.mean(ratio < 1.25)),
        valid_pixel_count=int(mask.sum()),
    )


def psnr(pred, gt, mask=None) -> float:
    p = as_array(pred)
    g = as_array(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    err = (p - g) ** 2
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    mse = float(np.mean(err))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = len(w) // 2
    y = correlate1d(x, w, axis=0, mode="constant")
    y = correlate1d(y, w, axis=1, mode="constant")
    return y[r:x.shape[0] - r, r:x.shape[1] - r]


def _filter_valid_adjoint(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = len(w) // 2
    pad = [(r, r), (r, r)] + [(0, 0)] * (g.ndim - 2)
    y = np.pad(g, pad)
    y = correlate1d(y, w[::-1], axis=0, mode="constant")
    return correlate1d(y, w[::-1], axis=1, mode="constant")


@dataclass
class SSIMResult:
    value: float
    ssim_map: np.ndarray
    grad: np.ndarray | None = None


def ssim(pred, gt, with_grad: bool = False) -> SSIMResult:
    """Mean SSIM with an 11x11 Gaussian window over valid positions, channel-averaged.

    With ``with_grad`` the gradient of the mean SSIM with respect to ``pred`` is returned.
    """
    x = as_array(pred)
    y = as_array(gt)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    w = gaussian_window()
    mu_x = _filter_valid(x, w)
    mu_y = _filter_valid(y, w)
    e_xx = _filter_valid(x * x, w)
    e_yy = _filter_valid(y * y, w)
    e_xy = _filter_valid(x * y, w)
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * (e_xy - mu_x * mu_y) + SSIM_C2
    b1 = mu_x ** 2 + mu_y ** 2 + SSIM_C1
    b2 = (e_xx - mu_x ** 2) + (e_yy - mu_y ** 2) + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    value = float(np.mean(smap))
    if not with_grad:
        return SSIMResult(value, smap.mean(axis=2))

    g = 1.0 / smap.size
    d_mu = g * smap * (2 * mu_y / a1 - 2 * mu_y / a2 - 2 * mu_x / b1 + 2 * mu_x / b2)
    d_exx = -g * smap / b2
    d_exy = 2 * g * smap / a2
    grad = (_filter_valid_adjoint(d_mu, w) + 2 * x * _filter_valid_adjoint(d_exx, w)
            + y * _filter_valid_adjoint(d_exy, w))
    if np.ndim(as_array(pred)) == 2:
        grad = grad[..., 0]
    return SSIMResult(value, smap.mean(axis=2), grad)


def l1_loss(pred, gt, mask=None):
    """Mean absolute error and its gradient on ``pred``.

    ``mask`` (H, W) restricts the mean to selected pixels (all channels).
    """
    p = as_array(pred)
    g = as_array(gt)
    diff = p - g
    if mask is None:
        n = diff.size
        return float(np.abs(diff).sum() / n), np.sign(diff) / n
    m = np.asarray(mask, dtype=bool)
    if p.ndim == 3:
        m = np.broadcast_to(m[..., None], p.shape)
    n = int(m.sum())
    if n == 0:
        return 0.0, np.zeros_like(p)
    grad = np.where(m, np.sign(diff), 0.0) / n
    return float(np.abs(diff[m]).sum() / n), grad


def photometric_loss(pred, gt, lambda_r: float):
    """(1 − λ_r)·L1 + λ_r·(1 − SSIM) with gradient. Returns (total, l1, l_ssim, grad)."""
    l1, g1 = l1_loss(pred, gt)
    s = ssim(pred, gt, with_grad=True)
    l_ssim = 1.0 - s.value
    total = (1 - lambda_r) * l1 + lambda_r * l_ssim
    return total, l1, l_ssim, (1 - lambda_r) * g1 - lambda_r * s.grad
