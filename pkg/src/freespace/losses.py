"""Training objective: pixel-wise binary cross-entropy plus two weighted
terms that concentrate supervision on label-transition regions and on
pixels whose depth disagrees with the estimated ground plane.

All functions are pure; ``total_loss`` also returns the closed-form
per-pixel gradient with both weight fields held constant (they are
recomputed every call but excluded from differentiation).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import ContractError


@dataclass(frozen=True)
class LossConfig:
    """Weights and shape parameters of the training objective."""

    lambda_s: float = 0.3
    lambda_d: float = 0.1
    radius: int = 7
    eps: float = 1e-7
    # Use the ground-truth mask instead of the thresholded prediction when
    # estimating the ground plane (ablation aid).
    use_label_mask: bool = False
    reduction: str = "sum"

    def __post_init__(self):
        if self.lambda_s < 0 or self.lambda_d < 0:
            raise ContractError("loss weights must be nonnegative")
        if self.radius < 1:
            raise ContractError(f"neighborhood radius must be >= 1, got {self.radius}")
        if not 0 < self.eps < 0.5:
            raise ContractError(f"probability clamp must lie in (0, 0.5), got {self.eps}")
        if self.reduction not in ("sum", "mean"):
            raise ContractError(f"unknown reduction {self.reduction!r}")


def _box_sum(x: np.ndarray, r: int) -> np.ndarray:
    """Sum over a (2r+1)-square window clipped at the borders."""
    h, w = x.shape
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = x.cumsum(axis=0).cumsum(axis=1)
    ys = np.arange(h)
    xs = np.arange(w)
    y0 = np.clip(ys - r, 0, h)
    y1 = np.clip(ys + r + 1, 0, h)
    x0 = np.clip(xs - r, 0, w)
    x1 = np.clip(xs + r + 1, 0, w)
    return (integral[y1[:, None], x1[None, :]] - integral[y0[:, None], x1[None, :]]
            - integral[y1[:, None], x0[None, :]] + integral[y0[:, None], x0[None, :]])


def semantic_transition_weights(labels: np.ndarray, radius: int) -> np.ndarray:
    """Per-pixel likelihood of sitting on a label transition.

    The freespace fraction over the square neighborhood (clipped at the
    image border) is mapped through cos(pi * |fraction - 1/2|): 0 on
    uniform regions, 1 on a balanced boundary.
    """
    if radius < 1:
        raise ContractError(f"radius must be >= 1, got {radius}")
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ContractError("labels must be binary")
    frac = _box_sum(labels.astype(np.float64), radius) / _box_sum(
        np.ones(labels.shape), radius)
    return np.cos(np.pi * np.abs(frac - 0.5))


def _clamp(p: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(p, eps, 1.0 - eps)


def bce(p: np.ndarray, y: np.ndarray, eps: float = 1e-7) -> float:
    """Summed binary cross-entropy with probability clamping."""
    pc = _clamp(np.asarray(p, dtype=np.float64), eps)
    y = np.asarray(y, dtype=np.float64)
    return float(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).sum())


def weighted_bce(p: np.ndarray, y: np.ndarray, w: np.ndarray,
                 eps: float = 1e-7) -> float:
    """Cross-entropy with a per-pixel weight field."""
    p, y, w = np.asarray(p), np.asarray(y), np.asarray(w)
    if not (p.shape == y.shape == w.shape):
        raise ContractError(f"shape mismatch: p {p.shape}, y {y.shape}, w {w.shape}")
    pc = _clamp(p.astype(np.float64), eps)
    yf = y.astype(np.float64)
    return float(-(w * (yf * np.log(pc) + (1.0 - yf) * np.log(1.0 - pc))).sum())


def depth_weights_for_prediction(p: np.ndarray, y: np.ndarray,
                                 depth: geometry.DepthImage,
                                 intrinsics: geometry.CameraIntrinsics,
                                 cfg: LossConfig):
    """Build the depth-inconsistency weight field for one frame.

    The drivable set is the thresholded prediction (p > 0.5) unless the
    config opts into the ground-truth mask; pixels without valid depth are
    dropped before estimating the ground height.  Returns (weights, y_hat)
    with both zero/None when the set is empty.
    """
    mask = (np.asarray(y) == 1) if cfg.use_label_mask else (np.asarray(p) > 0.5)
    mask = mask & depth.valid
    if not mask.any():
        warnings.warn("no drivable pixels with valid depth; skipping depth term",
                      stacklevel=2)
        return np.zeros(depth.shape), None
    pixels = geometry.PixelSet.from_mask(mask)
    y_hat = geometry.camera_height(pixels, depth, intrinsics)
    w = geometry.depth_inconsistency_weights(pixels, depth, intrinsics, y_hat)
    return w, y_hat


def total_loss(p: np.ndarray, y: np.ndarray, depth: geometry.DepthImage,
               intrinsics: geometry.CameraIntrinsics, cfg: LossConfig):
    """Full objective and its analytic per-pixel gradient.

    Returns (loss, grad) where grad[i,j] = dL/dp[i,j] with both weight
    fields treated as constants.  Pixels clamped by ``cfg.eps`` carry zero
    gradient.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y)
    if p.shape != y.shape or p.shape != depth.shape:
        raise ContractError(
            f"aligned inputs required: p {p.shape}, y {y.shape}, depth {depth.shape}")

    w_s = semantic_transition_weights(y, cfg.radius) if cfg.lambda_s > 0 else None
    w_d = None
    if cfg.lambda_d > 0:
        w_d, _ = depth_weights_for_prediction(p, y, depth, intrinsics, cfg)

    loss = bce(p, y, cfg.eps)
    combined = np.ones_like(p)
    if w_s is not None:
        loss += cfg.lambda_s * weighted_bce(p, y, w_s, cfg.eps)
        combined += cfg.lambda_s * w_s
    if w_d is not None:
        loss += cfg.lambda_d * weighted_bce(p, y, w_d, cfg.eps)
        combined += cfg.lambda_d * w_d

    pc = _clamp(p, cfg.eps)
    yf = y.astype(np.float64)
    grad = -combined * (yf / pc - (1.0 - yf) / (1.0 - pc))
    active = (p > cfg.eps) & (p < 1.0 - cfg.eps)
    grad = np.where(active, grad, 0.0)

    if cfg.reduction == "mean":
        n = p.size
        return loss / n, grad / n
    return loss, grad
