"""Pinhole-camera utilities: back-projection, surface normals from depth,
ground-height estimation, and the depth-inconsistency weight field.

Conventions: image u rightward, v downward, camera y downward.  Ground
pixels therefore back-project to positive y, and the estimated ground
height is positive.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, NoFreespacePixels

# Pixels at or above the horizon have a vanishing ray term; their implied
# ground depth is clamped here instead of dividing by zero.
HORIZON_EPS = 1e-6
DEFAULT_Z_MAX = 200.0
# Largest double below 1: keeps the weight codomain open at 1 even when
# exp(-residual) underflows.
_ONE_OPEN = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model: focal lengths and principal point, all in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError(f"focal lengths must be positive, got {(self.fx, self.fy)}")

    def validate_for(self, height: int, width: int):
        if not (0 <= self.cx < width and 0 <= self.cy < height):
            raise ContractError(
                f"principal point {(self.cx, self.cy)} outside {width}x{height} image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def inverse(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    @classmethod
    def from_text(cls, path) -> "CameraIntrinsics":
        """Parse the four whitespace-separated numbers ``fx fy cx cy``."""
        raw = Path(path).read_text().split()
        if len(raw) != 4:
            raise ContractError(f"intrinsics file {path} must hold exactly 4 numbers")
        try:
            fx, fy, cx, cy = (float(v) for v in raw)
        except ValueError as exc:
            raise ContractError(f"malformed intrinsics file {path}: {exc}") from exc
        return cls(fx, fy, cx, cy)

    def to_text(self, path):
        Path(path).write_text(f"{self.fx} {self.fy} {self.cx} {self.cy}\n")


@dataclass
class DepthImage:
    """Metric depth in meters with a per-pixel validity mask."""

    values: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ContractError(f"depth must be rank-2, got shape {self.values.shape}")
        if self.valid is None:
            self.valid = np.isfinite(self.values) & (self.values > 0)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.values.shape:
                raise ContractError("depth and validity mask shapes differ")
        checked = self.values[self.valid]
        if checked.size and not (np.all(np.isfinite(checked)) and np.all(checked > 0)):
            raise ContractError("valid depths must be finite and positive")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class NormalMap:
    """Unit surface normals (3,H,W) in the camera frame, with validity mask."""

    vectors: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.vectors.ndim != 3 or self.vectors.shape[0] != 3:
            raise ContractError(f"normal map must be (3,H,W), got {self.vectors.shape}")
        norms = np.linalg.norm(self.vectors[:, self.valid], axis=0)
        if norms.size and np.any(np.abs(norms - 1.0) > 1e-5):
            raise ContractError("valid normals must be unit length within 1e-5")


@dataclass
class PixelSet:
    """Integer (u, v) pixel locations, unique and in-bounds."""

    coordinates: np.ndarray
    image_shape: tuple = None

    def __post_init__(self):
        self.coordinates = np.asarray(self.coordinates, dtype=np.int64).reshape(-1, 2)
        if self.image_shape is not None:
            h, w = self.image_shape
            u, v = self.coordinates[:, 0], self.coordinates[:, 1]
            if self.coordinates.size and (u.min() < 0 or v.min() < 0
                                          or u.max() >= w or v.max() >= h):
                raise ContractError("pixel coordinates out of image bounds")
        if len(np.unique(self.coordinates, axis=0)) != len(self.coordinates):
            raise ContractError("pixel set contains duplicates")

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "PixelSet":
        v, u = np.nonzero(mask)
        return cls(np.stack([u, v], axis=1), image_shape=mask.shape)

    def __len__(self):
        return len(self.coordinates)

    def homogeneous(self) -> np.ndarray:
        """Columns of (u, v, 1), shape (3, N)."""
        n = len(self.coordinates)
        return np.vstack([self.coordinates.T.astype(np.float64), np.ones(n)])


def back_project(q, depth: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Lift pixel q=(u,v) at the given depth to a camera-frame 3D point."""
    if not depth > 0:
        raise ContractError(f"depth must be positive, got {depth}")
    u, v = q
    return np.array([(u - intrinsics.cx) * depth / intrinsics.fx,
                     (v - intrinsics.cy) * depth / intrinsics.fy,
                     depth])


def estimate_normals(depth: DepthImage, intrinsics: CameraIntrinsics) -> NormalMap:
    """Per-pixel unit normals from central differences of inverse depth.

    Inverse depth is linear in image coordinates on any plane, so the
    estimate is exact on planar regions.  Normals are oriented toward the
    camera; border pixels and pixels lacking a valid 3x3 neighborhood are
    masked out.
    """
    if not depth.valid.any():
        raise ContractError("cannot estimate normals: no valid depth")
    h, w = depth.shape
    d = np.where(depth.valid, 1.0 / np.where(depth.valid, depth.values, 1.0), np.nan)

    du = np.full((h, w), np.nan)
    dv = np.full((h, w), np.nan)
    du[:, 1:-1] = (d[:, 2:] - d[:, :-2]) / 2.0
    dv[1:-1, :] = (d[2:, :] - d[:-2, :]) / 2.0

    u = np.arange(w)[None, :] - intrinsics.cx
    v = np.arange(h)[:, None] - intrinsics.cy
    nx = intrinsics.fx * du
    ny = intrinsics.fy * dv
    nz = d - u * du - v * dv
    vectors = -np.stack([nx, ny, nz])  # flip: camera-facing hemisphere

    valid = np.isfinite(vectors).all(axis=0)
    norm = np.linalg.norm(vectors, axis=0)
    valid &= norm > 1e-12
    vectors = np.where(valid, vectors / np.where(valid, norm, 1.0), 0.0)
    return NormalMap(vectors, valid)


def camera_height(freespace: PixelSet, depth: DepthImage,
                  intrinsics: CameraIntrinsics, aggregate: str = "mean") -> float:
    """Estimated ground-plane height: the average back-projected y over the
    given pixels.  ``aggregate="median"`` is available for robustness."""
    if len(freespace) == 0:
        raise NoFreespacePixels("camera height needs a nonempty pixel set")
    u = freespace.coordinates[:, 0]
    v = freespace.coordinates[:, 1]
    z = depth.values[v, u]
    ok = depth.valid[v, u]
    if not ok.all():
        raise ContractError("camera height requires valid depth at every pixel")
    ys = (v - intrinsics.cy) / intrinsics.fy * z
    if aggregate == "median":
        return float(np.median(ys))
    return float(ys.mean())


def depth_inconsistency_weights(freespace: PixelSet, depth: DepthImage,
                                intrinsics: CameraIntrinsics, y_hat: float,
                                z_max: float = DEFAULT_Z_MAX) -> np.ndarray:
    """Per-pixel weights in [0,1) that grow with the gap between measured
    depth and the depth implied by the estimated ground height.

    Pixels outside the set, or with invalid depth, get weight 0.  Pixels at
    or above the horizon use an implied depth clamped to ``z_max``.
    """
    if not np.isfinite(y_hat):
        raise ContractError(f"ground height estimate must be finite, got {y_hat}")
    h, w = depth.shape
    weights = np.zeros((h, w))
    if len(freespace) == 0:
        return weights
    u = freespace.coordinates[:, 0]
    v = freespace.coordinates[:, 1]
    ok = depth.valid[v, u]
    if np.any(~np.isfinite(depth.values[v, u][ok])):
        raise ContractError("non-finite depth at a weighted pixel")
    u, v = u[ok], v[ok]
    if u.size == 0:
        return weights
    ray = (v - intrinsics.cy) / intrinsics.fy
    with np.errstate(divide="ignore", over="ignore"):
        implied = np.where(ray > HORIZON_EPS, y_hat / np.where(ray > HORIZON_EPS, ray, 1.0),
                           np.inf)
    implied = np.minimum(implied, z_max)
    residual = np.abs(implied - depth.values[v, u])
    weights[v, u] = np.minimum(1.0 - np.exp(-residual), _ONE_OPEN)
    return weights
