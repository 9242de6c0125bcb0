"""Procedural road-scene generator, dataset IO, and training augmentations.

Scenes are analytic: a ground plane at the camera height (optionally
tilting into a ramp beyond a start distance) plus axis-aligned boxes, all
ray-cast per pixel.  Ground depth is produced by the same ray expression
the geometry module inverts, so flat-ground back-projection recovers the
camera height to machine precision.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError
from .geometry import CameraIntrinsics, DepthImage

log = logging.getLogger(__name__)

SKY_COLOR = np.array([0.55, 0.70, 0.90])
ROAD_COLOR = np.array([0.42, 0.42, 0.42])
SHOULDER_COLOR = np.array([0.30, 0.45, 0.30])
# light travel direction: downward, slightly right-to-left and away
_LIGHT = np.array([-0.2, 0.9, 0.4]) / np.linalg.norm([-0.2, 0.9, 0.4])
_AMBIENT = 0.35


@dataclass(frozen=True)
class Box:
    """Axis-aligned obstacle resting on the ground plane."""

    x: float          # lateral center (m)
    z: float          # forward center (m)
    width: float      # x extent
    height: float     # vertical extent above the ground
    depth: float      # z extent
    color: tuple = (0.7, 0.25, 0.2)


@dataclass(frozen=True)
class Decal:
    """Painted ground rectangle: recolors the road without any geometry,
    so labels and depth are unaffected (markings, patches, stains)."""

    x: float
    z: float
    width: float
    depth: float
    color: tuple = (0.85, 0.85, 0.85)


@dataclass(frozen=True)
class SceneSpec:
    camera_height: float = 1.65
    road_width: float = 8.0
    intrinsics: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(70.0, 70.0, 31.5, 23.0))
    obstacles: tuple = ()
    decals: tuple = ()
    ramp_angle_deg: float = 0.0
    ramp_start: float = 12.0
    image_size: tuple = (64, 64)   # (height, width)
    seed: int = 0
    noise: float = 0.02
    stride_multiple: int = 32

    def __post_init__(self):
        if self.camera_height <= 0:
            raise ContractError(f"camera height must be positive, got {self.camera_height}")
        h, w = self.image_size
        m = self.stride_multiple
        if h % m or w % m:
            raise ContractError(f"image size {self.image_size} not a multiple of {m}")


@dataclass
class Sample:
    """One frame: RGB in [0,1], metric depth, binary labels, intrinsics."""

    rgb: np.ndarray
    depth: DepthImage
    labels: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        h, w = self.labels.shape
        if self.rgb.shape != (3, h, w) or self.depth.shape != (h, w):
            raise ContractError(
                f"misaligned planes: rgb {self.rgb.shape}, depth {self.depth.shape}, "
                f"labels {self.labels.shape}")
        if not np.isin(self.labels, (0, 1)).all():
            raise ContractError("labels must be binary")


def _ray_box_hits(dx, dy, box: Box, cam_h: float):
    """Entry distance (along the z-normalized ray) and face normal id."""
    t_lo = np.zeros_like(dx)
    t_hi = np.full_like(dx, np.inf)
    axis = np.zeros(dx.shape, dtype=np.int8)  # entry face: 0=x, 1=y, 2=z
    bounds = [(box.x - box.width / 2, box.x + box.width / 2, dx),
              (cam_h - box.height, cam_h, dy),
              (box.z - box.depth / 2, box.z + box.depth / 2, np.ones_like(dx))]
    for idx, (lo, hi, d) in enumerate(bounds):
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = np.where(d != 0, lo / np.where(d != 0, d, 1.0), -np.inf)
            t1 = np.where(d != 0, hi / np.where(d != 0, d, 1.0), np.inf)
        swap = t0 > t1
        t0, t1 = np.where(swap, t1, t0), np.where(swap, t0, t1)
        # rays parallel to the slab miss unless the origin lies inside it
        inside = (lo <= 0) & (0 <= hi)
        t0 = np.where(d != 0, t0, np.where(inside, -np.inf, np.inf))
        t1 = np.where(d != 0, t1, np.where(inside, np.inf, -np.inf))
        enters = t0 > t_lo
        axis = np.where(enters, idx, axis)
        t_lo = np.maximum(t_lo, t0)
        t_hi = np.minimum(t_hi, t1)
    hit = (t_lo <= t_hi) & (t_lo > 0)
    return np.where(hit, t_lo, np.inf), axis


def render(spec: SceneSpec) -> Sample:
    """Ray-cast the scene into an aligned RGB/depth/label triplet."""
    h, w = spec.image_size
    k = spec.intrinsics
    k.validate_for(h, w)
    rng = np.random.default_rng(spec.seed)

    dx = (np.arange(w)[None, :] - k.cx) / k.fx * np.ones((h, 1))
    dy = (np.arange(h)[:, None] - k.cy) / k.fy * np.ones((1, w))
    cam_h = spec.camera_height

    # ground plane (flat section, then optional ramp beyond ramp_start)
    with np.errstate(divide="ignore"):
        t_flat = np.where(dy > 0, cam_h / np.where(dy > 0, dy, 1.0), np.inf)
    theta = np.radians(spec.ramp_angle_deg)
    if spec.ramp_angle_deg != 0.0:
        t_flat = np.where(t_flat <= spec.ramp_start, t_flat, np.inf)
        c = np.cos(theta) * cam_h + np.sin(theta) * spec.ramp_start
        denom = np.cos(theta) * dy + np.sin(theta)
        with np.errstate(divide="ignore"):
            t_ramp = np.where(denom > 1e-12, c / np.where(denom > 1e-12, denom, 1.0),
                              np.inf)
        t_ramp = np.where(t_ramp >= spec.ramp_start, t_ramp, np.inf)
    else:
        t_ramp = np.full((h, w), np.inf)
    t_ground = np.minimum(t_flat, t_ramp)
    ground_normal = np.where(t_flat <= t_ramp, 1.0, np.cos(theta))  # -n.y of winner

    t_best = t_ground
    surface = np.where(np.isfinite(t_ground), 0, -1)  # -1 sky, 0 ground, 1+i box i
    shade = np.where(np.isfinite(t_ground), ground_normal, 0.0)
    for i, box in enumerate(spec.obstacles):
        t_box, axis = _ray_box_hits(dx, dy, box, cam_h)
        closer = t_box < t_best
        # diffuse term per entry face (x faces, top face, z faces)
        lit = np.choose(axis, [abs(_LIGHT[0]), abs(_LIGHT[1]), abs(_LIGHT[2])])
        surface = np.where(closer, 1 + i, surface)
        shade = np.where(closer, lit, shade)
        t_best = np.where(closer, t_box, t_best)

    labels = (surface == 0).astype(np.uint8)
    valid = surface >= 0
    depth = DepthImage(np.where(valid, t_best, np.nan), valid)

    on_road = np.abs(dx * t_best) <= spec.road_width / 2
    rgb = np.empty((3, h, w))
    rgb[:] = SKY_COLOR[:, None, None]
    ground_col = np.where(on_road[None], ROAD_COLOR[:, None, None],
                          SHOULDER_COLOR[:, None, None])
    hit_x, hit_z = dx * t_best, t_best
    for decal in spec.decals:
        inside = ((np.abs(hit_x - decal.x) <= decal.width / 2)
                  & (np.abs(hit_z - decal.z) <= decal.depth / 2))
        ground_col = np.where(inside[None], np.asarray(decal.color)[:, None, None],
                              ground_col)
    lambert = _AMBIENT + (1 - _AMBIENT) * shade
    rgb = np.where(surface[None] == 0, ground_col * lambert[None], rgb)
    for i, box in enumerate(spec.obstacles):
        col = np.asarray(box.color)[:, None, None]
        rgb = np.where(surface[None] == 1 + i, col * lambert[None], rgb)
    if spec.noise > 0:
        rgb = rgb + rng.normal(0.0, spec.noise, size=rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)
    return Sample(rgb, depth, labels, k)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def hflip(sample: Sample) -> Sample:
    """Mirror all planes and the principal point."""
    k = sample.intrinsics
    w = sample.labels.shape[1]
    return Sample(sample.rgb[:, :, ::-1].copy(),
                  DepthImage(sample.depth.values[:, ::-1].copy(),
                             sample.depth.valid[:, ::-1].copy()),
                  sample.labels[:, ::-1].copy(),
                  CameraIntrinsics(k.fx, k.fy, (w - 1) - k.cx, k.cy))


def crop(sample: Sample, x0: int, y0: int, width: int, height: int) -> Sample:
    h, w = sample.labels.shape
    if x0 < 0 or y0 < 0 or x0 + width > w or y0 + height > h or width < 1 or height < 1:
        raise ContractError(f"crop {(x0, y0, width, height)} outside {w}x{h} image")
    k = sample.intrinsics
    return Sample(sample.rgb[:, y0:y0 + height, x0:x0 + width].copy(),
                  DepthImage(sample.depth.values[y0:y0 + height, x0:x0 + width].copy(),
                             sample.depth.valid[y0:y0 + height, x0:x0 + width].copy()),
                  sample.labels[y0:y0 + height, x0:x0 + width].copy(),
                  CameraIntrinsics(k.fx, k.fy, k.cx - x0, k.cy - y0))


def brightness(sample: Sample, factor: float) -> Sample:
    """Photometric only: depth and labels pass through bit-identical."""
    return Sample(np.clip(sample.rgb * factor, 0.0, 1.0), sample.depth,
                  sample.labels, sample.intrinsics)


def rotate(sample: Sample, angle_deg: float) -> Sample:
    """Rotate about the image center: bilinear RGB, nearest labels/depth.

    Depth values are resampled without interpolation so they stay metric;
    pixels pulled from outside the frame become invalid.  Intrinsics are
    unchanged (small-angle augmentation, not a geometric model update).
    """
    h, w = sample.labels.shape
    th = np.radians(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    # inverse map: rotate output coords by -angle around the center
    sx = np.cos(th) * (xx - cx) + np.sin(th) * (yy - cy) + cx
    sy = -np.sin(th) * (xx - cx) + np.cos(th) * (yy - cy) + cy

    nx = np.rint(sx).astype(int)
    ny = np.rint(sy).astype(int)
    inside = (nx >= 0) & (nx < w) & (ny >= 0) & (ny < h)
    nxc, nyc = np.clip(nx, 0, w - 1), np.clip(ny, 0, h - 1)
    labels = np.where(inside, sample.labels[nyc, nxc], 0).astype(np.uint8)
    depth_vals = np.where(inside, sample.depth.values[nyc, nxc], np.nan)
    depth_ok = inside & sample.depth.valid[nyc, nxc]

    x0 = np.clip(np.floor(sx).astype(int), 0, w - 1)
    y0 = np.clip(np.floor(sy).astype(int), 0, h - 1)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    tx = np.clip(sx, 0, w - 1) - x0
    ty = np.clip(sy, 0, h - 1) - y0
    rgb = (sample.rgb[:, y0, x0] * ((1 - ty) * (1 - tx))
           + sample.rgb[:, y0, x1] * ((1 - ty) * tx)
           + sample.rgb[:, y1, x0] * (ty * (1 - tx))
           + sample.rgb[:, y1, x1] * (ty * tx))
    rgb = np.where(inside[None], rgb, 0.0)
    return Sample(rgb, DepthImage(np.where(depth_ok, depth_vals, np.nan), depth_ok),
                  labels, sample.intrinsics)


AUGMENT_OPS = ("hflip", "rotate", "crop", "brightness")


def augment(sample: Sample, ops, seed: int, max_angle: float = 5.0,
            crop_size: tuple = None) -> Sample:
    """Apply the selected randomized ops in a fixed order, seeded."""
    unknown = set(ops) - set(AUGMENT_OPS)
    if unknown:
        raise ContractError(f"unknown augmentation ops {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    out = sample
    if "hflip" in ops and rng.random() < 0.5:
        out = hflip(out)
    if "rotate" in ops:
        out = rotate(out, float(rng.uniform(-max_angle, max_angle)))
    if "crop" in ops:
        h, w = out.labels.shape
        ch, cw = crop_size if crop_size else (h // 2, w // 2)
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        out = crop(out, x0, y0, cw, ch)
    if "brightness" in ops:
        out = brightness(out, float(rng.uniform(0.7, 1.3)))
    return out


# ---------------------------------------------------------------------------
# on-disk dataset
# ---------------------------------------------------------------------------

PLANE_DIRS = ("rgb", "depth", "label", "calib")
DEPTH_SCALE = 256.0  # stored value / 256 = meters; 0 = invalid


def save_sample(sample: Sample, root, stem: str):
    root = Path(root)
    for d in PLANE_DIRS:
        (root / d).mkdir(parents=True, exist_ok=True)
    rgb8 = np.round(sample.rgb * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(rgb8, mode="RGB").save(root / "rgb" / f"{stem}.png")
    d16 = np.where(sample.depth.valid,
                   np.clip(np.round(sample.depth.values * DEPTH_SCALE), 1, 65535),
                   0).astype(np.uint16)
    Image.fromarray(d16).save(root / "depth" / f"{stem}.png")
    lab8 = (sample.labels * 255).astype(np.uint8)
    Image.fromarray(lab8, mode="L").save(root / "label" / f"{stem}.png")
    sample.intrinsics.to_text(root / "calib" / f"{stem}.txt")


def load_sample(root, stem: str) -> Sample:
    root = Path(root)
    rgb = np.asarray(Image.open(root / "rgb" / f"{stem}.png").convert("RGB"),
                     dtype=np.float64).transpose(2, 0, 1) / 255.0
    raw = np.asarray(Image.open(root / "depth" / f"{stem}.png"), dtype=np.float64)
    depth = DepthImage(np.where(raw > 0, raw / DEPTH_SCALE, np.nan), raw > 0)
    lab = np.asarray(Image.open(root / "label" / f"{stem}.png").convert("L"))
    labels = (lab >= 128).astype(np.uint8)
    intrinsics = CameraIntrinsics.from_text(root / "calib" / f"{stem}.txt")
    return Sample(rgb, depth, labels, intrinsics)


def load_dataset(root) -> list:
    """All complete samples under ``root``, sorted by stem.

    Incomplete stems are skipped with a warning; malformed calibration
    files raise."""
    root = Path(root)
    rgb_dir = root / "rgb"
    if not rgb_dir.is_dir():
        return []
    samples = []
    for png in sorted(rgb_dir.glob("*.png")):
        stem = png.stem
        missing = [d for d, ext in (("depth", ".png"), ("label", ".png"),
                                    ("calib", ".txt"))
                   if not (root / d / f"{stem}{ext}").exists()]
        if missing:
            log.warning("skipping %s: missing %s", stem, ", ".join(missing))
            continue
        samples.append(load_sample(root, stem))
    return samples
