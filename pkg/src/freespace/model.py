"""End-to-end assembly: two small convolutional towers (one per modality),
a fusion block per stage, and the graph decoder, producing a full-resolution
freespace probability map from (RGB, depth, intrinsics).

Checkpoints are a self-describing binary container: a JSON manifest (format
version, model config, array shapes) followed by raw little-endian float32
tensors.  All state lives on the float32 grid, so save/load round-trips are
bitwise exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .decoder import DecoderParams, build_topology, cost_report, decode
from .errors import CheckpointError, ContractError
from . import fusion as fusion_mod
from .fusion import FeaturePair, FusionConfig, FusionParams, hf2b_forward
from .geometry import CameraIntrinsics, DepthImage, estimate_normals

CHECKPOINT_MAGIC = b"FSCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 4
    channels: tuple = (16, 32, 64, 128)
    # stage-1 stride; kept at 2 so a 64x64 input still leaves the deepest
    # stage at 4x4, the smallest extent the atrous stack supports
    patch_stride: int = 2
    decoder_kind: str = "roadsegv2"
    decoder_block: str = None      # None -> topology default
    fusion: FusionConfig = field(default_factory=FusionConfig)
    seed: int = 0

    def __post_init__(self):
        if len(self.channels) != self.levels:
            raise ContractError(
                f"{self.levels} levels need {self.levels} channel counts, "
                f"got {self.channels}")
        if self.patch_stride < 1:
            raise ContractError("patch stride must be >= 1")

    @property
    def total_stride(self) -> int:
        return self.patch_stride * 2 ** (self.levels - 1)

    def to_mapping(self) -> dict:
        out = asdict(self)
        out["channels"] = list(self.channels)
        return out

    @classmethod
    def from_mapping(cls, m: dict) -> "ModelConfig":
        m = dict(m)
        m["channels"] = tuple(m["channels"])
        m["fusion"] = FusionConfig(**m["fusion"])
        return cls(**m)


class _EncoderStage(nn.Module):
    def __init__(self, cin, cout, stride, rng):
        self.conv = nn.Conv2d(cin, cout, 3, rng, stride=stride, padding=1)
        self.bn = nn.BatchNorm2d(cout)

    def __call__(self, x, training=False):
        return nn.relu(self.bn(self.conv(x), training))


class ModelState(nn.Module):
    """All learnable state plus the step counter."""

    def __init__(self, config: ModelConfig):
        self.config = config
        seeds = np.random.SeedSequence(config.seed).generate_state(
            2 + config.levels + 1).tolist()
        rng_rgb = np.random.default_rng(seeds[0])
        rng_normal = np.random.default_rng(seeds[1])

        def tower(rng):
            stages = []
            cin = 3
            for i, cout in enumerate(config.channels):
                stride = config.patch_stride if i == 0 else 2
                stages.append(_EncoderStage(cin, cout, stride, rng))
                cin = cout
            return stages

        self.rgb_tower = tower(rng_rgb)
        self.normal_tower = tower(rng_normal)
        self.fusion_stages = [FusionParams(c, seed=seeds[2 + i])
                              for i, c in enumerate(config.channels)]
        self.graph = build_topology(config.decoder_kind, config.levels,
                                    config.channels, config.decoder_block)
        self.decoder = DecoderParams(self.graph, seed=seeds[-1])
        self.step = 0

    def parameter_count(self) -> int:
        return sum(p.data.size for _, p in self.params())


def build_model(config: ModelConfig = ModelConfig()) -> ModelState:
    return ModelState(config)


def normals_as_image(depth: DepthImage, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Surface normals mapped from [-1,1] to [0,1]; invalid pixels 0.5."""
    nm = estimate_normals(depth, intrinsics)
    vectors = np.where(nm.valid, nm.vectors, 0.0)
    return (vectors + 1.0) / 2.0


def forward_tensor(rgb: np.ndarray, depth: DepthImage,
                   intrinsics: CameraIntrinsics, state: ModelState,
                   training: bool = False) -> nn.Tensor:
    """Differentiable forward pass; returns (1,H,W) probabilities."""
    cfg = state.config
    if rgb.shape[0] != 3 or rgb.shape[1:] != depth.shape:
        raise ContractError(f"rgb {rgb.shape} and depth {depth.shape} misaligned")
    h, w = depth.shape
    stride = cfg.total_stride
    if h % stride or w % stride:
        raise ContractError(
            f"image size {h}x{w} must be a multiple of {stride}")
    deepest = min(h, w) // stride
    if (cfg.fusion.atrous and not cfg.fusion.baseline_sum
            and deepest < fusion_mod.MIN_SPATIAL):
        raise ContractError(
            f"image size {h}x{w} leaves the deepest stage at {deepest}; the "
            f"multi-scale stack needs at least {stride * fusion_mod.MIN_SPATIAL} "
            f"pixels per side")

    x_r = nn.Tensor(rgb)
    x_n = nn.Tensor(normals_as_image(depth, intrinsics))
    fused = []
    for stage_r, stage_n, fusion_params in zip(state.rgb_tower, state.normal_tower,
                                               state.fusion_stages):
        f_r = stage_r(x_r, training)
        f_n = stage_n(x_n, training)
        fused_i, x_r, x_n = hf2b_forward(FeaturePair(f_r, f_n), fusion_params,
                                         cfg.fusion, training)
        fused.append(fused_i)
    probs = decode(state.graph, fused, state.decoder, training)
    if cfg.patch_stride > 1:
        probs = nn.upsample_bilinear(probs, cfg.patch_stride)
    return probs


def forward(rgb: np.ndarray, depth: DepthImage, intrinsics: CameraIntrinsics,
            state: ModelState) -> np.ndarray:
    """Inference-mode probability map, shape (H, W), values in (0,1)."""
    return forward_tensor(rgb, depth, intrinsics, state).data[0]


def decoder_cost(state: ModelState, image_size) -> "CostReport":
    h, w = image_size
    s = state.config.patch_stride
    return cost_report(state.graph, (h // s, w // s))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _state_arrays(state: ModelState):
    for name, p in state.params():
        yield f"param:{name}", p.data
    for name, b in state.buffers():
        yield f"buffer:{name}", b


def save_state(state: ModelState, path):
    entries = list(_state_arrays(state))
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.config.to_mapping(),
        "step": state.step,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in entries],
    }
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in entries:
            fh.write(arr.astype("<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_state(path) -> ModelState:
    """Rebuild a model from a checkpoint; fails cleanly on bad files."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a model checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {version} unsupported; "
                f"this build reads version {CHECKPOINT_VERSION}")
        (blob_len,) = struct.unpack("<Q", _read_exact(fh, 8, "manifest length"))
        manifest = json.loads(_read_exact(fh, blob_len, "manifest"))
        state = build_model(ModelConfig.from_mapping(manifest["config"]))
        state.step = manifest["step"]
        targets = dict(_state_arrays(state))
        listed = [entry["name"] for entry in manifest["arrays"]]
        if sorted(listed) != sorted(targets):
            raise CheckpointError("checkpoint arrays do not match the model layout")
        params = dict(state.params())
        buffers = dict(state.buffers())
        for entry in manifest["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 4 * count, entry["name"])
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
            kind, name = entry["name"].split(":", 1)
            if kind == "param":
                params[name].data = arr
            else:
                obj = state
                *path_parts, leaf = name.split(".")
                for part in path_parts:
                    obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
                setattr(obj, leaf, arr)
        extra = fh.read(1)
        if extra:
            raise CheckpointError("trailing bytes after checkpoint payload")
    return state
