"""Heterogeneous feature fusion block.

Two same-shape feature maps (an RGB tower stage and a surface-normal tower
stage) pass through three sub-blocks:

* holistic attention: spatial masks on each map, plus an atrous multi-scale
  stack followed by channel gating on the concatenated pair;
* a contrast descriptor: sigmoid-normalized attentive maps are compared by
  an elementwise product branch (shared structure) and a subtraction branch
  (modality-specific structure), then projected back to C channels;
* affinity-weighted recalibration: the two descriptors form a per-element
  weight volume in (0,1) that multiplies both original maps before the
  final fusing convolution.

All ops take and return engine tensors, so the whole block is
differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ContractError

MIN_SPATIAL = 4          # atrous stack needs at least a 4x4 map
ATROUS_DILATIONS = (1, 2, 4)
CHANNEL_REDUCTION = 4
RANGE_TOL = 1e-6


@dataclass(frozen=True)
class FusionConfig:
    """Component switches mirroring the ablation axes."""

    spatial: bool = True        # ham.spatial
    channel: bool = True        # ham.channel
    atrous: bool = True         # ham.atrous
    hfcd: bool = True           # hfcd.enabled
    awfr: bool = True           # awfr.enabled
    baseline_sum: bool = False  # fusion.baseline_sum

    @property
    def all_disabled(self) -> bool:
        return not (self.spatial or self.channel or self.atrous
                    or self.hfcd or self.awfr)


@dataclass
class FeaturePair:
    """Aligned (C,H,W) feature maps from the two encoder towers."""

    rgb: nn.Tensor
    normal: nn.Tensor

    def __post_init__(self):
        self.rgb = nn.as_tensor(self.rgb)
        self.normal = nn.as_tensor(self.normal)
        if self.rgb.shape != self.normal.shape:
            raise ContractError(
                f"feature pair shapes differ: {self.rgb.shape} vs {self.normal.shape}")
        if len(self.rgb.shape) != 3:
            raise ContractError(f"features must be (C,H,W), got {self.rgb.shape}")

    @property
    def channels(self) -> int:
        return self.rgb.shape[0]


class AtrousStack(nn.Module):
    """Parallel dilated 3x3 convolutions, summed, then norm + relu.

    Symmetric padding keeps constants exact eigenfunctions of the stack.
    """

    def __init__(self, c: int, rng, dilations=ATROUS_DILATIONS):
        self.branches = [nn.Conv2d(c, c, 3, rng, dilation=d, padding=d,
                                   pad_mode="symmetric") for d in dilations]
        self.bn = nn.BatchNorm2d(c)

    def correlate(self, x: nn.Tensor) -> nn.Tensor:
        """Summed branch responses before normalization."""
        acc = self.branches[0](x)
        for branch in self.branches[1:]:
            acc = nn.add(acc, branch(x))
        return acc

    def __call__(self, x: nn.Tensor, training: bool = False) -> nn.Tensor:
        return nn.relu(self.bn(self.correlate(x), training))


class ContrastHead(nn.Module):
    """conv + norm + sigmoid applied to one contrast branch."""

    def __init__(self, c: int, rng):
        self.conv = nn.Conv2d(c, c, 3, rng)
        self.bn = nn.BatchNorm2d(c)

    def __call__(self, x: nn.Tensor, training: bool = False) -> nn.Tensor:
        return nn.sigmoid(self.bn(self.conv(x), training))


class FusionParams(nn.Module):
    """All learnable state of one fusion block at channel width ``c``."""

    def __init__(self, c: int, seed: int = 0):
        if c < 1:
            raise ContractError(f"channel count must be positive, got {c}")
        rng = np.random.default_rng(seed)
        self.c = c
        self.seed = seed
        self.spatial_conv = nn.Conv2d(2, 1, 7, rng)
        self.atrous = AtrousStack(c, rng)
        squeeze = max(1, 2 * c // CHANNEL_REDUCTION)
        self.channel_fc1 = nn.Linear(2 * c, squeeze, rng)
        self.channel_fc2 = nn.Linear(squeeze, 2 * c, rng)
        self.shared_head = ContrastHead(c, rng)
        self.distinct_head = ContrastHead(c, rng)
        self.contrast_proj = nn.Conv2d(2 * c, c, 1, rng)
        self.recal_rgb = nn.Conv2d(c, c, 3, rng)
        self.recal_normal = nn.Conv2d(c, c, 3, rng)
        self.fuse = nn.Conv2d(2 * c, c, 1, rng)

    def check_pair(self, pair: FeaturePair):
        if pair.channels != self.c:
            raise ContractError(
                f"pair has {pair.channels} channels but params were built for {self.c}")


def _spatial_mask(x: nn.Tensor, params: FusionParams) -> nn.Tensor:
    stacked = nn.concat_channels([nn.mean_over_channels(x), nn.max_over_channels(x)])
    return nn.sigmoid(params.spatial_conv(stacked))


def spatial_attention(pair: FeaturePair, params: FusionParams) -> nn.Tensor:
    """Concatenated spatially re-weighted maps, shape (2C,H,W)."""
    params.check_pair(pair)
    return nn.concat_channels([nn.mul(pair.rgb, _spatial_mask(pair.rgb, params)),
                               nn.mul(pair.normal, _spatial_mask(pair.normal, params))])


def atrous_aggregate(pair: FeaturePair, params: FusionParams,
                     training: bool = False) -> nn.Tensor:
    """Concatenated multi-scale context maps, shape (2C,H,W)."""
    params.check_pair(pair)
    _, h, w = pair.rgb.shape
    if h < MIN_SPATIAL or w < MIN_SPATIAL:
        raise ContractError(f"atrous stack needs at least {MIN_SPATIAL}x{MIN_SPATIAL}, "
                            f"got {h}x{w}")
    return nn.concat_channels([params.atrous(pair.rgb, training),
                               params.atrous(pair.normal, training)])


def channel_attention(f_a: nn.Tensor, params: FusionParams) -> nn.Tensor:
    """Per-channel scalar gates in (0,1) applied to the (2C,H,W) input."""
    f_a = nn.as_tensor(f_a)
    if f_a.shape[0] != 2 * params.c:
        raise ContractError(f"expected {2 * params.c} channels, got {f_a.shape[0]}")
    squeezed = nn.relu(params.channel_fc1(nn.global_avg_pool(f_a)))
    gates = nn.sigmoid(params.channel_fc2(squeezed))
    return nn.mul(f_a, nn.reshape(gates, (2 * params.c, 1, 1)))


def shared_branch_input(rtil: nn.Tensor, ntil: nn.Tensor) -> nn.Tensor:
    """Elementwise product: activates jointly emphasized elements."""
    return nn.mul(rtil, ntil)


def distinct_branch_input(rtil: nn.Tensor, ntil: nn.Tensor) -> nn.Tensor:
    """Elementwise subtraction: activates single-modality elements."""
    return nn.sub(rtil, ntil)


def contrast(f_tilde: nn.Tensor, params: FusionParams,
             training: bool = False) -> nn.Tensor:
    """Contrast descriptor of a sigmoid-normalized (2C,H,W) map.

    Product and subtraction branches each pass through conv+norm+sigmoid,
    are concatenated, and are projected back to C channels in (0,1).
    """
    f_tilde = nn.as_tensor(f_tilde)
    c = params.c
    if f_tilde.shape[0] != 2 * c:
        raise ContractError(f"expected {2 * c} channels, got {f_tilde.shape[0]}")
    lo, hi = f_tilde.data.min(), f_tilde.data.max()
    if lo < -RANGE_TOL or hi > 1.0 + RANGE_TOL:
        raise ContractError(
            f"contrast input must be sigmoid-normalized to (0,1); saw [{lo}, {hi}]")
    rtil = nn.narrow_channels(f_tilde, 0, c)
    ntil = nn.narrow_channels(f_tilde, c, 2 * c)
    shared = params.shared_head(shared_branch_input(rtil, ntil), training)
    distinct = params.distinct_head(distinct_branch_input(rtil, ntil), training)
    return nn.sigmoid(params.contrast_proj(nn.concat_channels([shared, distinct])))


def affinity(h_s: nn.Tensor, h_c: nn.Tensor) -> nn.Tensor:
    """Per-element recalibration weights in (0,1), shape (C,H,W).

    Both descriptors are flattened to (C, HW); a channel-affinity matrix
    G = sigmoid(S Cm^T / sqrt(HW)) redistributes the spatial descriptor,
    and a second sigmoid (scaled by sqrt(C), the contraction length) maps
    the result back onto the open unit interval.
    """
    h_s, h_c = nn.as_tensor(h_s), nn.as_tensor(h_c)
    if h_s.shape != h_c.shape:
        raise ContractError(f"descriptor shapes differ: {h_s.shape} vs {h_c.shape}")
    c, h, w = h_s.shape
    s = nn.reshape(h_s, (c, h * w))
    cm = nn.reshape(h_c, (c, h * w))
    g = nn.sigmoid(nn.scale(nn.matmul(s, nn.transpose2d(cm)), 1.0 / np.sqrt(h * w)))
    vol = nn.sigmoid(nn.scale(nn.matmul(g, s), 1.0 / np.sqrt(c)))
    return nn.reshape(vol, (c, h, w))


def recalibrate(pair: FeaturePair, vol: nn.Tensor, params: FusionParams):
    """Weight both maps by the affinity volume and fuse.

    Returns (fused, recal_rgb, recal_normal); the recalibrated branches
    feed the next encoder stage.
    """
    params.check_pair(pair)
    vol = nn.as_tensor(vol)
    if vol.shape != pair.rgb.shape:
        raise ContractError(f"affinity shape {vol.shape} != features {pair.rgb.shape}")
    recal_r = params.recal_rgb(nn.mul(pair.rgb, vol))
    recal_n = params.recal_normal(nn.mul(pair.normal, vol))
    fused = params.fuse(nn.concat_channels([recal_r, recal_n]))
    return fused, recal_r, recal_n


def _standin_descriptor(f_tilde: nn.Tensor, c: int) -> nn.Tensor:
    """Parameter-free descriptor used when the contrast block is disabled:
    the mean of the two normalized halves, which stays in (0,1)."""
    rtil = nn.narrow_channels(f_tilde, 0, c)
    ntil = nn.narrow_channels(f_tilde, c, 2 * c)
    return nn.scale(nn.add(rtil, ntil), 0.5)


def hf2b_forward(pair: FeaturePair, params: FusionParams,
                 config: FusionConfig = FusionConfig(), training: bool = False):
    """Run the full block; returns (fused, recal_rgb, recal_normal).

    With ``baseline_sum`` (or every component switched off) the block
    degenerates to the plain elementwise sum, passing the inputs through
    unchanged for the next stage.
    """
    params.check_pair(pair)
    if config.baseline_sum or config.all_disabled:
        return nn.add(pair.rgb, pair.normal), pair.rgb, pair.normal

    raw = nn.concat_channels([pair.rgb, pair.normal])
    f_s = spatial_attention(pair, params) if config.spatial else raw
    f_a = atrous_aggregate(pair, params, training) if config.atrous else raw
    f_c = channel_attention(f_a, params) if config.channel else f_a

    if config.awfr:
        f_s_til = nn.sigmoid(f_s)
        f_c_til = nn.sigmoid(f_c)
        if config.hfcd:
            h_s = contrast(f_s_til, params, training)
            h_c = contrast(f_c_til, params, training)
        else:
            h_s = _standin_descriptor(f_s_til, params.c)
            h_c = _standin_descriptor(f_c_til, params.c)
        vol = affinity(h_s, h_c)
    else:
        vol = nn.Tensor(np.ones(pair.rgb.shape))
    return recalibrate(pair, vol, params)
