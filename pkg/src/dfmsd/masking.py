"""Teacher-derived dual attention, feature masks, and reconstruction blocks.

Channel attention scores each channel by its spatially averaged activation;
spatial attention scores each position by its channel-wise squared L2 norm,
both squashed through a temperature-scaled sigmoid. Masks zero the
highest-attention channels/positions so the generation block has to
regenerate the object-aware content.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import FeatureMap


@dataclass(frozen=True, eq=False)
class AttentionPair:
    """Channel (C×1×1) and spatial (1×H×W) attention for one pyramid level."""

    channel: torch.Tensor
    spatial: torch.Tensor

    def __post_init__(self):
        if self.channel.ndim != 3 or self.channel.shape[1:] != (1, 1):
            raise ValueError(f"channel attention must be C×1×1, got {tuple(self.channel.shape)}")
        if self.spatial.ndim != 3 or self.spatial.shape[0] != 1:
            raise ValueError(f"spatial attention must be 1×H×W, got {tuple(self.spatial.shape)}")
        for name, t in (("channel", self.channel), ("spatial", self.spatial)):
            if bool((t < 0).any()) or bool((t > 1).any()):
                raise ValueError(f"{name} attention entries must lie in (0,1)")


@dataclass(frozen=True, eq=False)
class DualMask:
    """Binary keep-masks (0 = masked) plus the masking ratio that built them."""

    spatial_mask: torch.Tensor  # 1×H×W
    channel_mask: torch.Tensor  # C×1×1
    rho: float

    def __post_init__(self):
        for name, t in (("spatial_mask", self.spatial_mask), ("channel_mask", self.channel_mask)):
            if not bool(((t == 0) | (t == 1)).all()):
                raise ValueError(f"{name} must be binary")
        n_sp = self.spatial_mask.numel()
        n_ch = self.channel_mask.numel()
        if int((self.spatial_mask == 0).sum()) != round(self.rho * n_sp):
            raise ValueError("spatial mask cardinality does not match round(rho*H*W)")
        if int((self.channel_mask == 0).sum()) != round(self.rho * n_ch):
            raise ValueError("channel mask cardinality does not match round(rho*C)")


def channel_attention(teacher_feat: FeatureMap, tau: float) -> torch.Tensor:
    """Per-channel attention: sigmoid of the spatial mean scaled by 1/tau."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    x = teacher_feat.data
    return torch.sigmoid(x.mean(dim=(1, 2)) / tau).reshape(-1, 1, 1)


def spatial_attention(
    teacher_feat: FeatureMap, tau: float, target_hw: tuple[int, int] | None = None
) -> torch.Tensor:
    """Per-position attention: sigmoid of the squared L2 norm over channels / (C*tau).

    When ``target_hw`` differs from the source size the map is bilinearly
    resampled so teacher and student grids line up; otherwise the alignment
    step is the identity.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    x = teacher_feat.data
    c = x.shape[0]
    att = torch.sigmoid((x * x).sum(dim=0) / (c * tau)).unsqueeze(0)
    if target_hw is not None and tuple(att.shape[1:]) != tuple(target_hw):
        att = F.interpolate(
            att.unsqueeze(0), size=tuple(target_hw), mode="bilinear", align_corners=False
        ).squeeze(0)
    return att


def compute_attention(
    teacher_feat: FeatureMap, tau: float, target_hw: tuple[int, int] | None = None
) -> AttentionPair:
    return AttentionPair(
        channel=channel_attention(teacher_feat, tau),
        spatial=spatial_attention(teacher_feat, tau, target_hw=target_hw),
    )


def _top_mask(scores: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """1D keep-mask zeroing the ``count`` highest scores, random tie-break."""
    mask = np.ones(scores.size, dtype=np.float32)
    if count > 0:
        order = np.lexsort((rng.permutation(scores.size), -scores))
        mask[order[:count]] = 0.0
    return mask


def build_masks(att: AttentionPair, rho: float, seed: int) -> DualMask:
    """Mask the round(rho*H*W) highest-attention positions and round(rho*C) channels.

    Ties are broken by a seeded random permutation so flat attention maps do
    not produce spatially biased masks; the same seed always yields the same
    mask.
    """
    if not (0.0 < rho < 1.0):
        raise ValueError(f"rho out of (0,1): {rho}")
    rng = np.random.default_rng(seed)
    sp_scores = att.spatial.detach().cpu().double().numpy().reshape(-1)
    ch_scores = att.channel.detach().cpu().double().numpy().reshape(-1)
    sp_mask = _top_mask(sp_scores, round(rho * sp_scores.size), rng)
    ch_mask = _top_mask(ch_scores, round(rho * ch_scores.size), rng)
    dtype = att.spatial.dtype
    return DualMask(
        spatial_mask=torch.from_numpy(sp_mask).to(dtype).reshape(att.spatial.shape),
        channel_mask=torch.from_numpy(ch_mask).to(dtype).reshape(att.channel.shape),
        rho=rho,
    )


def apply_mask(student_feat: FeatureMap, mask: DualMask) -> FeatureMap:
    """Zero the masked positions and channels of a student feature map."""
    c, h, w = student_feat.data.shape
    if tuple(mask.spatial_mask.shape[1:]) != (h, w) or mask.channel_mask.shape[0] != c:
        raise ValueError(
            f"mask shape mismatch: feature {c}x{h}x{w}, spatial "
            f"{tuple(mask.spatial_mask.shape)}, channel {tuple(mask.channel_mask.shape)}"
        )
    sp = mask.spatial_mask.to(student_feat.data.dtype)
    ch = mask.channel_mask.to(student_feat.data.dtype)
    return FeatureMap(level_id=student_feat.level_id, data=student_feat.data * sp * ch)


class FeatureReconstructor(nn.Module):
    """Generation block that regenerates masked student features.

    Channel recalibration (global average pool -> bottleneck -> per-channel
    sigmoid gate) followed by two 3x3 convolutions with a ReLU between.
    Accepts C×H×W or B×C×H×W input and preserves the shape.
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.squeeze = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, channels),
        )
        self.generate = nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x.unsqueeze(0)
        gate = torch.sigmoid(self.squeeze(x.mean(dim=(2, 3))))
        out = self.generate(x * gate[:, :, None, None])
        return out.squeeze(0) if squeeze else out


class ChannelProjector(nn.Module):
    """1x1 convolution aligning student channels with teacher channels.

    Initialized to the identity when the channel counts already match, so a
    fresh projector does not add distillation error at step one.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=1)
        if in_channels == out_channels:
            with torch.no_grad():
                self.conv.weight.zero_()
                for i in range(in_channels):
                    self.conv.weight[i, i, 0, 0] = 1.0
                self.conv.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x.unsqueeze(0)
        out = self.conv(x)
        return out.squeeze(0) if squeeze else out


def project_features(projector: ChannelProjector, feat: FeatureMap) -> FeatureMap:
    return FeatureMap(level_id=feat.level_id, data=projector(feat.data))
