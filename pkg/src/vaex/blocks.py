"""Convolutional building blocks: residual units, squeeze-excitation, AdaIN,
constant-plane conditioning.

All blocks keep the batch dimension intact and change resolution only by
exact factors of two.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn
import torch.nn.functional as F

ADAIN_EPS = 1e-5


def hard_swish(x: Tensor) -> Tensor:
    """Elementwise x * clamp(x + 3, 0, 6) / 6."""
    return x * torch.clamp(x + 3.0, 0.0, 6.0) / 6.0


class SqueezeExcite(nn.Module):
    """Global-pool channel gating; output shape equals input shape."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if channels % reduction != 0:
            raise ValueError(f"reduction {reduction} must divide channels {channels}")
        hidden = channels // reduction
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gate(self, x: Tensor) -> Tensor:
        pooled = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)[:, :, None, None]


@dataclass
class BlockConfig:
    in_channels: int
    out_channels: int
    resolution_change: str = "none"  # none | down | up
    depth: int = 2
    bn_momentum: float = 0.95  # fraction of running statistics retained per batch
    se_reduction: int = 4

    def __post_init__(self):
        if self.resolution_change not in ("none", "down", "up"):
            raise ValueError(f"unknown resolution_change {self.resolution_change!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")


class ResidualBlock(nn.Module):
    """[BatchNorm -> hard-Swish -> Conv/Deconv] x depth -> SqueezeExcite, added to a skip path.

    The first conv carries the resolution change (stride-2 conv down,
    deconvolution up); the skip path is resized by bilinear interpolation and
    channel-matched by a 1x1 projection when needed.
    """

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        torch_momentum = 1.0 - cfg.bn_momentum
        norms, convs = [], []
        c = cfg.in_channels
        for i in range(cfg.depth):
            norms.append(nn.BatchNorm2d(c, momentum=torch_momentum))
            if i == 0 and cfg.resolution_change == "up":
                convs.append(nn.ConvTranspose2d(c, cfg.out_channels, 3, stride=2,
                                                padding=1, output_padding=1))
            elif i == 0 and cfg.resolution_change == "down":
                convs.append(nn.Conv2d(c, cfg.out_channels, 3, stride=2, padding=1))
            else:
                convs.append(nn.Conv2d(c, cfg.out_channels, 3, padding=1))
            c = cfg.out_channels
        self.norms = nn.ModuleList(norms)
        self.convs = nn.ModuleList(convs)
        self.se = SqueezeExcite(cfg.out_channels, cfg.se_reduction)
        self.skip_proj = (nn.Conv2d(cfg.in_channels, cfg.out_channels, 1)
                          if cfg.in_channels != cfg.out_channels else None)

    def skip(self, x: Tensor) -> Tensor:
        if self.cfg.resolution_change == "up":
            x = F.interpolate(x, scale_factor=2.0, mode="bilinear", align_corners=False)
        elif self.cfg.resolution_change == "down":
            x = F.interpolate(x, scale_factor=0.5, mode="bilinear", align_corners=False)
        if self.skip_proj is not None:
            x = self.skip_proj(x)
        return x

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for norm, conv in zip(self.norms, self.convs):
            h = conv(hard_swish(norm(h)))
        return self.se(h) + self.skip(x)


def adain(content: Tensor, style_mean: Tensor, style_std: Tensor, eps: float = ADAIN_EPS) -> Tensor:
    """Re-statisticize per-channel spatial mean/std of `content` to the style values.

    Styles are (C,) or (B, C); std must be positive.
    """
    if style_mean.shape != style_std.shape:
        raise ValueError("style_mean and style_std shapes differ")
    if style_mean.shape[-1] != content.shape[1]:
        raise ValueError(
            f"style channels {style_mean.shape[-1]} != content channels {content.shape[1]}")
    mean = content.mean(dim=(2, 3), keepdim=True)
    std = content.std(dim=(2, 3), keepdim=True, unbiased=False)
    if style_mean.ndim == 1:
        style_mean = style_mean.unsqueeze(0)
        style_std = style_std.unsqueeze(0)
    style_mean = style_mean[:, :, None, None]
    style_std = style_std[:, :, None, None]
    return style_std * (content - mean) / (std + eps) + style_mean


def condition_channels(f: Tensor, xi) -> Tensor:
    """Append one spatially constant plane per class c < C-1 holding xi_c.

    `xi` is a (C,) or (B, C) probability tensor, or any object exposing a
    `recentered` tensor of that shape.
    """
    values = getattr(xi, "recentered", xi)
    if not isinstance(values, Tensor):
        values = torch.as_tensor(values, dtype=f.dtype)
    values = values.to(dtype=f.dtype, device=f.device)
    if values.ndim == 1:
        values = values.unsqueeze(0).expand(f.shape[0], -1)
    if values.shape[0] != f.shape[0]:
        raise ValueError(f"batch mismatch: {values.shape[0]} vs {f.shape[0]}")
    planes = values[:, :-1, None, None].expand(-1, -1, f.shape[2], f.shape[3])
    return torch.cat([f, planes], dim=1)
