"""Hierarchical conditional VAE with a relaxable residual posterior.

Latent layers are indexed top to bottom: layer 0 is the coarsest resolution
and carries the class conditioning through a shifted prior mean; deeper
layers receive it through constant feature planes and, depending on the
variant, through AdaIN statistics or bottleneck concatenation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
from torch import Tensor, nn
import torch.nn.functional as F

from .blocks import BlockConfig, ResidualBlock, adain, condition_channels, hard_swish
from .stochastic import DiagGaussian, kl_elements, recenter_probability, reparam_sample

LOG_STD_CLAMP = 5.0
_STYLE_STD_BIAS = math.log(math.e - 1.0)  # softplus(bias) == 1


@dataclass
class ModelConfig:
    num_latent_layers: int = 4
    latent_resolutions: tuple = (4, 8, 16, 32)  # top to bottom
    latent_channels: int = 8
    base_channels: int = 32
    max_channel_mult: int = 4
    class_count: int = 2
    condition_scale: float = 5.0
    variant: str = "adain"  # adain | concat
    image_channels: int = 3
    image_size: int = 32
    block_depth: int = 2
    bn_momentum: float = 0.95
    se_reduction: int = 4

    def __post_init__(self):
        self.latent_resolutions = tuple(int(r) for r in self.latent_resolutions)
        if self.num_latent_layers < 2:
            raise ValueError("need at least 2 latent layers")
        if len(self.latent_resolutions) != self.num_latent_layers:
            raise ValueError("one resolution per latent layer required")
        for lo, hi in zip(self.latent_resolutions, self.latent_resolutions[1:]):
            if hi != 2 * lo:
                raise ValueError(f"latent resolutions must double: {self.latent_resolutions}")
        if self.latent_resolutions[-1] != self.image_size:
            raise ValueError("bottom latent resolution must equal the image size")
        if self.latent_channels < self.class_count - 1:
            raise ValueError("top latent needs at least class_count - 1 channels")
        if self.variant not in ("adain", "concat"):
            raise ValueError(f"unknown variant {self.variant!r}")

    def feature_channels(self, resolution: int) -> int:
        mult = min(self.image_size // resolution, self.max_channel_mult)
        return self.base_channels * mult

    def to_dict(self) -> dict:
        return {
            "num_latent_layers": self.num_latent_layers,
            "latent_resolutions": ",".join(str(r) for r in self.latent_resolutions),
            "latent_channels": self.latent_channels,
            "base_channels": self.base_channels,
            "max_channel_mult": self.max_channel_mult,
            "class_count": self.class_count,
            "condition_scale": self.condition_scale,
            "variant": self.variant,
            "image_channels": self.image_channels,
            "image_size": self.image_size,
            "block_depth": self.block_depth,
            "bn_momentum": self.bn_momentum,
            "se_reduction": self.se_reduction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            num_latent_layers=int(d["num_latent_layers"]),
            latent_resolutions=tuple(int(r) for r in str(d["latent_resolutions"]).split(",")),
            latent_channels=int(d["latent_channels"]),
            base_channels=int(d["base_channels"]),
            max_channel_mult=int(d["max_channel_mult"]),
            class_count=int(d["class_count"]),
            condition_scale=float(d["condition_scale"]),
            variant=str(d["variant"]),
            image_channels=int(d["image_channels"]),
            image_size=int(d["image_size"]),
            block_depth=int(d["block_depth"]),
            bn_momentum=float(d["bn_momentum"]),
            se_reduction=int(d["se_reduction"]),
        )


@dataclass
class ConditionVector:
    """Classifier probabilities attached to a sample, raw and recentered."""

    raw: Tensor
    recentered: Tensor
    source: str = "classifier"  # classifier | intervention

    def __post_init__(self):
        for name, vec in (("raw", self.raw), ("recentered", self.recentered)):
            if vec.ndim != 1:
                raise ValueError(f"{name} must be a vector, got shape {tuple(vec.shape)}")
            if vec.min().item() < -1e-7:
                raise ValueError(f"{name} has negative entries")
            if abs(vec.sum().item() - 1.0) > 1e-5:
                raise ValueError(f"{name} does not sum to 1: {vec.sum().item():.6f}")
        if self.raw.shape != self.recentered.shape:
            raise ValueError("raw and recentered lengths differ")
        if self.source not in ("classifier", "intervention"):
            raise ValueError(f"unknown source {self.source!r}")

    @property
    def class_count(self) -> int:
        return self.raw.shape[0]

    @classmethod
    def from_raw(cls, raw, times: int = 2, source: str = "classifier") -> "ConditionVector":
        raw_t = torch.as_tensor(raw, dtype=torch.float32).detach().cpu()
        rec = recenter_probability(raw_t.numpy().astype(np.float64), times=times)
        rec = rec / rec.sum()
        return cls(raw_t, torch.tensor(rec, dtype=torch.float32), source)


@dataclass
class LatentLayerState:
    """Per-layer record of one top-down pass."""

    prior: DiagGaussian
    delta: Optional[DiagGaussian]
    posterior: DiagGaussian
    z: Tensor
    kl: Tensor  # per-sample nats


@dataclass
class ForwardTrace:
    reconstruction: Tensor
    layers: list
    h_features: Optional[list]
    d_features: list
    d0: Tensor

    def total_kl(self) -> Tensor:
        """Per-sample KL summed over layers."""
        return torch.stack([layer.kl for layer in self.layers], dim=0).sum(dim=0)

    def kl_per_layer(self) -> list:
        """Batch-mean KL of each layer, top first."""
        return [layer.kl.mean() for layer in self.layers]


def effective_posterior(prior: DiagGaussian, delta: DiagGaussian, r: float, k: int) -> DiagGaussian:
    """Posterior parameters = prior parameters + r^k * delta.

    r = 1 restores the full residual posterior; r = 0 collapses every layer
    k >= 1 onto its prior while layer 0 keeps its residual (r^0 == 1,
    including 0^0 := 1).
    """
    if not (0.0 <= r <= 1.0):
        raise ValueError(f"relaxation must lie in [0, 1], got {r}")
    if k < 0:
        raise ValueError(f"layer index must be >= 0, got {k}")
    scale = float(r) ** k  # python defines 0.0 ** 0 == 1.0
    if scale == 0.0:
        return DiagGaussian(prior.mean, prior.log_std)
    return prior.shift(delta.mean, delta.log_std, scale)


NoiseSource = Union[None, int, float, torch.Generator, Sequence[Tensor]]


def _soft_clamp(x: Tensor, limit: float = LOG_STD_CLAMP) -> Tensor:
    return limit * torch.tanh(x / limit)


class _GaussianHead(nn.Module):
    """3x3 conv emitting mean and soft-clamped log-std."""

    def __init__(self, in_channels: int, latent_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, 2 * latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x: Tensor) -> DiagGaussian:
        mean, raw_log_std = self.conv(x).chunk(2, dim=1)
        return DiagGaussian(mean, _soft_clamp(raw_log_std))


class _DeltaNet(nn.Module):
    """Residual offsets from the concatenated encoder feature and decoder context."""

    def __init__(self, in_channels: int, hidden: int, latent_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.head = _GaussianHead(hidden, latent_channels)

    def forward(self, h: Tensor, ctx: Tensor) -> DiagGaussian:
        return self.head(hard_swish(self.conv(torch.cat([h, ctx], dim=1))))


class _BottleneckResidual(nn.Module):
    """1x1 reduce -> 3x3 -> 1x1 expand with a projected skip."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        hidden = max(out_channels // 2, 4)
        self.reduce = nn.Conv2d(in_channels, hidden, 1)
        self.conv = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.expand = nn.Conv2d(hidden, out_channels, 1)
        self.skip = (nn.Conv2d(in_channels, out_channels, 1)
                     if in_channels != out_channels else None)

    def forward(self, x: Tensor) -> Tensor:
        h = hard_swish(self.reduce(x))
        h = hard_swish(self.conv(h))
        h = self.expand(h)
        return h + (self.skip(x) if self.skip is not None else x)


class _AdainPrior(nn.Module):
    """Prior net: previous latent sets the channel statistics of the context."""

    def __init__(self, ctx_channels: int, latent_channels: int):
        super().__init__()
        self.style = nn.Linear(latent_channels, 2 * ctx_channels)
        nn.init.zeros_(self.style.weight)
        with torch.no_grad():
            self.style.bias.zero_()
            self.style.bias[ctx_channels:].fill_(_STYLE_STD_BIAS)
        self.conv = nn.Conv2d(ctx_channels, ctx_channels, 3, padding=1)
        self.head = _GaussianHead(ctx_channels, latent_channels)

    def forward(self, ctx: Tensor, z_prev: Tensor) -> DiagGaussian:
        style = self.style(z_prev.mean(dim=(2, 3)))
        mean, raw_std = style.chunk(2, dim=1)
        styled = adain(ctx, mean, F.softplus(raw_std) + 1e-4)
        return self.head(hard_swish(self.conv(styled)))


class _ConcatPrior(nn.Module):
    """Prior net: previous latent concatenated through a bottleneck residual."""

    def __init__(self, ctx_channels: int, latent_channels: int):
        super().__init__()
        self.block = _BottleneckResidual(ctx_channels + latent_channels, ctx_channels)
        self.head = _GaussianHead(ctx_channels, latent_channels)

    def forward(self, ctx: Tensor, z_prev: Tensor) -> DiagGaussian:
        z_up = F.interpolate(z_prev, size=ctx.shape[-2:], mode="bilinear", align_corners=False)
        return self.head(self.block(torch.cat([ctx, z_up], dim=1)))


class VAEX(nn.Module):
    """Bottom-up encoder, top-down decoder and the latent chain between them."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        cfg = config
        K = cfg.num_latent_layers
        cond = cfg.class_count - 1
        res = cfg.latent_resolutions
        ch = [cfg.feature_channels(r) for r in res]  # channels per level, top first
        zch = cfg.latent_channels

        def block(cin, cout, change="none", depth=None):
            return ResidualBlock(BlockConfig(
                cin, cout, resolution_change=change,
                depth=depth if depth is not None else cfg.block_depth,
                bn_momentum=cfg.bn_momentum, se_reduction=cfg.se_reduction))

        # bottom-up path: stem at image resolution, then one block per level,
        # downsampling between levels
        self.stem = nn.Conv2d(cfg.image_channels + cond, ch[-1], 3, padding=1)
        enc = []
        for j in range(1, K + 1):
            level = K - j  # latent level this feature serves
            cin = ch[level + 1] if level + 1 < K else ch[-1]
            enc.append(block(cin, ch[level], change="none" if j == 1 else "down"))
        self.enc_blocks = nn.ModuleList(enc)

        # top-down path
        self.d0 = nn.Parameter(0.01 * torch.randn(ch[0], res[0], res[0]))
        self.delta_nets = nn.ModuleList(
            [_DeltaNet(2 * ch[k], ch[k], zch) for k in range(K)])
        prior_cls = _AdainPrior if cfg.variant == "adain" else _ConcatPrior
        self.prior_nets = nn.ModuleList(
            [prior_cls(ch[k], zch) for k in range(1, K)])
        self.up_ctx = nn.ModuleList(
            [block(ch[k - 1] + cond, ch[k], change="up") for k in range(1, K)])
        self.d_combine = nn.ModuleList(
            [nn.Conv2d(ch[k] + zch, ch[k], 1) for k in range(1, K)])
        self.d_blocks = nn.ModuleList(
            [block(ch[k], ch[k], depth=1) for k in range(1, K)])

        self.out_combine = nn.Conv2d(ch[-1] + zch, ch[-1], 1)
        self.out_block = block(ch[-1], ch[-1])
        self.out_conv = nn.Conv2d(ch[-1], cfg.image_channels, 3, padding=1)

    # -- conditioning helpers ------------------------------------------------

    def _condition_tensor(self, xi, batch: int, device, dtype) -> Tensor:
        """Recentered probabilities as a (batch, class_count) tensor."""
        values = getattr(xi, "recentered", xi)
        values = torch.as_tensor(values, dtype=dtype, device=device)
        if values.ndim == 1:
            values = values.unsqueeze(0).expand(batch, -1)
        if values.shape != (batch, self.config.class_count):
            raise ValueError(
                f"conditioning shape {tuple(values.shape)} != ({batch}, {self.config.class_count})")
        return values

    def _top_prior(self, xi_values: Tensor) -> DiagGaussian:
        cfg = self.config
        batch = xi_values.shape[0]
        shape = (batch, cfg.latent_channels, cfg.latent_resolutions[0], cfg.latent_resolutions[0])
        mean = torch.zeros(shape, dtype=xi_values.dtype, device=xi_values.device)
        cond = cfg.class_count - 1
        mean[:, :cond] = (cfg.condition_scale * xi_values[:, :cond])[:, :, None, None]
        return DiagGaussian(mean, torch.zeros_like(mean))

    # -- noise plumbing ------------------------------------------------------

    def _draw_noise(self, shape, noise: NoiseSource, index: int, ref: Tensor) -> Tensor:
        if noise is None:
            return torch.randn(shape, dtype=ref.dtype, device=ref.device)
        if isinstance(noise, torch.Generator):
            return torch.randn(shape, generator=noise, dtype=ref.dtype, device=ref.device)
        if isinstance(noise, (int, float)):
            if noise != 0:
                raise ValueError("scalar noise must be 0 (deterministic pass)")
            return torch.zeros(shape, dtype=ref.dtype, device=ref.device)
        drawn = noise[index]
        if drawn.shape != shape:
            raise ValueError(f"noise[{index}] shape {tuple(drawn.shape)} != {tuple(shape)}")
        return drawn.to(dtype=ref.dtype, device=ref.device)

    # -- forward passes ------------------------------------------------------

    def encode_bottom_up(self, x: Tensor, xi) -> list:
        """Feature maps from image resolution down to the top latent resolution."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.image_channels, cfg.image_size, cfg.image_size):
            raise ValueError(
                f"expected images of shape (B, {cfg.image_channels}, {cfg.image_size}, "
                f"{cfg.image_size}), got {tuple(x.shape)}")
        xi_values = self._condition_tensor(xi, x.shape[0], x.device, x.dtype)
        h = self.stem(condition_channels(x, xi_values))
        feats = [h]
        for blk in self.enc_blocks:
            h = blk(h)
            feats.append(h)
        return feats

    def decode_top_down(self, h: Optional[list], xi, r: float = 1.0,
                        temperature: float = 1.0, noise: NoiseSource = None,
                        batch: Optional[int] = None,
                        z0_transform: Optional[Callable[[Tensor], Tensor]] = None) -> ForwardTrace:
        """Run the generative chain, optionally guided by encoder features.

        Without `h` every layer samples its conditional prior (pure
        generation). `z0_transform`, when given, rewrites the top latent
        right after it is drawn.
        """
        cfg = self.config
        K = cfg.num_latent_layers
        if h is not None and len(h) != K + 1:
            raise ValueError(f"expected {K + 1} encoder features, got {len(h)}")
        if h is not None:
            batch = h[0].shape[0]
        elif batch is None:
            xi_t = getattr(xi, "recentered", xi)
            batch = xi_t.shape[0] if getattr(xi_t, "ndim", 1) == 2 else 1
        ref = h[0] if h is not None else self.d0
        xi_values = self._condition_tensor(xi, batch, ref.device, ref.dtype)

        layers = []
        d_feats = []
        d = self.d0.unsqueeze(0).expand(batch, -1, -1, -1)

        prior = self._top_prior(xi_values)
        ctx = d
        delta = self.delta_nets[0](h[K], ctx) if h is not None else None
        posterior = effective_posterior(prior, delta, r, 0) if delta is not None else prior
        eps = self._draw_noise(posterior.mean.shape, noise, 0, ref)
        z = reparam_sample(posterior, eps, temperature)
        if z0_transform is not None:
            z = z0_transform(z)
        kl = kl_elements(posterior, prior).sum(dim=(1, 2, 3))
        layers.append(LatentLayerState(prior, delta, posterior, z, kl))
        d_feats.append(d)

        for k in range(1, K):
            ctx = self.up_ctx[k - 1](condition_channels(d, xi_values))
            prior = self.prior_nets[k - 1](ctx, z)
            delta = self.delta_nets[k](h[K - k], ctx) if h is not None else None
            posterior = effective_posterior(prior, delta, r, k) if delta is not None else prior
            eps = self._draw_noise(posterior.mean.shape, noise, k, ref)
            z_new = reparam_sample(posterior, eps, temperature)
            kl = kl_elements(posterior, prior).sum(dim=(1, 2, 3))
            layers.append(LatentLayerState(prior, delta, posterior, z_new, kl))

            z_up = F.interpolate(z, size=ctx.shape[-2:], mode="bilinear", align_corners=False)
            d = self.d_blocks[k - 1](self.d_combine[k - 1](torch.cat([ctx, z_up], dim=1)))
            d_feats.append(d)
            z = z_new

        out = self.out_combine(torch.cat([d, z], dim=1))
        out = self.out_block(out)
        recon = torch.sigmoid(self.out_conv(hard_swish(out)))
        return ForwardTrace(recon, layers, h, d_feats, self.d0)

    def reconstruct(self, x: Tensor, xi, r: float = 1.0, temperature: float = 1.0,
                    noise: NoiseSource = 0,
                    z0_transform: Optional[Callable[[Tensor], Tensor]] = None) -> ForwardTrace:
        """Encode then decode; noise 0 gives the deterministic reconstruction."""
        feats = self.encode_bottom_up(x, xi)
        return self.decode_top_down(feats, xi, r=r, temperature=temperature,
                                    noise=noise, z0_transform=z0_transform)

    def generate(self, xi, batch: int = 1, temperature: float = 1.0,
                 noise: NoiseSource = None) -> Tensor:
        """Sample images from the conditional prior chain."""
        return self.decode_top_down(None, xi, temperature=temperature,
                                    noise=noise, batch=batch).reconstruction
