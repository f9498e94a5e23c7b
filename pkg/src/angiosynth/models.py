"""Generator and discriminator networks.

Layout of one generator (both levels use the same definition)::

    init -> down x n -> [fusion with coarse patch] -> residual x r
         -> up x n (skips, the deepest ``attention_levels`` passed through
            attention transmit) -> 7x7 conv -> tanh

Images are [-1, 1] inside the networks.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

LEAK = 0.2


@dataclass(frozen=True)
class GeneratorConfig:
    fine_downs: int = 3
    coarse_downs: int = 2
    base_channels: int = 64
    residual_blocks: int = 3
    attention_heads: int = 4
    use_attention: bool = True
    coarse_factor: int = 4
    norm: str = "instance"
    attention_levels: int = 2
    attention_pool: int = 4
    disc_channels: int = 64
    disc_depth: int = 4
    share_weights: bool = False
    channel_cap: int = 1024

    def validate(self) -> None:
        if self.fine_downs < 1 or self.coarse_downs < 1:
            raise ConfigError("fine_downs and coarse_downs must be >= 1")
        if self.base_channels < 1 or self.residual_blocks < 0:
            raise ConfigError("base_channels must be >= 1 and residual_blocks >= 0")
        if self.norm not in ("instance", "batch"):
            raise ConfigError(f"norm must be 'instance' or 'batch', got {self.norm!r}")
        if self.coarse_factor < 2:
            raise ConfigError("coarse_factor must be >= 2")
        widest = self.base_channels * 2 ** max(self.fine_downs, self.coarse_downs)
        if widest > self.channel_cap:
            raise ConfigError(f"bottleneck width {widest} exceeds channel_cap {self.channel_cap}")
        if self.use_attention:
            if self.attention_heads < 1 or self.attention_pool < 1 or self.attention_levels < 0:
                raise ConfigError("attention_heads/attention_pool must be >= 1")
            for downs in (self.fine_downs, self.coarse_downs):
                for level in attention_skip_levels(downs, self.attention_levels):
                    ch = self.base_channels * 2 ** level
                    if ch % self.attention_heads:
                        raise ConfigError(
                            f"{self.attention_heads} attention heads do not divide "
                            f"{ch} skip channels"
                        )
        if self.disc_channels < 1 or self.disc_depth < 1:
            raise ConfigError("disc_channels and disc_depth must be >= 1")

    @property
    def variant(self) -> str:
        return "M_A" if self.use_attention else "M_NA"

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def attention_skip_levels(downs: int, n_levels: int) -> list[int]:
    """Skip levels (0 = full resolution) that get attention: the deepest ones."""
    return list(range(max(downs - n_levels, 0), downs))


def norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    return nn.InstanceNorm2d(channels, affine=False)


# ----------------------------------------------------------------------- blocks

class InitBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.pad = nn.ReflectionPad2d(3)
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size=7)
        self.act = nn.LeakyReLU(LEAK)

    def forward(self, x):
        return self.act(self.conv(self.pad(x)))


class DownBlock(nn.Module):
    def __init__(self, in_ch, norm="instance"):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, 2 * in_ch, kernel_size=3, stride=2, padding=1, bias=False)
        self.norm = norm_layer(norm, 2 * in_ch)
        self.act = nn.LeakyReLU(LEAK)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"down_block needs even spatial dims, got {h}x{w}")
        return self.act(self.norm(self.conv(x)))


class ResidualBlock(nn.Module):
    def __init__(self, ch, norm="instance"):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, kernel_size=3, bias=False),
            norm_layer(norm, ch),
            nn.LeakyReLU(LEAK),
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, kernel_size=3, bias=False),
            norm_layer(norm, ch),
        )

    def forward(self, x):
        return x + self.body(x)


class AttentionTransmit(nn.Module):
    """Convolution followed by multi-head self-attention over spatial positions.

    Keys and values are average-pooled by ``pool`` so memory grows as
    ``HW * HW / pool**2`` instead of ``(HW)**2``. The attended signal is added
    back onto the skip.
    """

    def __init__(self, ch, heads=4, pool=4):
        super().__init__()
        if ch % heads:
            raise ConfigError(f"{heads} heads do not divide {ch} channels")
        self.heads = heads
        self.pool = pool
        self.local = nn.Sequential(nn.Conv2d(ch, ch, kernel_size=3, padding=1), nn.LeakyReLU(LEAK))
        self.query = nn.Conv2d(ch, ch, kernel_size=1)
        # A key bias shifts every score of a query row equally and cancels in softmax.
        self.key = nn.Conv2d(ch, ch, kernel_size=1, bias=False)
        self.value = nn.Conv2d(ch, ch, kernel_size=1)
        self.proj = nn.Conv2d(ch, ch, kernel_size=1)

    def _split(self, t):
        b, c, h, w = t.shape
        return t.reshape(b, self.heads, c // self.heads, h * w).transpose(-1, -2)

    def attend(self, x, return_weights=False):
        """Attention output (before projection) for features ``x``.

        With ``return_weights`` also returns the [B, heads, HW, hw] softmax map.
        """
        b, c, h, w = x.shape
        q = self._split(self.query(x))
        if self.pool > 1:
            kv = F.adaptive_avg_pool2d(x, (math.ceil(h / self.pool), math.ceil(w / self.pool)))
        else:
            kv = x
        k = self._split(self.key(kv))
        v = self._split(self.value(kv))
        if return_weights:
            scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
            weights = torch.softmax(scores, dim=-1)
            out = weights @ v
        else:
            out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(-1, -2).reshape(b, c, h, w)
        return (out, weights) if return_weights else out

    def forward(self, skip):
        return skip + self.proj(self.attend(self.local(skip)))


class UpBlock(nn.Module):
    """Transposed-conv upsample, merge with a (possibly attended) skip, fuse."""

    def __init__(self, in_ch, norm="instance", attention=None):
        super().__init__()
        out_ch = in_ch // 2
        self.up = nn.ConvTranspose2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1,
                                     output_padding=1, bias=False)
        self.up_norm = norm_layer(norm, out_ch)
        self.act = nn.LeakyReLU(LEAK)
        self.gate = attention
        self.fuse = nn.Conv2d(2 * out_ch, out_ch, kernel_size=3, padding=1, bias=False)
        self.fuse_norm = norm_layer(norm, out_ch)

    def forward(self, x, skip):
        h, w = x.shape[-2:]
        if skip.shape[-2:] != (2 * h, 2 * w) or skip.shape[1] != x.shape[1] // 2:
            raise ValueError(
                f"skip of shape {tuple(skip.shape[1:])} does not match up-sampled "
                f"({x.shape[1] // 2}, {2 * h}, {2 * w})"
            )
        y = self.act(self.up_norm(self.up(x)))
        if self.gate is not None:
            skip = self.gate(skip)
        return self.act(self.fuse_norm(self.fuse(torch.cat([y, skip], dim=1))))


class Fusion(nn.Module):
    """Depth-concatenate features with a 1-channel coarse patch; two conv layers."""

    def __init__(self, ch, coarse_ch=1):
        super().__init__()
        self.conv1 = nn.Conv2d(ch + coarse_ch, ch, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, kernel_size=3, padding=1)
        self.act = nn.LeakyReLU(LEAK)

    def forward(self, feats, coarse_patch):
        if feats.shape[-2:] != coarse_patch.shape[-2:]:
            raise ValueError(
                f"fusion inputs differ spatially: {tuple(feats.shape[-2:])} vs "
                f"{tuple(coarse_patch.shape[-2:])}"
            )
        x = torch.cat([feats, coarse_patch], dim=1)
        return self.act(self.conv2(self.act(self.conv1(x))))


# ------------------------------------------------------------------- generators

class Generator(nn.Module):
    def __init__(self, in_ch: int, downs: int, cfg: GeneratorConfig, fuse_coarse: bool = False):
        super().__init__()
        base = cfg.base_channels
        self.n_downs = downs
        self.init = InitBlock(in_ch, base)
        self.downs = nn.ModuleList(DownBlock(base * 2 ** i, cfg.norm) for i in range(downs))
        deep = base * 2 ** downs
        self.fusion = Fusion(deep) if fuse_coarse else None
        self.res = nn.Sequential(*(ResidualBlock(deep, cfg.norm) for _ in range(cfg.residual_blocks)))
        gated = set(attention_skip_levels(downs, cfg.attention_levels)) if cfg.use_attention else set()
        ups = []
        for level in reversed(range(downs)):
            att = (AttentionTransmit(base * 2 ** level, cfg.attention_heads, cfg.attention_pool)
                   if level in gated else None)
            ups.append(UpBlock(base * 2 ** (level + 1), cfg.norm, att))
        self.ups = nn.ModuleList(ups)
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(base, 1, kernel_size=7), nn.Tanh())

    def check_input(self, x):
        step = 2 ** self.n_downs
        h, w = x.shape[-2:]
        if h % step or w % step:
            raise ValueError(f"input {h}x{w} is not divisible by 2^{self.n_downs}={step}")

    def forward(self, x, coarse_patch=None):
        """Returns ``(image, features)``; features feed the output head."""
        self.check_input(x)
        skips = []
        y = self.init(x)
        for down in self.downs:
            skips.append(y)
            y = down(y)
        if self.fusion is not None:
            if coarse_patch is None:
                raise ValueError("fine generator needs the aligned coarse patch")
            if coarse_patch.shape[-2:] != x.shape[-2:]:
                raise ValueError(
                    f"coarse patch {tuple(coarse_patch.shape[-2:])} is not aligned with "
                    f"input {tuple(x.shape[-2:])}"
                )
            pooled = F.avg_pool2d(coarse_patch, 2 ** self.n_downs)
            y = self.fusion(y, pooled)
        y = self.res(y)
        for up, skip in zip(self.ups, reversed(skips)):
            y = up(y, skip)
        return self.head(y), y


class FeatureStack(NamedTuple):
    features: list
    logits: torch.Tensor


class PatchDiscriminator(nn.Module):
    """Conditional PatchGAN over the 4-channel (condition, image) stack."""

    def __init__(self, in_ch=4, base=64, depth=4, norm="instance", max_ch=512):
        super().__init__()
        layers = [nn.Sequential(nn.Conv2d(in_ch, base, 4, stride=2, padding=1), nn.LeakyReLU(LEAK))]
        ch = base
        for _ in range(depth - 1):
            nxt = min(ch * 2, max_ch)
            layers.append(nn.Sequential(
                nn.Conv2d(ch, nxt, 4, stride=2, padding=1, bias=False),
                norm_layer(norm, nxt),
                nn.LeakyReLU(LEAK),
            ))
            ch = nxt
        self.layers = nn.ModuleList(layers)
        self.out = nn.Conv2d(ch, 1, kernel_size=3, padding=1)

    @property
    def depth(self):
        return len(self.layers)

    def forward(self, cond, img) -> FeatureStack:
        if cond.shape[-2:] != img.shape[-2:]:
            raise ValueError(
                f"condition {tuple(cond.shape[-2:])} and image {tuple(img.shape[-2:])} differ"
            )
        x = torch.cat([cond, img], dim=1)
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return FeatureStack(feats, self.out(x))


def downsample(x, factor):
    """Bilinear down-sampling with an anti-alias prefilter."""
    h, w = x.shape[-2:]
    return F.interpolate(x, size=(h // factor, w // factor), mode="bilinear",
                         align_corners=False, antialias=True)


def upsample(x, size):
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class TwoLevelGAN(nn.Module):
    """Coarse and fine generators plus the discriminators D_C1, D_C2 and D_F."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.gen_coarse = Generator(3, cfg.coarse_downs, cfg)
        self.gen_fine = Generator(3, cfg.fine_downs, cfg, fuse_coarse=True)
        if cfg.share_weights:
            self.gen_fine.init = self.gen_coarse.init
            for i in range(min(cfg.fine_downs, cfg.coarse_downs)):
                self.gen_fine.downs[i] = self.gen_coarse.downs[i]
        d = dict(base=cfg.disc_channels, depth=cfg.disc_depth, norm=cfg.norm)
        self.d_c1 = PatchDiscriminator(**d)
        self.d_c2 = PatchDiscriminator(**d)
        self.d_f = PatchDiscriminator(**d)

    def generator_parameters(self):
        return list(self.gen_coarse.parameters()) + [
            p for p in self.gen_fine.parameters()
            if all(p is not q for q in self.gen_coarse.parameters())
        ]

    def discriminator_parameters(self):
        return [p for d in (self.d_c1, self.d_c2, self.d_f) for p in d.parameters()]

    def coarse_pass(self, source_full):
        """Run Gen_C on the down-sampled full image; returns (coarse input, output)."""
        x_c = downsample(source_full, self.cfg.coarse_factor)
        out, _ = self.gen_coarse(x_c)
        return x_c, out

    def fine_pass(self, source_patch, coarse_patch):
        out, _ = self.gen_fine(source_patch, coarse_patch)
        return out


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def config_dict(cfg: GeneratorConfig) -> dict:
    return asdict(cfg)
