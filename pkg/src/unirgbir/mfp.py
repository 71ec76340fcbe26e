"""Multi-modal feature pool: two-stream stem, multi-kernel SE fusion, pyramid tokens."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ImagePair, ModelConfig, MultiScaleTokens

FUSE_KERNELS = (3, 3, 5, 7)


@dataclass
class StemFeatures:
    f_rgb: torch.Tensor
    f_ir: torch.Tensor

    def __post_init__(self):
        if self.f_rgb.shape != self.f_ir.shape:
            raise ValueError(f"stem shapes differ: {tuple(self.f_rgb.shape)} vs {tuple(self.f_ir.shape)}")


class Stem(nn.Module):
    """ResNet stem: 7x7/2 conv, BN, ReLU, 3x3/2 max-pool (H/4 x W/4 x C)."""

    def __init__(self, in_chans: int, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_chans, channels, 7, stride=2, padding=3, bias=False)
        self.bn = nn.BatchNorm2d(channels)
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"stem input {h}x{w} must be divisible by 4")
        return self.pool(F.relu(self.bn(self.conv(x))))


class SEFuse(nn.Module):
    """Fuse one channel part of both modalities.

    Concatenate (2c channels), squeeze-excite gate, then 1x1 conv back to c.
    ``gate_override`` pins the gates (scalar or per-channel) for diagnostics.
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        both = 2 * channels
        hidden = max(1, both // reduction)
        self.fc1 = nn.Linear(both, hidden)
        self.fc2 = nn.Linear(hidden, both)
        self.out = nn.Conv2d(both, channels, 1)
        self.gate_override = None

    def gates(self, x):
        if self.gate_override is not None:
            g = torch.as_tensor(self.gate_override, dtype=x.dtype, device=x.device)
            return g.expand(x.shape[0], x.shape[1]) if g.ndim < 2 else g
        return torch.sigmoid(self.fc2(F.relu(self.fc1(x.mean(dim=(-2, -1))))))

    def forward(self, rgb, ir):
        x = torch.cat([rgb, ir], dim=1)
        return self.out(x * self.gates(x)[..., None, None])


class MultiReceptiveFuse(nn.Module):
    """Split each modality into four channel parts, convolve each part with its
    own kernel size, fuse matching parts across modalities, concatenate."""

    def __init__(self, channels: int, reduction: int = 4, kernels=FUSE_KERNELS):
        super().__init__()
        if channels % len(kernels):
            raise ValueError(f"channels={channels} not divisible into {len(kernels)} parts")
        self.part = channels // len(kernels)
        c = self.part
        self.convs_rgb = nn.ModuleList(nn.Conv2d(c, c, k, padding=k // 2) for k in kernels)
        self.convs_ir = nn.ModuleList(nn.Conv2d(c, c, k, padding=k // 2) for k in kernels)
        self.fuses = nn.ModuleList(SEFuse(c, reduction) for _ in kernels)

    def forward(self, stem: StemFeatures) -> torch.Tensor:
        c = self.part
        if stem.f_rgb.shape[1] != c * len(self.fuses):
            raise ValueError(f"expected {c * len(self.fuses)} channels, got {stem.f_rgb.shape[1]}")
        rgb_parts = stem.f_rgb.split(c, dim=1)
        ir_parts = stem.f_ir.split(c, dim=1)
        outs = [
            fuse(conv_r(r), conv_i(i))
            for r, i, conv_r, conv_i, fuse in zip(rgb_parts, ir_parts, self.convs_rgb, self.convs_ir, self.fuses)
        ]
        return torch.cat(outs, dim=1)

    def set_gate_override(self, value):
        for fuse in self.fuses:
            fuse.gate_override = value


class Pyramid(nn.Module):
    """Three stacked 3x3/2 conv-BN-ReLU stages tapped at 1/8, 1/16, 1/32 and
    each projected to ``dim`` by a 1x1 conv."""

    def __init__(self, channels: int, dim: int):
        super().__init__()
        self.downs = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(channels, channels, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(channels),
                nn.ReLU(),
            )
            for _ in range(3)
        )
        self.projs = nn.ModuleList(nn.Conv2d(channels, dim, 1) for _ in range(3))

    def forward(self, f_fus: torch.Tensor) -> list[torch.Tensor]:
        h, w = f_fus.shape[-2:]
        if h < 8 or w < 8:
            raise ValueError(f"1/4-scale map {h}x{w} too small for a 1/32 level")
        levels, x = [], f_fus
        for down, proj in zip(self.downs, self.projs):
            x = down(x)
            levels.append(proj(x))
        return levels


def tokenize(levels) -> MultiScaleTokens:
    if len(levels) != 3:
        raise ValueError(f"expected 3 pyramid levels, got {len(levels)}")
    return MultiScaleTokens.from_maps(levels)


class MultiModalFeaturePool(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config.stem_channels
        self.stem_rgb = Stem(3, c)
        self.stem_ir = Stem(1, c)
        self.fuse = MultiReceptiveFuse(c, config.se_reduction)
        self.pyramid = Pyramid(c, config.dim)

    def stem(self, rgb, ir) -> StemFeatures:
        if isinstance(rgb, ImagePair):
            rgb, ir = rgb.to_tensors(dtype=self.stem_rgb.conv.weight.dtype)
        return StemFeatures(self.stem_rgb(rgb), self.stem_ir(ir))

    def forward(self, rgb, ir, record: dict | None = None) -> MultiScaleTokens:
        f_fus = self.fuse(self.stem(rgb, ir))
        levels = self.pyramid(f_fus)
        if record is not None:
            record["f_fus"] = f_fus
            for name, lvl in zip(("pyramid_8", "pyramid_16", "pyramid_32"), levels):
                record[name] = lvl
        return tokenize(levels)
