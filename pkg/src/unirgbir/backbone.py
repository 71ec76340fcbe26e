"""Plain ViT foundation model split into equal stages, plus the per-token head."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ModelConfig, TokenMap, unflatten_grid


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        if x.ndim == 2:
            out = self.forward(x[None], return_weights)
            return (out[0][0], out[1][0]) if return_weights else out[0]
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        weights = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = self.proj((weights @ v).transpose(1, 2).reshape(b, n, d))
        return (out, weights) if return_weights else out


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    def __init__(self, in_chans: int, dim: int, patch_size: int, grid_size: int):
        super().__init__()
        self.patch_size = patch_size
        self.grid_size = grid_size
        self.proj = nn.Conv2d(in_chans, dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, img: torch.Tensor) -> TokenMap:
        h, w = img.shape[-2:]
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(f"image size {h}x{w} is not divisible by patch size {p}")
        return TokenMap.from_map(self.proj(img))


class ViT(nn.Module):
    """ViT with learned positional embedding and ``n_stages`` equal block groups."""

    def __init__(self, config: ModelConfig, in_chans: int = 3):
        super().__init__()
        self.config = config
        g = config.grid_size
        self.patch_embed = PatchEmbed(in_chans, config.dim, config.patch_size, g)
        self.pos_embed = nn.Parameter(torch.zeros(1, g * g, config.dim))
        self.blocks = nn.ModuleList(
            Block(config.dim, config.vit_heads, config.mlp_ratio) for _ in range(config.vit_blocks)
        )
        self.norm = nn.LayerNorm(config.dim, eps=1e-6)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.apply(_init_vit_weights)

    @property
    def n_stages(self) -> int:
        return self.config.n_stages

    def stage_blocks(self, i: int) -> nn.ModuleList:
        if not 1 <= i <= self.n_stages:
            raise ValueError(f"stage index {i} outside 1..{self.n_stages}")
        k = self.config.blocks_per_stage
        return self.blocks[(i - 1) * k:i * k]

    def embed(self, img: torch.Tensor) -> TokenMap:
        tm = self.patch_embed(img)
        if tm.n != self.pos_embed.shape[1]:
            raise ValueError(
                f"input gives a {tm.grid_h}x{tm.grid_w} token grid; positional embedding "
                f"was built for {self.config.grid_size}x{self.config.grid_size}"
            )
        return tm.with_tokens(tm.tokens + self.pos_embed)

    def stage_forward(self, x: TokenMap, i: int) -> TokenMap:
        if x.dim != self.config.dim:
            raise ValueError(f"token width {x.dim} != model dim {self.config.dim}")
        t = x.tokens
        for blk in self.stage_blocks(i):
            t = blk(t)
        return x.with_tokens(t)

    def forward(self, img: torch.Tensor) -> TokenMap:
        x = self.embed(img)
        for i in range(1, self.n_stages + 1):
            x = self.stage_forward(x, i)
        return x.with_tokens(self.norm(x.tokens))


def _init_vit_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class SegHead(nn.Module):
    """Linear per-token classifier, bilinearly upsampled to the input size."""

    def __init__(self, dim: int, n_classes: int):
        super().__init__()
        self.classifier = nn.Linear(dim, n_classes)

    def forward(self, x: TokenMap, size: tuple[int, int]) -> torch.Tensor:
        logits = unflatten_grid(self.classifier(x.tokens), x.grid_h, x.grid_w)
        return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def make_frozen_backbone(config: ModelConfig, train_set, train_config=None, log_path=None):
    """Pretrain ViT + head on the RGB-only task, then freeze every backbone weight.

    Returns the pretrained model (mode ``"rgb"``) with ``backbone`` frozen and
    the head still trainable, together with the training result.
    """
    from .tuning import run_training

    result = run_training(config, train_set, None, mode="rgb", paradigm="full",
                          train_config=train_config, log_path=log_path)
    freeze(result.model.backbone)
    return result.model, result
