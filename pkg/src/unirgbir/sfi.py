"""Supplementary feature injector: normalized sparse cross-attention from ViT
tokens into pyramid tokens, a per-token convex gate across stages, and the
scaled residual injection into the ViT stream.

Sampling convention: a normalized point ``(x, y)`` in ``[0, 1]^2`` maps to
continuous pixel coordinates ``(x * w - 0.5, y * h - 0.5)``, so cell centers
sit at integer coordinates. Bilinear neighbours outside the grid read zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .core import ModelConfig, MultiScaleTokens, TokenMap


def bilinear_sample(level: torch.Tensor, p) -> torch.Tensor:
    """Sample an (h, w, D) level at one normalized point ``p = (x, y)``."""
    h, w, _ = level.shape
    x = float(p[0]) * w - 0.5
    y = float(p[1]) * h - 0.5
    x0, y0 = math.floor(x), math.floor(y)
    fx, fy = x - x0, y - y0
    out = torch.zeros(level.shape[-1], dtype=level.dtype)
    for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                       (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        if 0 <= xi < w and 0 <= yi < h and wt != 0:
            out = out + wt * level[yi, xi]
    return out


def bilinear_gather(values: torch.Tensor, h: int, w: int, points: torch.Tensor) -> torch.Tensor:
    """Batched bilinear sampling.

    values: (M, h*w, d) row-major grid; points: (M, P, 2) normalized (x, y).
    Returns (M, P, d). Differentiable in both values and points.
    """
    d = values.shape[-1]
    x = points[..., 0] * w - 0.5
    y = points[..., 1] * h - 0.5
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    out = values.new_zeros(points.shape[:-1] + (d,))
    for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                       (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1))
        picked = values.gather(1, idx[..., None].expand(-1, -1, d))
        out = out + picked * (wt * valid.to(wt.dtype))[..., None]
    return out


def reference_points(grid_h: int, grid_w: int, dtype=torch.float32) -> torch.Tensor:
    """Normalized (x, y) centers of a grid, row-major, shape (grid_h*grid_w, 2)."""
    ys = (torch.arange(grid_h, dtype=dtype) + 0.5) / grid_h
    xs = (torch.arange(grid_w, dtype=dtype) + 0.5) / grid_w
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1)


class DeformableAttention(nn.Module):
    """Multi-scale deformable attention over ``levels`` pyramid levels."""

    def __init__(self, dim: int, heads: int = 4, levels: int = 3, points: int = 4):
        super().__init__()
        self.dim, self.heads, self.levels, self.points = dim, heads, levels, points
        self.sampling_offsets = nn.Linear(dim, heads * levels * points * 2)
        self.attention_weights = nn.Linear(dim, heads * levels * points)
        self.value_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)
        nn.init.zeros_(self.sampling_offsets.weight)
        nn.init.zeros_(self.sampling_offsets.bias)
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def forward(self, query, ref, feats: MultiScaleTokens, return_weights: bool = False):
        b, q, d = query.shape
        nh, nl, nk = self.heads, self.levels, self.points
        dh = d // nh
        if len(feats.levels) != nl:
            raise ValueError(f"expected {nl} levels, got {len(feats.levels)}")
        value = self.value_proj(feats.tokens).view(b, -1, nh, dh)
        offsets = self.sampling_offsets(query).view(b, q, nh, nl, nk, 2)
        weights = torch.softmax(self.attention_weights(query).view(b, q, nh, nl * nk), dim=-1)
        weights = weights.view(b, q, nh, nl, nk)
        out = query.new_zeros(b, nh, q, dh)
        for lvl, ((h, w), start) in enumerate(zip(feats.levels, feats.level_offsets)):
            scale = torch.tensor([w, h], dtype=query.dtype, device=query.device)
            loc = ref.view(-1, q, 1, 1, 2) + offsets[:, :, :, lvl] / scale  # b q nh nk 2
            v = value[:, start:start + h * w].permute(0, 2, 1, 3).reshape(b * nh, h * w, dh)
            pts = loc.permute(0, 2, 1, 3, 4).reshape(b * nh, q * nk, 2)
            sampled = bilinear_gather(v, h, w, pts).view(b, nh, q, nk, dh)
            wl = weights[:, :, :, lvl].permute(0, 2, 1, 3)  # b nh q nk
            out = out + (sampled * wl[..., None]).sum(dim=3)
        out = self.output_proj(out.transpose(1, 2).reshape(b, q, d))
        return (out, weights) if return_weights else out


class GlobalAttention(nn.Module):
    """Dense multi-head softmax attention of every query over every key."""

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)

    def forward(self, query, ref, feats: MultiScaleTokens, return_weights: bool = False):
        b, q, d = query.shape
        nh = self.heads
        split = lambda t: t.view(b, -1, nh, d // nh).transpose(1, 2)  # noqa: E731
        qh = split(self.q_proj(query))
        kh = split(self.k_proj(feats.tokens))
        vh = split(self.v_proj(feats.tokens))
        weights = torch.softmax(qh @ kh.transpose(-2, -1) * (d // nh) ** -0.5, dim=-1)
        out = self.output_proj((weights @ vh).transpose(1, 2).reshape(b, q, d))
        return (out, weights) if return_weights else out


def build_attention(config: ModelConfig) -> nn.Module:
    if config.attention_kind == "deformable":
        return DeformableAttention(config.dim, config.deform_heads, 3, config.deform_points)
    if config.attention_kind == "global":
        return GlobalAttention(config.dim, config.deform_heads)
    raise NotImplementedError(f"attention_kind={config.attention_kind!r} is reserved, unimplemented")


class CrossAttend(nn.Module):
    """Attention(LN(F_vit), LN(F_mfp)) with separate norms for each side."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.query_norm = nn.LayerNorm(config.dim, eps=1e-6)
        self.feat_norm = nn.LayerNorm(config.dim, eps=1e-6)
        self.attn = build_attention(config)

    def forward(self, f_vit: TokenMap, f_mfp: MultiScaleTokens) -> TokenMap:
        if f_vit.dim != f_mfp.dim:
            raise ValueError(f"dimension mismatch: vit {f_vit.dim} vs mfp {f_mfp.dim}")
        squeeze = f_vit.tokens.ndim == 2
        q = f_vit.tokens[None] if squeeze else f_vit.tokens
        feats = f_mfp.with_tokens(self.feat_norm(f_mfp.tokens[None] if squeeze else f_mfp.tokens))
        ref = reference_points(f_vit.grid_h, f_vit.grid_w, q.dtype).to(q.device)
        out = self.attn(self.query_norm(q), ref, feats)
        return f_vit.with_tokens(out[0] if squeeze else out)


@dataclass
class GateState:
    prev: TokenMap | None
    stage: int

    def __post_init__(self):
        if (self.prev is None) != (self.stage == 1):
            raise ValueError(
                f"gate contract violated: previous injection must be absent exactly at "
                f"chain position 1 (position {self.stage}, prev {'absent' if self.prev is None else 'present'})"
            )


class Gate(nn.Module):
    """Per-token fusion weight z = sigmoid(linear([prev, curr]))."""

    def __init__(self, dim: int):
        super().__init__()
        self.linear = nn.Linear(2 * dim, 1)
        self.z_override = None

    def weight(self, curr: torch.Tensor, prev: torch.Tensor) -> torch.Tensor:
        if self.z_override is not None:
            return torch.full_like(curr[..., :1], float(self.z_override))
        return torch.sigmoid(self.linear(torch.cat([prev, curr], dim=-1)))

    def forward(self, curr: TokenMap, state: GateState) -> TokenMap:
        return gate_fuse(curr, state, self)


def gate_fuse(curr: TokenMap, state: GateState, gate: Gate | None = None) -> TokenMap:
    """(1 - z) * curr + z * prev, or curr itself at the first chain position."""
    if state.prev is None:
        return curr
    if state.prev.tokens.shape != curr.tokens.shape:
        raise ValueError(f"gate inputs differ: {tuple(state.prev.tokens.shape)} vs {tuple(curr.tokens.shape)}")
    if gate is None:
        raise ValueError("a gate module is required after the first chain position")
    z = gate.weight(curr.tokens, state.prev.tokens)
    # lerp, not (1 - z) * a + z * b: the latter overshoots [min, max] in float32 when z saturates
    return curr.with_tokens(torch.lerp(curr.tokens, state.prev.tokens, z.expand_as(curr.tokens)))


def inject(f_vit: TokenMap, f_sfi: TokenMap, scale) -> TokenMap:
    if f_vit.tokens.shape != f_sfi.tokens.shape:
        raise ValueError(f"inject shapes differ: {tuple(f_vit.tokens.shape)} vs {tuple(f_sfi.tokens.shape)}")
    return f_vit.with_tokens(f_vit.tokens + scale * f_sfi.tokens)


class InjectorStage(nn.Module):
    """One SFI block: cross-attention, optional gate, and its injection scale."""

    def __init__(self, config: ModelConfig, position: int):
        super().__init__()
        self.position = position
        self.cross = CrossAttend(config)
        self.gate = Gate(config.dim) if position > 1 else None
        self.scale = nn.Parameter(torch.tensor(float(config.injection_scale_init)))

    def forward(self, f_vit: TokenMap, f_mfp: MultiScaleTokens, prev: TokenMap | None):
        tilde = self.cross(f_vit, f_mfp)
        f_sfi = gate_fuse(tilde, GateState(prev, self.position), self.gate)
        return f_sfi, tilde
