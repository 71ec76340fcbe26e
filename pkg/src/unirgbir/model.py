"""Full network assembly with the ablation modes.

Modes:
    full      frozen ViT + MFP + SFI injected at the configured stages
    mfp_add   frozen ViT + MFP, 1/16 pyramid level added at every stage
    baseline  RGB and IR stacked into a 4-channel patch embedding, no adapter
    rgb       plain ViT + head on RGB (the pretraining / reference network)
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .backbone import SegHead, ViT
from .core import MODEL_MODES, ImagePair, ModelConfig, TokenMap
from .mfp import MultiModalFeaturePool
from .sfi import InjectorStage, inject


class UniRgbIrModel(nn.Module):
    def __init__(self, config: ModelConfig, mode: str = "full"):
        super().__init__()
        if mode not in MODEL_MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODEL_MODES}")
        if mode == "full" and not config.sfi_stages:
            raise ValueError("mode 'full' needs at least one SFI stage")
        self.config = config.replace()
        self.mode = mode
        self.backbone = ViT(self.config, in_chans=4 if mode == "baseline" else 3)
        self.head = SegHead(config.dim, config.head_classes)
        if mode in ("full", "mfp_add"):
            self.mfp = MultiModalFeaturePool(self.config)
        if mode == "full":
            self.sfi = nn.ModuleDict()
            self.set_sfi_stages(self.config.sfi_stages)

    @property
    def uses_ir(self) -> bool:
        return self.mode != "rgb"

    def set_sfi_stages(self, stages) -> None:
        """Run SFI only at the start of the listed stages, chained in ascending order."""
        stages = sorted({int(s) for s in stages})
        if self.mode != "full":
            raise ValueError(f"SFI stages are only meaningful in mode 'full', not {self.mode!r}")
        if not stages:
            raise ValueError("mode 'full' needs at least one SFI stage")
        if any(s < 1 or s > self.config.n_stages for s in stages):
            raise ValueError(f"SFI stages {stages} not within 1..{self.config.n_stages}")
        old = dict(self.sfi.items())
        self.sfi = nn.ModuleDict()
        for position, stage in enumerate(stages, 1):
            mod = old.get(str(stage))
            if mod is None or mod.position != position:
                mod = InjectorStage(self.config, position)
            self.sfi[str(stage)] = mod
        self.config.sfi_stages = tuple(stages)

    def forward(self, rgb: torch.Tensor, ir: torch.Tensor | None = None, record: dict | None = None):
        """Per-pixel logits (B, classes, H, W) from (B, 3, H, W) RGB and (B, 1, H, W) IR."""
        size = rgb.shape[-2:]
        if self.mode == "baseline":
            x = self.backbone.embed(torch.cat([rgb, ir], dim=1))
        else:
            x = self.backbone.embed(rgb)
        f_mfp = self.mfp(rgb, ir, record) if self.mode in ("full", "mfp_add") else None
        if record is not None and f_mfp is not None:
            record["f_mfp"] = f_mfp.tokens
        prev = None
        for i in range(1, self.config.n_stages + 1):
            if record is not None:
                record[f"vit_{i}"] = x.tokens
            if self.mode == "full" and str(i) in self.sfi:
                stage = self.sfi[str(i)]
                f_sfi, tilde = stage(x, f_mfp, prev)
                x = inject(x, f_sfi, stage.scale)
                prev = f_sfi
                if record is not None:
                    record[f"sfi_tilde_{i}"] = tilde.tokens
                    record[f"sfi_{i}"] = f_sfi.tokens
            elif self.mode == "mfp_add":
                x = x.with_tokens(x.tokens + f_mfp.level_tokens(1))
            if record is not None:
                record[f"stage_input_{i}"] = x.tokens
            x = self.backbone.stage_forward(x, i)
        x = x.with_tokens(self.backbone.norm(x.tokens))
        return self.head(x, size)

    def forward_rgb(self, rgb: torch.Tensor) -> torch.Tensor:
        """Frozen backbone + head on RGB alone, bypassing every adapter path."""
        if self.mode == "baseline":
            raise ValueError("baseline mode has no RGB-only path")
        return self.head(self.backbone(rgb), rgb.shape[-2:])

    def predict(self, pair: ImagePair) -> np.ndarray:
        """H x W x classes logits for one image pair."""
        dtype = next(self.parameters()).dtype
        rgb, ir = pair.to_tensors(dtype=dtype)
        with torch.no_grad():
            return self(rgb, ir)[0].permute(1, 2, 0).cpu().numpy()

    def load_pretrained(self, pretrained: "UniRgbIrModel") -> "UniRgbIrModel":
        """Copy backbone and head weights from a pretrained RGB model.

        In baseline mode the extra IR input slice of the patch embedding starts at zero.
        """
        state = {k: v.detach().clone() for k, v in pretrained.backbone.state_dict().items()}
        if self.mode == "baseline":
            w = state["patch_embed.proj.weight"]
            state["patch_embed.proj.weight"] = torch.cat([w, torch.zeros_like(w[:, :1])], dim=1)
        self.backbone.load_state_dict(state)
        self.head.load_state_dict(pretrained.head.state_dict())
        return self


def token_map(tokens: torch.Tensor, config: ModelConfig) -> TokenMap:
    return TokenMap(tokens, config.grid_size, config.grid_size)
