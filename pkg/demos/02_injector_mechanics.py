"""
Inside the feature injector
===========================

The injector cross-attends from ViT tokens into the pooled tokens, gates the
result against the previous stage, and adds it to the ViT stream through a
zero-initialized scale. This script pokes each piece at its initial state.
"""

# %%
import numpy as np
import torch

from unirgbir import oracles
from unirgbir.core import ModelConfig, MultiScaleTokens, TokenMap
from unirgbir.sfi import CrossAttend, Gate, GateState, bilinear_sample, inject, reference_points

torch.manual_seed(0)
cfg = ModelConfig(dim=8, stem_channels=8, vit_heads=2, deform_heads=2, deform_points=2, image_size=64)
levels = [(8, 8), (4, 4), (2, 2)]
f_mfp = MultiScaleTokens(torch.randn(84, 8), levels)
f_vit = TokenMap(torch.randn(16, 8), 4, 4)

# %%
# Bilinear sampling uses cell centers at (j + 0.5) / w and zero padding.
level = f_mfp.level_map(0).permute(1, 2, 0)
print("center of cell (2, 3):", torch.allclose(bilinear_sample(level, (3.5 / 8, 2.5 / 8)), level[2, 3]))
print("reference points of a 2x2 grid:\n", reference_points(2, 2))

# %%
# Offsets and attention logits start at zero, so each query averages the
# three levels sampled at its own grid center.
cross = CrossAttend(cfg)
out = cross(f_vit, f_mfp)
ref = oracles.cross_attend(cross, f_vit.tokens.numpy(), (4, 4), f_mfp.tokens.numpy(), levels)
print("vectorized vs loop reference:", float(np.abs(out.tokens.detach().numpy() - ref).max()))

# %%
# The gate mixes the current and previous stage outputs per token.
gate = Gate(8)
prev = TokenMap(torch.randn(16, 8), 4, 4)
z = gate.weight(out.tokens, prev.tokens)
print("z range", float(z.min()), float(z.max()))
mixed = gate(out, GateState(prev, 2))
lo, hi = torch.minimum(out.tokens, prev.tokens), torch.maximum(out.tokens, prev.tokens)
print("inside envelope:", bool(((mixed.tokens >= lo) & (mixed.tokens <= hi)).all()))

# %%
# With the scale at zero the ViT stream passes through untouched.
print("identity at init:", torch.equal(inject(f_vit, mixed, torch.tensor(0.0)).tokens, f_vit.tokens))
