"""
From an image pair to multi-scale tokens
========================================

Walk one synthetic RGB-IR pair through the feature pool: stems at 1/4 scale,
the four-way receptive-field split, SE fusion, and the 1/8-1/16-1/32 pyramid
that is flattened into one token sequence.
"""

# %%
# A sample from the synthetic dataset. Class 2 is painted with the
# background colour in RGB, so only the IR channel shows it.
import numpy as np
import torch

from unirgbir.core import ModelConfig, mfp_token_count
from unirgbir.data import CLASS_NAMES, audit_visibility, class_fractions, generate
from unirgbir.mfp import MultiModalFeaturePool

torch.manual_seed(0)
sample = generate(seed=0, n_samples=1, height=128, width=128)[0]
print("rgb", sample.pair.rgb.shape, "ir", sample.pair.ir.shape)
for name, frac in zip(CLASS_NAMES, class_fractions(sample.mask)):
    print(f"  {name:<10} {frac:6.3f} of pixels")
print("class-2 contrast:", audit_visibility(sample))

# %%
# Run the pool and keep the intermediate maps.
cfg = ModelConfig()
pool = MultiModalFeaturePool(cfg).eval()
rgb, ir = sample.pair.to_tensors()
record = {}
with torch.no_grad():
    tokens = pool(rgb, ir, record=record)
for name in ("f_fus", "pyramid_8", "pyramid_16", "pyramid_32"):
    print(f"{name:<11} {tuple(record[name].shape)}")

# %%
# Levels are flattened row-major and concatenated finest first.
print("levels", tokens.levels, "offsets", tokens.level_offsets)
print("tokens", tuple(tokens.tokens.shape), "expected", mfp_token_count(128, 128))
assert torch.equal(tokens.level_map(1), record["pyramid_16"])

# %%
# The count grows with HW/64 + HW/256 + HW/1024.
for side in (64, 128, 256, 512):
    print(side, mfp_token_count(side, side))
