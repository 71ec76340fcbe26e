"""
How many parameters does the adapter train?
===========================================

Count frozen and trainable parameters for a ViT-Base-shaped configuration
without allocating any weights (modules are built on the meta device).
"""

# %%
from unirgbir.core import ModelConfig
from unirgbir.evaluate import dry_run_report

base = ModelConfig.vit_base()
print(dry_run_report(base))

# %%
# The ablation modes for comparison.
for mode in ("mfp_add", "baseline"):
    print(f"\n{mode}")
    print(dry_run_report(base, mode=mode))

# %%
# Fine-tuning everything trains all of them.
print("\nfinetune_all fraction:", dry_run_report(base, paradigm="full").trainable_fraction)
