"""
Selecting tissue patches
========================

The patch filter keeps a window only if it has enough contrast, is not
mostly white background and overlaps the annotation.
"""

# %%
import numpy as np

from sagemoe.data import PatchRule, iter_windows, patch_filter

rule = PatchRule()
mask = np.ones((64, 64), dtype=int)

flat = np.full((64, 64, 3), 128, dtype=np.uint8)
white = np.array([230, 250] * (64 * 32), dtype=np.uint8).reshape(64, 64)[:, :, None].repeat(3, axis=2)
tissue = np.full((64, 64, 3), 80, dtype=np.uint8)
tissue[:32] = 120

for name, patch in [("flat", flat), ("white", white), ("tissue", tissue)]:
    print(f"{name:7s} std {patch.std():5.1f} mean {patch.mean():6.1f} keep {patch_filter(patch, mask, rule)}")

# %%
# The annotation has to cover at least 100 pixels.
sparse = np.zeros((64, 64), dtype=int)
sparse.flat[:99] = 1
print("99 mask pixels:", patch_filter(tissue, sparse, rule))
sparse.flat[99] = 1
print("100 mask pixels:", patch_filter(tissue, sparse, rule))

# %%
# Windows of 1536 with stride 512 over a 4096 x 3072 slide region.
print(sum(1 for _ in iter_windows(4096, 3072, rule)), "windows")
