"""Luminance mask and the attention mask it becomes at latent resolution.

Run: python3 demos/02_luminance_mask.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from difflare.config import CorpusConfig
from difflare.imaging import luminance, write_png
from difflare.lgp import adaptive_avg_pool, luminance_mask, to_attention_mask
from difflare.synthesis import dataset_stream

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "mask"

sample = next(dataset_stream(CorpusConfig(n_train_backgrounds=4, n_test_backgrounds=1), "train", seed=2))
x = sample.input

# %% 1 marks pixels darker than the threshold: those are trusted as flare-free.
for s in (0.6, 0.75, 0.85, 0.95):
    print(f"s={s:.2f}: {luminance_mask(x, s).mask.mean():.1%} of pixels kept")

lm = luminance_mask(x, 0.85)
truth = sample.flare_free()
print("kept pixels that really are flare-free:", f"{truth[lm.mask == 1].mean():.1%}")

# %% Pool to the 16x16 latent grid, apply SiLU, and stack identical rows.
am = to_attention_mask(lm, (16, 16))
print("LM' shape:", am.lm_prime.shape, "range:", am.lm_prime.min().round(3), "-", am.lm_prime.max().round(3))

# %% The hand case: a 4x4 mask pooled to 2x2 is the block average.
m = np.array([[1, 1, 0, 0], [1, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1]], float)
print(adaptive_avg_pool(m, (2, 2)))

grey = np.repeat(luminance(x)[..., None], 3, -1)
mask = np.repeat(lm.mask[..., None].astype(float), 3, -1)
write_png(out / "mask.png", np.concatenate([x, grey, mask], axis=1))
print("input | luma | mask written to", out)
