"""Build paired flare / flare-free samples and look at them.

Run: python3 demos/01_flare_synthesis.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from difflare.config import CorpusConfig
from difflare.imaging import psnr, write_png
from difflare.synthesis import FlareAssets, composite, dataset_stream, procedural_flare

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "synthesis"

# %% Flare layers are drawn on a black canvas and are exactly zero off-pattern.
scattering = procedural_flare("scattering", seed=3)
reflective = procedural_flare("reflective", {"n_ghosts": 4}, seed=3)
print("scattering support:", (scattering.max(-1) > 0).mean().round(3), "of the canvas")
print("reflective support:", (reflective.max(-1) > 0).mean().round(3), "of the canvas")

# %% Layers combine by adding in linear light. Order does not matter and a
# black layer changes nothing, bit for bit.
bg = np.full((64, 64, 3), 0.3)
a = composite([bg, scattering, reflective])
b = composite([reflective, bg, scattering])
print("order independent:", np.array_equal(a, b))
print("black layer is a no-op:", np.array_equal(composite([bg, np.zeros_like(bg)]), composite([bg])))

# %% A stream of training pairs. Each sample is reproducible from its seed.
cfg = CorpusConfig(n_train_backgrounds=16, n_test_backgrounds=4)
assets = FlareAssets.procedural(cfg.n_scattering, cfg.n_reflective, cfg.crop_size, seed=0)
samples = list(dataset_stream(cfg, "train", seed=0, limit=8, assets=assets))
for i, s in enumerate(samples):
    ff = s.flare_free()
    print(f"sample {i}: input PSNR {psnr(s.input, s.gt):5.2f} dB, flare-free {ff.mean():.0%}, equal there: {np.array_equal(s.input[ff], s.gt[ff])}")
    write_png(out / f"{i:02d}.png", np.concatenate([s.input, s.gt, s.scattering, s.reflective], axis=1))
print("panels (input | GT | scattering | reflective) in", out)
