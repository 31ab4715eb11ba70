"""Train every stage with the small CI profile, evaluate, and restore one image.

Takes a few minutes on one CPU core. The default profile (used by the
acceptance suite) is the same code with wider networks and longer budgets.

Run: python3 demos/05_pipeline.py [run_dir]
"""
import sys
from pathlib import Path

from difflare import ci_profile, pipeline
from difflare.imaging import psnr, write_png

root = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/run")
cfg = ci_profile()
cfg.out = str(root)

# %% Stages run in order; each records its inputs, outputs and seed.
pipeline.run_all(cfg, root, skip_done=True)
stages = pipeline.read_manifest(root)["stages"]
for stage in pipeline.STAGES:
    entry = stages[stage]
    print(f"{stage:16s} {entry['wall_time_s']:7.1f}s  seed {entry['seed']}")
print("manifest chain:", pipeline.validate_chain(root))

# %% Ablation table on held-out images. The CI profile trains for about two
# minutes, so expect weak numbers here; the default profile is what the
# acceptance suite measures.
report = pipeline.evaluate(cfg, root)
print(pipeline.report_table(report))

# %% Restore a single image.
models = pipeline.load_models(cfg, root)
s = pipeline._samples(cfg, root, "test", 1)[0]
out = pipeline.infer(s.input, models, cfg, seed=0)
print(f"input {psnr(s.input, s.gt):.2f} dB -> restored {psnr(out, s.gt):.2f} dB")
write_png(root / "restored.png", out)
