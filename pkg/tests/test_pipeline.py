import json
import shutil

import numpy as np
import pytest

from difflare import config as cfgmod
from difflare import pipeline
from difflare.errors import CorpusError, DependencyError, IntegrityError, ParameterError
from difflare.imaging import psnr

TINY = {
    "corpus": {"n_train_backgrounds": 24, "n_test_backgrounds": 8, "n_scattering": 4, "n_reflective": 4},
    "vq": {"base_width": 8, "codebook_size": 32, "steps": 30, "batch_size": 8, "n_train_images": 32, "n_val_images": 8},
    "diffusion": {"T": 20, "widths": [8, 16], "steps": 20, "batch_size": 8, "n_train_images": 32, "n_val_images": 8},
    "sgim": {"steps": 10, "batch_size": 8, "n_val_pairs": 8},
    "affm": {"width": 8, "growth": 4, "m": 1, "n": 1, "steps": 10, "batch_size": 4, "n_train_pairs": 8, "n_val_pairs": 4},
    "infer": {"batch_size": 8},
    "eval": {"n_images": 4},
}


def tiny_config(root, **extra):
    return cfgmod.from_dict({**TINY, "out": str(root), **extra})


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = tiny_config(root)
    pipeline.run_all(cfg, root)
    return cfg, root


def test_manifest_chain_validates(run):
    cfg, root = run
    assert pipeline.validate_chain(root) == list(pipeline.STAGES)
    manifest = pipeline.read_manifest(root)
    for stage in pipeline.STAGES:
        entry = manifest["stages"][stage]
        assert entry["outputs"] and entry["wall_time_s"] >= 0 and isinstance(entry["seed"], int)
    frozen = manifest["stages"]["train-affm"]["frozen"]
    assert frozen["diffusion"] == manifest["stages"]["train-sgim"]["frozen"]["diffusion"]


def test_missing_dependency_names_stage(tmp_path):
    cfg = tiny_config(tmp_path)
    with pytest.raises(DependencyError, match="train-diffusion"):
        pipeline.run_stage("train-sgim", cfg, tmp_path)
    with pytest.raises(DependencyError, match="synth"):
        pipeline.run_stage("train-vq", cfg, tmp_path)
    with pytest.raises(ParameterError):
        pipeline.run_stage("train-gan", cfg, tmp_path)


def test_rerun_is_byte_identical(run, tmp_path):
    cfg, root = run
    other = tmp_path / "again"
    cfg2 = tiny_config(other)
    for stage in ("synth", "train-vq", "train-diffusion"):
        pipeline.run_stage(stage, cfg2, other)
    for name in ("vq", "diffusion"):
        rel = f"checkpoints/{name}.safetensors"
        assert (root / rel).read_bytes() == (other / rel).read_bytes()


def test_tampered_checkpoint_detected(run, tmp_path):
    _, root = run
    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    path = copy / "checkpoints" / "diffusion.safetensors"
    data = bytearray(path.read_bytes())
    data[-1] ^= 1
    path.write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        pipeline.validate_chain(copy)


def test_stage_isolation(run, tmp_path):
    cfg, root = run
    copy = tmp_path / "iso"
    shutil.copytree(root, copy)
    for f in (copy / "checkpoints").glob("affm_*.safetensors"):
        f.unlink()
    cfg = tiny_config(copy)
    pipeline.check_dependencies(copy, "train-affm")
    report = pipeline.evaluate(cfg, copy, variants=["input", "no-affm"], write=False)
    assert report["n_images"] == 4
    pipeline.run_stage("train-affm", cfg, copy)
    for v in cfg.affm.variants:
        rel = f"checkpoints/affm_{v}.safetensors"
        assert (copy / rel).read_bytes() == (root / rel).read_bytes()


def test_evaluate_report(run):
    cfg, root = run
    report = pipeline.evaluate(cfg, root)
    samples = pipeline._samples(cfg, root, "test", cfg.eval.n_images)
    for row, s in zip(report["per_image"], samples):
        assert row["input"]["psnr"] == psnr(s.input, s.gt)
        assert row["input"]["flare_free_mae"] == 0.0
    for v in report["variants"]:
        vals = [r[v]["psnr"] for r in report["per_image"]]
        assert report["aggregate"][v]["psnr"] == pytest.approx(np.mean(vals))
    on_disk = json.loads((root / "eval" / "report.json").read_text())
    assert on_disk["aggregate"] == report["aggregate"]
    assert len(list((root / "eval" / "panels").glob("*.png"))) == cfg.eval.n_images
    again = pipeline.evaluate(cfg, root, write=False)
    assert again["per_image"] == report["per_image"]
    assert "full" in pipeline.report_table(report)


def test_evaluate_errors(run):
    cfg, root = run
    with pytest.raises(CorpusError):
        pipeline.evaluate(cfg, root, samples=[], write=False)
    with pytest.raises(ParameterError):
        pipeline.evaluate(cfg, root, variants=["gan"], write=False)


def test_infer_deterministic_and_null_scale(run):
    cfg, root = run
    models = pipeline.load_models(cfg, root)
    x = pipeline._samples(cfg, root, "test", 2)[1].input
    a = pipeline.infer(x, models, cfg, seed=5)
    b = pipeline.infer(x, models, cfg, seed=5)
    assert a.shape == x.shape and np.array_equal(a, b)
    # with the NULL condition the guidance scale cannot matter
    c = pipeline.infer(x, models, cfg, scale=2.0, seed=5, token=None)
    assert np.array_equal(a, c)
    batch = pipeline.infer(np.stack([x, x]), models, cfg, seed=5, affm=False)
    assert batch.shape == (2, *x.shape)


def test_infer_missing_checkpoint(tmp_path):
    with pytest.raises(DependencyError):
        pipeline.load_models(tiny_config(tmp_path), tmp_path)


def test_stage_seeds_distinct():
    seeds = {pipeline.stage_seed(0, s) for s in pipeline.STAGES}
    assert len(seeds) == len(pipeline.STAGES)
    assert pipeline.stage_seed(0, "synth") != pipeline.stage_seed(1, "synth")
