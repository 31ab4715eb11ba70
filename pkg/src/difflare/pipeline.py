"""Staged training, inference and evaluation on top of an output directory.

Layout under the run directory::

    config.yaml                 resolved config of the last stage run
    manifest.json               per-stage inputs/outputs/seeds/timings
    corpus/                     PNG corpus written by ``synth``
    corpus/manifest_{split}.jsonl
    checkpoints/{vq,diffusion,sgim,affm_full,affm_unguided}.safetensors
    eval/report.json, eval/panels/*.png
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
import zlib
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .affm import AFFM, build_affm, fuse, mask_rows_to_lm_prime, train_affm
from .config import RunConfig, dump
from .diffusion import UNet, build_unet, pretrain_diffusion, sample, schedule_from_config
from .errors import CorpusError, DependencyError, IntegrityError, ParameterError
from .imaging import psnr, ssim, write_png
from .lgp import luminance_mask, pooled_mask_row
from .sgim import SGIM, train_sgim
from .synthesis import dataset_stream, load_assets, write_corpus, write_manifest
from .vq import VQModel, build_vq, codebook_usage, latent_scale, pretrain_vq, roundtrip, to_numpy, to_tensor

log = logging.getLogger(__name__)

STAGES = ("synth", "train-vq", "train-diffusion", "train-sgim", "train-affm")
DEPENDS = {
    "synth": (),
    "train-vq": ("synth",),
    "train-diffusion": ("train-vq",),
    "train-sgim": ("train-diffusion", "train-vq"),
    "train-affm": ("train-sgim", "train-diffusion", "train-vq"),
}
VARIANTS = ("input", "no-affm", "unguided-affm", "full")
VAL_OFFSET = 100_000  # validation samples: test backgrounds, seeds disjoint from eval


def stage_seed(seed, stage) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]).generate_state(1)[0] % 2**31)


# ---------------------------------------------------------------------------
# manifest


def _manifest_path(root):
    return Path(root) / "manifest.json"


def read_manifest(root) -> dict:
    path = _manifest_path(root)
    if not path.exists():
        return {"stages": {}}
    return json.loads(path.read_text())


def _write_manifest(root, manifest):
    _manifest_path(root).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def check_dependencies(root, stage) -> None:
    manifest = read_manifest(root)
    for dep in DEPENDS[stage]:
        entry = manifest["stages"].get(dep)
        if entry is None:
            raise DependencyError(f"stage {stage!r} requires {dep!r} to have run first")
        for rel, digest in entry["outputs"].items():
            path = Path(root) / rel
            if not path.exists():
                raise DependencyError(f"{dep!r} output {rel} is missing; re-run {dep!r}")
            if ckpt.file_hash(path) != digest:
                raise IntegrityError(f"{rel} changed since {dep!r} recorded it")


def validate_chain(root) -> list:
    """Check every recorded stage: outputs present and hashed as recorded, and
    each stage's recorded inputs equal its dependencies' outputs. Returns the
    list of validated stages."""
    manifest = read_manifest(root)
    done = []
    for stage in STAGES:
        entry = manifest["stages"].get(stage)
        if entry is None:
            continue
        for rel, digest in entry["outputs"].items():
            path = Path(root) / rel
            if not path.exists() or ckpt.file_hash(path) != digest:
                raise IntegrityError(f"{stage}: output {rel} missing or modified")
        for dep in DEPENDS[stage]:
            dep_entry = manifest["stages"].get(dep)
            if dep_entry is None:
                raise DependencyError(f"{stage} recorded without {dep}")
            for rel, digest in dep_entry["outputs"].items():
                if rel.endswith(".safetensors") and entry["inputs"].get(rel) != digest:
                    raise IntegrityError(f"{stage} was trained on a different {rel}")
        done.append(stage)
    return done


def _record(root, stage, cfg, inputs, outputs, seed, t0, extra=None):
    manifest = read_manifest(root)
    manifest["stages"][stage] = {
        "inputs": inputs,
        "outputs": {rel: ckpt.file_hash(Path(root) / rel) for rel in outputs},
        "seed": seed,
        "config_digest": cfg.digest(),
        "wall_time_s": round(time.time() - t0, 2),
        **(extra or {}),
    }
    _write_manifest(root, manifest)


def _inputs(root, stage):
    manifest = read_manifest(root)
    out = {}
    for dep in DEPENDS[stage]:
        out.update(manifest["stages"][dep]["outputs"])
    return {k: v for k, v in out.items() if k.endswith(".safetensors")}


# ---------------------------------------------------------------------------
# data helpers


def corpus_config(cfg: RunConfig, root):
    """Point the corpus section at the synthesized folder unless a user corpus is set."""
    if cfg.corpus.corpus_dir:
        return cfg.corpus
    return dataclasses.replace(cfg.corpus, corpus_dir=str(Path(root) / "corpus"))


def _samples(cfg, root, split, n, offset=0):
    ccfg = corpus_config(cfg, root)
    assets = load_assets(ccfg, cfg.seed)
    return list(dataset_stream(ccfg, split, seed=cfg.seed, limit=n, assets=assets, offset=offset))


def _stack(samples, attr):
    return np.stack([getattr(s, attr) for s in samples])


def _encode(vq, images, scale, batch=64):
    with torch.no_grad():
        return torch.cat([vq.encode(to_tensor(images[i : i + batch])) for i in range(0, len(images), batch)]) * scale


def _mask_rows(images, latent_hw, threshold, dilation=0):
    return torch.as_tensor(np.stack([pooled_mask_row(im, latent_hw, threshold, dilation) for im in images]), dtype=torch.float32)


def _pixel_masks(images, threshold):
    return torch.as_tensor(np.stack([luminance_mask(im, threshold).mask for im in images])[:, None], dtype=torch.float32)


# ---------------------------------------------------------------------------
# models


@dataclasses.dataclass
class Models:
    vq: VQModel
    scale: float
    unet: UNet = None
    sgim: SGIM = None
    affm: dict = dataclasses.field(default_factory=dict)
    hashes: dict = dataclasses.field(default_factory=dict)


def load_models(cfg: RunConfig, root, need=("vq", "diffusion", "sgim", "affm")) -> Models:
    root = Path(root) / "checkpoints"
    state, _, extra = ckpt.load(root / "vq.safetensors", "vq")
    vq = build_vq(cfg.vq)
    vq.load_state_dict(state)
    models = Models(vq=vq, scale=extra["latent_scale"])
    models.hashes["vq"] = ckpt.freeze(vq)
    if "diffusion" in need:
        state, _, _ = ckpt.load(root / "diffusion.safetensors", "diffusion")
        models.unet = build_unet(cfg.diffusion, cfg.vq.latent_channels)
        models.unet.load_state_dict(state)
        models.hashes["diffusion"] = ckpt.freeze(models.unet)
    if "sgim" in need:
        state, _, _ = ckpt.load(root / "sgim.safetensors", "sgim")
        models.sgim = SGIM.for_unet(models.unet, cfg.vq.latent_channels)
        models.sgim.load_state_dict(state)
        models.hashes["sgim"] = ckpt.freeze(models.sgim)
    if "affm" in need:
        for variant in cfg.affm.variants:
            state, _, _ = ckpt.load(root / f"affm_{variant}.safetensors", "affm")
            affm = build_affm(cfg.affm, vq.feat_channels)
            affm.load_state_dict(state)
            models.affm[variant] = affm
            models.hashes[f"affm_{variant}"] = ckpt.freeze(affm)
    return models


def restore_latents(models: Models, cfg: RunConfig, x_in, seed, scale=None, token="config"):
    """SGIM-guided DDPM sampling for a batch of corrupted images; returns unscaled latents."""
    icfg = cfg.infer
    scale = icfg.guidance_scale if scale is None else scale
    token = icfg.prompt_token if token == "config" else token
    out = []
    for i in range(0, len(x_in), icfg.batch_size):
        chunk = x_in[i : i + icfg.batch_size]
        with torch.no_grad():
            z_in = models.vq.encode(to_tensor(chunk)) * models.scale
            guidance = models.sgim.guidance(z_in)
        z0 = sample(models.unet, schedule_from_config(cfg.diffusion), tuple(z_in.shape), guidance, token, scale, seed=seed + i, x0_clip=cfg.diffusion.x0_clip)
        out.append(z0 / models.scale)
    return torch.cat(out)


def render_variants(models: Models, cfg: RunConfig, x_in, z0, variants=VARIANTS):
    """Decode restored latents through each requested variant; numpy (N, H, W, 3) per variant."""
    x = to_tensor(x_in)
    latent_hw = tuple(z0.shape[-2:])
    out = {}
    with torch.no_grad():
        dec = models.vq.decode_head(z0)
        if "input" in variants:
            out["input"] = np.asarray(x_in, dtype=np.float64)
        if "no-affm" in variants:
            out["no-affm"] = to_numpy(models.vq.decode_tail(dec).clamp(0, 1))
        enc = models.vq.encode_features(x)[1] if any(v in variants for v in ("full", "unguided-affm")) else None
        if "full" in variants:
            rows = _mask_rows(x_in, latent_hw, cfg.infer.lgp_threshold, cfg.infer.gradient_dilation)
            out["full"] = to_numpy(fuse(models.affm["full"], models.vq, enc, dec, mask_rows_to_lm_prime(rows)))
        if "unguided-affm" in variants:
            out["unguided-affm"] = to_numpy(fuse(models.affm["unguided"], models.vq, enc, dec, None))
    return out


def infer(x_in, models: Models, cfg: RunConfig, scale=None, seed=0, token="config", affm=True):
    """Restore one image (H, W, 3) or a batch (N, H, W, 3)."""
    single = np.ndim(x_in) == 3
    batch = np.asarray(x_in, dtype=np.float64)[None] if single else np.asarray(x_in, dtype=np.float64)
    z0 = restore_latents(models, cfg, batch, seed, scale, token)
    variant = "full" if affm else "no-affm"
    out = render_variants(models, cfg, batch, z0, (variant,))[variant]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# stages


def run_stage(stage, cfg: RunConfig, root=None):
    """Run one pipeline stage, writing artifacts and a manifest entry under ``root``."""
    if stage not in STAGES:
        raise ParameterError(f"unknown stage {stage!r}; choose from {STAGES}")
    root = Path(root or cfg.output_dir())
    root.mkdir(parents=True, exist_ok=True)
    check_dependencies(root, stage)
    torch.use_deterministic_algorithms(True)
    dump(cfg, root / "config.yaml")
    seed = stage_seed(cfg.seed, stage)
    t0 = time.time()
    inputs = _inputs(root, stage)
    log.info("running %s (seed %d) in %s", stage, seed, root)
    extra = {}

    if stage == "synth":
        write_corpus(cfg.corpus, root / "corpus", seed=cfg.seed)
        outputs = ["corpus/splits.json"]
        ccfg = corpus_config(cfg, root)
        for split in ("train", "test"):
            rel = f"corpus/manifest_{split}.jsonl"
            write_manifest(dataset_stream(ccfg, split, seed=cfg.seed), root / rel)
            outputs.append(rel)

    elif stage == "train-vq":
        train = _stack(_samples(cfg, root, "train", cfg.vq.n_train_images), "gt")
        val = _stack(_samples(cfg, root, "test", cfg.vq.n_val_images, offset=VAL_OFFSET), "gt")
        torch.manual_seed(seed)
        model, hist = pretrain_vq(train, val, cfg.vq, seed)
        scale = latent_scale(model, train)
        extra = {
            "val_l1_first": hist["val_l1"][0],
            "val_l1_last": hist["val_l1"][-1],
            "codebook_usage": codebook_usage(model, val),
            "latent_scale": scale,
        }
        ckpt.save(root / "checkpoints/vq.safetensors", model, "vq", dataclasses.asdict(cfg.vq), {"latent_scale": scale})
        outputs = ["checkpoints/vq.safetensors"]

    elif stage == "train-diffusion":
        models = load_models(cfg, root, need=("vq",))
        train = _encode(models.vq, _stack(_samples(cfg, root, "train", cfg.diffusion.n_train_images), "gt"), models.scale)
        val = _encode(models.vq, _stack(_samples(cfg, root, "test", cfg.diffusion.n_val_images, offset=VAL_OFFSET), "gt"), models.scale)
        unet, hist = pretrain_diffusion(train, val, cfg.diffusion, seed)
        ckpt.assert_frozen(models.vq, models.hashes["vq"], "vq")
        extra = {"val_first": hist["val"][0], "val_last": hist["val"][-1]}
        ckpt.save(root / "checkpoints/diffusion.safetensors", unet, "diffusion", dataclasses.asdict(cfg.diffusion))
        outputs = ["checkpoints/diffusion.safetensors"]

    elif stage == "train-sgim":
        models = load_models(cfg, root, need=("vq", "diffusion"))
        tr = _samples(cfg, root, "train", cfg.diffusion.n_train_images)
        va = _samples(cfg, root, "test", cfg.sgim.n_val_pairs, offset=VAL_OFFSET)
        pairs = (_encode(models.vq, _stack(tr, "gt"), models.scale), _encode(models.vq, _stack(tr, "input"), models.scale))
        vpairs = (_encode(models.vq, _stack(va, "gt"), models.scale), _encode(models.vq, _stack(va, "input"), models.scale))
        sgim, hist = train_sgim(models.unet, pairs, vpairs, cfg.sgim, schedule_from_config(cfg.diffusion), seed, frozen_extra=(models.vq,))
        extra = {"val_first": hist["val"][0], "val_last": hist["val"][-1], "frozen": {k: models.hashes[k] for k in ("vq", "diffusion")}}
        ckpt.save(root / "checkpoints/sgim.safetensors", sgim, "sgim", dataclasses.asdict(cfg.sgim))
        outputs = ["checkpoints/sgim.safetensors"]

    elif stage == "train-affm":
        models = load_models(cfg, root, need=("vq", "diffusion", "sgim"))
        acfg = cfg.affm
        tr = _samples(cfg, root, "train", acfg.n_train_pairs, offset=VAL_OFFSET)
        va = _samples(cfg, root, "test", acfg.n_val_pairs, offset=2 * VAL_OFFSET)
        data, val = (_affm_batch(models, cfg, s, seed + k) for k, s in enumerate((tr, va)))
        extra = {"frozen": {k: models.hashes[k] for k in ("vq", "diffusion", "sgim")}}
        outputs = []
        for variant in acfg.variants:
            affm, hist = train_affm(models.vq, data, val, acfg, guided=(variant == "full"), seed=seed, frozen_extra=(models.unet, models.sgim))
            for name in ("vq", "diffusion", "sgim"):
                module = {"vq": models.vq, "diffusion": models.unet, "sgim": models.sgim}[name]
                ckpt.assert_frozen(module, models.hashes[name], name)
            rel = f"checkpoints/affm_{variant}.safetensors"
            ckpt.save(root / rel, affm, "affm", {**dataclasses.asdict(acfg), "guided": variant == "full"})
            outputs.append(rel)
            extra[f"{variant}_val_first"] = hist["val_l1"][0]
            extra[f"{variant}_val_last"] = hist["val_l1"][-1]

    _record(root, stage, cfg, inputs, outputs, seed, t0, extra)
    return read_manifest(root)["stages"][stage]


def _affm_batch(models, cfg, samples, seed):
    x_in = _stack(samples, "input")
    z0 = restore_latents(models, cfg, x_in, seed)
    return {
        "x_in": to_tensor(x_in),
        "gt": to_tensor(_stack(samples, "gt")),
        "z0": z0,
        "mask_rows": _mask_rows(x_in, tuple(z0.shape[-2:]), cfg.affm.lgp_threshold),
        "pixel_mask": _pixel_masks(x_in, cfg.affm.lgp_threshold),
    }


def run_all(cfg: RunConfig, root=None, skip_done=False):
    root = Path(root or cfg.output_dir())
    done = set(read_manifest(root)["stages"]) if skip_done else set()
    for stage in STAGES:
        if stage not in done:
            run_stage(stage, cfg, root)
    return root


# ---------------------------------------------------------------------------
# evaluation


def evaluate(cfg: RunConfig, root=None, variants=None, samples=None, seed=None, write=True):
    """Score each variant against ground truth on the test split.

    Per image: PSNR, SSIM, and mean absolute error against the input on the
    true flare-free pixels (both flare layers zero). Aggregates are arithmetic
    means, with medians alongside.
    """
    root = Path(root or cfg.output_dir())
    variants = tuple(variants or cfg.eval.variants)
    bad = set(variants) - set(VARIANTS)
    if bad:
        raise ParameterError(f"unknown variants {sorted(bad)}")
    if samples is None:
        samples = _samples(cfg, root, "test", cfg.eval.n_images)
    if not samples:
        raise CorpusError("empty test set")
    need = ("vq",) if set(variants) <= {"input"} else ("vq", "diffusion", "sgim") + (("affm",) if {"full", "unguided-affm"} & set(variants) else ())
    models = load_models(cfg, root, need=need)
    x_in = _stack(samples, "input")
    gt = _stack(samples, "gt")
    seed = stage_seed(cfg.seed, "eval") if seed is None else seed
    t0 = time.time()
    outputs = {"input": x_in}
    if set(variants) - {"input"}:
        z0 = restore_latents(models, cfg, x_in, seed)
        outputs.update(render_variants(models, cfg, x_in, z0, variants))
    runtime = time.time() - t0

    per_image = []
    for i, s in enumerate(samples):
        ff = s.flare_free()
        row = {"index": i, "seed": s.seed, "background_id": s.background_id}
        for v in variants:
            img = outputs[v][i]
            row[v] = {
                "psnr": psnr(img, gt[i]),
                "ssim": ssim(img, gt[i]),
                "flare_free_mae": float(np.abs(img - x_in[i])[ff].mean()) if ff.any() else 0.0,
            }
        per_image.append(row)

    aggregate = {}
    for v in variants:
        agg = {}
        for metric in ("psnr", "ssim", "flare_free_mae"):
            vals = np.array([r[v][metric] for r in per_image])
            agg[metric] = float(vals.mean())
            agg[f"{metric}_median"] = float(np.median(vals))
        if v != "input":
            agg["frac_psnr_above_input"] = float(np.mean([r[v]["psnr"] > r["input"]["psnr"] for r in per_image]))
        aggregate[v] = agg
    report = {
        "variants": list(variants),
        "n_images": len(samples),
        "guidance_scale": cfg.infer.guidance_scale,
        "prompt_token": cfg.infer.prompt_token,
        "aggregate": aggregate,
        "per_image": per_image,
        "runtime_s": round(runtime, 2),
        "seed": seed,
    }
    if write:
        out = root / "eval"
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
        if cfg.eval.panels:
            for i in range(len(samples)):
                panel = np.concatenate([outputs[v][i] for v in variants] + [gt[i]], axis=1)
                write_png(out / "panels" / f"{i:03d}.png", panel)
    return report


def report_table(report) -> str:
    """Fixed-width text table of the aggregate metrics."""
    lines = [f"{'variant':<15}{'PSNR':>9}{'SSIM':>8}{'FF-MAE':>9}{'>input':>8}"]
    for v in report["variants"]:
        a = report["aggregate"][v]
        frac = a.get("frac_psnr_above_input")
        lines.append(f"{v:<15}{a['psnr']:>9.3f}{a['ssim']:>8.3f}{a['flare_free_mae']:>9.4f}{'' if frac is None else f'{frac:>8.2f}'}")
    return "\n".join(lines)
