"""Structural guidance injection.

A small strided encoder turns the latent of the flare-corrupted input into a
feature pyramid, one level per denoiser resolution. Each residual block of the
frozen denoiser gets a SPADE layer that turns the pyramid level at its
resolution into a per-pixel scale and shift of the block's normalized input:

    h' = norm(h) * (1 + gamma(fea)) + beta(fea)

``gamma``/``beta`` start at zero, so an untrained module leaves the denoiser
output unchanged bit for bit.
"""
from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import assert_frozen, freeze
from .config import SGIMConfig
from .diffusion import NULL_TOKEN, NoiseSchedule, UNet, diffusion_loss, fixed_validation_draws
from .errors import ConfigError, DimensionError, TrainingError
from .nn import ResBlock

log = logging.getLogger(__name__)


class SpadeLayer(nn.Module):
    """Two convolutions mapping a guidance feature to (gamma, beta)."""

    def __init__(self, fea_channels, channels, kernel=3):
        super().__init__()
        self.gamma = nn.Conv2d(fea_channels, channels, kernel, padding=kernel // 2)
        self.beta = nn.Conv2d(fea_channels, channels, kernel, padding=kernel // 2)
        for conv in (self.gamma, self.beta):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, h_normed, fea):
        if fea.shape[-2:] != h_normed.shape[-2:] or fea.shape[0] != h_normed.shape[0]:
            raise DimensionError(f"guidance {tuple(fea.shape)} does not match feature {tuple(h_normed.shape)}")
        return h_normed * (1 + self.gamma(fea)) + self.beta(fea)


def modulate(h, fea, spade: SpadeLayer, normalizer: nn.Module):
    """Standalone SPADE step: normalize ``h`` then apply the learned scale/shift."""
    return spade(normalizer(h), fea)


class SGIMEncoder(nn.Module):
    def __init__(self, latent_channels, widths):
        super().__init__()
        self.stem = nn.Conv2d(latent_channels, widths[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i, w in enumerate(widths):
            if i > 0:
                self.downs.append(nn.Conv2d(widths[i - 1], w, 3, stride=2, padding=1))
            self.blocks.append(ResBlock(w, w))

    def forward(self, z):
        h = self.stem(z)
        feats = []
        for i, blk in enumerate(self.blocks):
            if i > 0:
                h = self.downs[i - 1](F.silu(h))
            h = blk(h)
            feats.append(h)
        return feats


class Guidance:
    """Callable handed to the denoiser: routes each block to its SPADE layer."""

    def __init__(self, pyramid, spade: nn.ModuleDict):
        self.pyramid = pyramid
        self.spade = spade

    def __call__(self, key, level, h):
        if level >= len(self.pyramid):
            raise ConfigError(f"no guidance level {level} for block {key}")
        fea = self.pyramid[level]
        if fea.shape[-2:] != h.shape[-2:]:
            raise ConfigError(f"guidance level {level} is {tuple(fea.shape[-2:])}, block {key} runs at {tuple(h.shape[-2:])}")
        if fea.shape[0] != h.shape[0]:
            fea = fea.expand(h.shape[0], *fea.shape[1:])
        return self.spade[key](h, fea)


class SGIM(nn.Module):
    def __init__(self, latent_channels, widths, block_specs):
        super().__init__()
        self.widths = tuple(widths)
        self.encoder = SGIMEncoder(latent_channels, widths)
        self.spade = nn.ModuleDict({key: SpadeLayer(widths[level], ch) for key, level, ch in block_specs})

    @classmethod
    def for_unet(cls, unet: UNet, latent_channels=4):
        return cls(latent_channels, unet.widths, unet.block_specs())

    def extract_guidance(self, z_in):
        levels = len(self.widths)
        if z_in.shape[-1] % 2 ** (levels - 1) or z_in.shape[-2] % 2 ** (levels - 1):
            raise ConfigError(f"latent {tuple(z_in.shape[-2:])} cannot form a {levels}-level pyramid")
        return self.encoder(z_in)

    def guidance(self, z_in) -> Guidance:
        return Guidance(self.extract_guidance(z_in), self.spade)


def audit_partition(trainable: nn.Module, frozen: list) -> None:
    """Trainable and frozen parameter sets must be disjoint and each fully tagged."""
    t_ids = {id(p) for p in trainable.parameters()}
    f_ids = {id(p) for m in frozen for p in m.parameters()}
    if t_ids & f_ids:
        raise ConfigError("a parameter is both trainable and frozen")
    if any(p.requires_grad for m in frozen for p in m.parameters()):
        raise ConfigError("frozen module has parameters with requires_grad=True")
    if not all(p.requires_grad for p in trainable.parameters()):
        raise ConfigError("trainable module has frozen parameters")


def train_sgim(unet: UNet, train_pairs, val_pairs, cfg: SGIMConfig, schedule: NoiseSchedule, seed=0, frozen_extra=(), check_every=None):
    """Fit the guidance encoder and SPADE layers with the denoiser frozen.

    ``train_pairs``/``val_pairs`` are ``(z_gt, z_in)`` tuples of scaled latents.
    The denoiser always sees the NULL condition. Frozen hashes of ``unet`` and
    every module in ``frozen_extra`` are re-checked every ``check_every`` steps
    and at the end.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    frozen = [unet, *frozen_extra]
    hashes = [freeze(m) for m in frozen]
    sgim = SGIM.for_unet(unet, latent_channels=train_pairs[0].shape[1])
    sgim.train()
    audit_partition(sgim, frozen)

    st = schedule.tensors()
    z_gt = torch.as_tensor(train_pairs[0], dtype=torch.float32)
    z_in = torch.as_tensor(train_pairs[1], dtype=torch.float32)
    vz_gt = torch.as_tensor(val_pairs[0], dtype=torch.float32)
    vz_in = torch.as_tensor(val_pairs[1], dtype=torch.float32)
    vt, veps = fixed_validation_draws(len(vz_gt), schedule.T, vz_gt.shape[1:], seed + 1)
    null = torch.full((len(vz_gt),), NULL_TOKEN, dtype=torch.long)

    opt = torch.optim.Adam(sgim.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.steps, 1), eta_min=cfg.lr * 0.05)
    history = {"loss": [], "val": [], "val_step": []}
    check_every = check_every or max(1, cfg.steps // 10)

    def validate(step):
        sgim.eval()
        with torch.no_grad():
            history["val"].append(diffusion_loss(unet, vz_gt, vt, veps, null, st, modulate=sgim.guidance(vz_in)).item())
            history["val_step"].append(step)
        sgim.train()

    def check():
        for m, h, name in zip(frozen, hashes, ["denoiser"] + [type(m).__name__ for m in frozen_extra]):
            assert_frozen(m, h, name)

    validate(0)
    for step in range(cfg.steps):
        idx = torch.from_numpy(rng.choice(len(z_gt), cfg.batch_size, replace=len(z_gt) < cfg.batch_size))
        t = torch.from_numpy(rng.integers(0, schedule.T, cfg.batch_size))
        eps = torch.from_numpy(rng.standard_normal(z_gt[idx].shape).astype(np.float32))
        tokens = torch.full((cfg.batch_size,), NULL_TOKEN, dtype=torch.long)
        loss = diffusion_loss(unet, z_gt[idx], t, eps, tokens, st, modulate=sgim.guidance(z_in[idx]))
        if not torch.isfinite(loss):
            raise TrainingError(f"SGIM loss became {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(sgim.parameters(), 1.0)
        opt.step()
        sched.step()
        history["loss"].append(loss.item())
        if (step + 1) % check_every == 0:
            check()
            validate(step + 1)
            log.info("sgim step %d loss %.4f val %.4f", step + 1, loss.item(), history["val"][-1])
    check()
    sgim.eval()
    return sgim, history
