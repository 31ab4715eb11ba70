"""Toy vector-quantized autoencoder.

The encoder's continuous (pre-quantization) output is the latent used by the
diffusion model; quantization happens only on the way into the decoder.
Intermediate taps at latent resolution feed the fusion module:

* ``enc_feat``: output of the encoder's last block, before the latent projection
* ``dec_feat``: output of the decoder's first block, before any upsampling
"""
from __future__ import annotations

import logging
import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import VQConfig
from .errors import DimensionError, TrainingError
from .nn import ResBlock, norm

log = logging.getLogger(__name__)


def to_tensor(images) -> torch.Tensor:
    """(N, H, W, 3) or (H, W, 3) numpy in [0, 1] -> (N, 3, H, W) float32."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_numpy(images: torch.Tensor) -> np.ndarray:
    return images.detach().cpu().double().numpy().transpose(0, 2, 3, 1)


class VectorQuantizer(nn.Module):
    def __init__(self, codebook_size, dim, commitment=0.25):
        super().__init__()
        self.codebook = nn.Embedding(codebook_size, dim)
        self.codebook.weight.data.uniform_(-1.0 / codebook_size, 1.0 / codebook_size)
        self.commitment = commitment

    def lookup(self, z):
        b, c, h, w = z.shape
        flat = z.permute(0, 2, 3, 1).reshape(-1, c)
        emb = self.codebook.weight
        d = (flat.pow(2).sum(1, keepdim=True) - 2 * flat @ emb.t() + emb.pow(2).sum(1)[None])
        idx = d.argmin(1)
        zq = emb[idx].reshape(b, h, w, c).permute(0, 3, 1, 2)
        return zq, idx.reshape(b, h, w)

    def forward(self, z):
        zq, idx = self.lookup(z)
        loss = F.mse_loss(zq, z.detach()) + self.commitment * F.mse_loss(z, zq.detach())
        # straight-through estimator
        zq = z + (zq - z).detach()
        return zq, idx, loss


class VQModel(nn.Module):
    def __init__(self, base_width=32, latent_channels=4, downsample=4, codebook_size=256, commitment=0.25):
        super().__init__()
        n_down = int(round(math.log2(downsample)))
        if 2**n_down != downsample or n_down < 1:
            raise DimensionError(f"downsample factor must be a power of 2, got {downsample}")
        self.downsample = downsample
        self.latent_channels = latent_channels
        w = base_width
        # first x2 is a lossless pixel (un)shuffle; nothing runs at full resolution
        chans = [min(w * 2**i, 2 * w) for i in range(n_down)]
        self.feat_channels = chans[-1]

        self.enc_in = nn.Sequential(nn.PixelUnshuffle(2), nn.Conv2d(12, w, 3, padding=1))
        enc = []
        for i in range(n_down - 1):
            enc.append(ResBlock(chans[i], chans[i]))
            enc.append(nn.Conv2d(chans[i], chans[i + 1], 4, stride=2, padding=1))
        self.enc_blocks = nn.ModuleList(enc)
        self.enc_mid = ResBlock(chans[-1], chans[-1])
        self.enc_out = nn.Sequential(norm(chans[-1]), nn.SiLU(), nn.Conv2d(chans[-1], latent_channels, 1))

        self.quantizer = VectorQuantizer(codebook_size, latent_channels, commitment)

        self.dec_in = nn.Conv2d(latent_channels, chans[-1], 3, padding=1)
        self.dec_mid = ResBlock(chans[-1], chans[-1])
        dec = []
        for i in reversed(range(n_down - 1)):
            dec.append(nn.Upsample(scale_factor=2, mode="nearest"))
            dec.append(nn.Conv2d(chans[i + 1], chans[i + 1], 3, padding=1))
            dec.append(ResBlock(chans[i + 1], chans[i]))
        self.dec_blocks = nn.ModuleList(dec)
        self.dec_out = nn.Sequential(norm(w), nn.SiLU(), nn.Conv2d(w, 12, 3, padding=1), nn.PixelShuffle(2))

    # -- encoder -------------------------------------------------------------
    def _check(self, x):
        if x.shape[-1] % self.downsample or x.shape[-2] % self.downsample:
            raise DimensionError(f"image size {tuple(x.shape[-2:])} not divisible by {self.downsample}")

    def encode_features(self, x):
        """Return ``(z, enc_feat)`` for images ``x`` in [0, 1], shape (B, 3, H, W)."""
        self._check(x)
        h = self.enc_in(x * 2.0 - 1.0)
        for blk in self.enc_blocks:
            h = blk(h)
        feat = self.enc_mid(h)
        return self.enc_out(feat), feat

    def encode(self, x):
        return self.encode_features(x)[0]

    # -- decoder -------------------------------------------------------------
    def decode_head(self, z, quantize=True):
        if z.shape[1] != self.latent_channels:
            raise DimensionError(f"latent has {z.shape[1]} channels, model expects {self.latent_channels}")
        if quantize:
            z = self.quantizer.lookup(z)[0]
        return self.dec_mid(self.dec_in(z))

    def decode_tail(self, feat):
        h = feat
        for blk in self.dec_blocks:
            h = blk(h)
        return self.dec_out(h)

    def decode(self, z, quantize=True):
        return self.decode_tail(self.decode_head(z, quantize)).clamp(0.0, 1.0)

    def forward(self, x, quantize=True):
        z = self.encode(x)
        if quantize:
            zq, idx, qloss = self.quantizer(z)
        else:
            zq, idx, qloss = z, None, torch.zeros((), dtype=z.dtype)
        return self.decode_tail(self.decode_head(zq, quantize=False)), idx, qloss


def build_vq(cfg: VQConfig) -> VQModel:
    return VQModel(cfg.base_width, cfg.latent_channels, cfg.downsample, cfg.codebook_size, cfg.commitment)


@torch.no_grad()
def latent_scale(model: VQModel, images, batch=64) -> float:
    """1 / std of the pre-quantization latents over ``images``."""
    zs = [model.encode(to_tensor(images[i : i + batch])) for i in range(0, len(images), batch)]
    return float(1.0 / torch.cat(zs).std())


@torch.no_grad()
def codebook_usage(model: VQModel, images, batch=64) -> float:
    used = set()
    for i in range(0, len(images), batch):
        _, idx = model.quantizer.lookup(model.encode(to_tensor(images[i : i + batch])))
        used.update(idx.flatten().tolist())
    return len(used) / model.quantizer.codebook.num_embeddings


@torch.no_grad()
def roundtrip(model: VQModel, images, batch=64) -> np.ndarray:
    out = [to_numpy(model.decode(model.encode(to_tensor(images[i : i + batch])))) for i in range(0, len(images), batch)]
    return np.concatenate(out)


def pretrain_vq(train_images, val_images, cfg: VQConfig, seed=0):
    """Train on clean images with L1 reconstruction + codebook/commitment loss.

    Codes left unused over ``restart_every`` steps are re-seeded from random
    encoder outputs of the current batch.

    Returns ``(model, history)``; ``history`` holds per-step training loss and
    periodic validation L1.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = build_vq(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps, eta_min=cfg.lr * 0.05)
    train = to_tensor(train_images)
    val = to_tensor(val_images)
    usage = torch.zeros(cfg.codebook_size)
    history = {"loss": [], "val_l1": [], "val_step": []}

    def validate(step):
        model.eval()
        with torch.no_grad():
            rec = model.decode(model.encode(val))
            history["val_l1"].append(float((rec - val).abs().mean()))
            history["val_step"].append(step)
        model.train()

    validate(0)
    model.train()
    for step in range(cfg.steps):
        idx = torch.from_numpy(rng.choice(len(train), cfg.batch_size, replace=False))
        x = train[idx]
        rec, codes, qloss = model(x)
        loss = (rec - x).abs().mean() + qloss
        if not torch.isfinite(loss):
            raise TrainingError(f"VQ loss became {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        history["loss"].append(loss.item())
        usage += torch.bincount(codes.flatten(), minlength=cfg.codebook_size).float()
        if cfg.restart_every and (step + 1) % cfg.restart_every == 0 and step + 1 < cfg.steps:
            dead = (usage == 0).nonzero().flatten()
            if len(dead):
                with torch.no_grad():
                    z = model.encode(x).permute(0, 2, 3, 1).reshape(-1, cfg.latent_channels)
                    pick = torch.from_numpy(rng.choice(len(z), len(dead), replace=len(dead) > len(z)))
                    model.quantizer.codebook.weight.data[dead] = z[pick] + 0.01 * torch.randn(len(dead), cfg.latent_channels)
            usage.zero_()
        if (step + 1) % max(1, cfg.steps // 10) == 0:
            validate(step + 1)
            log.info("vq step %d loss %.4f val_l1 %.4f", step + 1, loss.item(), history["val_l1"][-1])
    model.eval()
    return model, history
