"""Adaptive feature fusion with luminance-masked self-attention.

Encoder features of the corrupted input and decoder features of the restored
latent are concatenated, passed through ``m`` convolutions and ``n`` RRDBs,
then through self-attention layers whose scores are multiplied by the
luminance attention mask. The result is added to the decoder feature as a
residual and the frozen VQ decoder renders the final image.

    scores = (Q K^T) / sqrt(d) * LM'
    out    = softmax(scores) V
"""
from __future__ import annotations

import logging
import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import assert_frozen, freeze
from .config import AFFMConfig
from .errors import DimensionError, ParameterError, TrainingError
from .nn import norm
from .sgim import audit_partition

log = logging.getLogger(__name__)

MASK_MODES = ("multiply", "additive")
_ADDITIVE_FILL = -1e4


def masked_attention(q, k, v, lm_prime=None, mode="multiply"):
    """Attention over the last two dims of ``q``, ``k``, ``v`` (..., N, d).

    ``lm_prime`` broadcasts against the (..., N, N) score matrix; ``None`` gives
    plain scaled dot-product attention. In ``"additive"`` mode keys whose mask
    value is 0 receive a large negative score instead of being scaled.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"incompatible q/k/v shapes {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if lm_prime is not None:
        lm_prime = torch.as_tensor(lm_prime, dtype=scores.dtype)
        if lm_prime.shape[-2:] != scores.shape[-2:]:
            raise DimensionError(f"mask {tuple(lm_prime.shape)} does not match scores {tuple(scores.shape)}")
        if mode == "multiply":
            scores = scores * lm_prime
        elif mode == "additive":
            scores = scores.masked_fill(lm_prime <= 0, _ADDITIVE_FILL)
        else:
            raise ParameterError(f"mask mode must be one of {MASK_MODES}")
    return torch.softmax(scores, dim=-1) @ v


class MaskedSelfAttention(nn.Module):
    """Multi-head self-attention over a feature map with an optional score mask."""

    def __init__(self, width, heads=1, mode="multiply"):
        super().__init__()
        if width % heads:
            raise ParameterError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.mode = mode
        self.norm = norm(width)
        self.w_q = nn.Linear(width, width, bias=False)
        self.w_k = nn.Linear(width, width, bias=False)
        self.w_v = nn.Linear(width, width, bias=False)
        self.proj = nn.Linear(width, width)

    def forward(self, x, lm_prime=None):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)  # (b, N, c)

        def split(t):
            return t.reshape(b, h * w, self.heads, c // self.heads).transpose(1, 2)

        q, k, v = split(self.w_q(tokens)), split(self.w_k(tokens)), split(self.w_v(tokens))
        mask = None
        if lm_prime is not None:
            mask = torch.as_tensor(lm_prime, dtype=x.dtype)
            if mask.ndim == 3:
                mask = mask[:, None]  # broadcast over heads
        out = masked_attention(q, k, v, mask, self.mode)
        out = out.transpose(1, 2).reshape(b, h * w, c)
        return x + self.proj(out).transpose(1, 2).reshape(b, c, h, w)


class DenseBlock(nn.Module):
    def __init__(self, width, growth):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(width + i * growth, growth if i < 4 else width, 3, padding=1) for i in range(5))

    def forward(self, x):
        feats = [x]
        for i, conv in enumerate(self.convs):
            out = conv(torch.cat(feats, 1))
            if i < 4:
                feats.append(F.leaky_relu(out, 0.2))
        return x + 0.2 * out


class RRDB(nn.Module):
    """Residual-in-residual dense block: three dense blocks, scaled outer skip."""

    def __init__(self, width, growth=32):
        super().__init__()
        self.blocks = nn.Sequential(DenseBlock(width, growth), DenseBlock(width, growth), DenseBlock(width, growth))

    def forward(self, x):
        return x + 0.2 * self.blocks(x)


class AFFM(nn.Module):
    def __init__(self, enc_channels, dec_channels, width=64, m=2, n=2, heads=1, attention_layers=1, growth=32, mask_mode="multiply"):
        super().__init__()
        if m < 1 or n < 1:
            raise ParameterError(f"need m >= 1 and n >= 1, got m={m}, n={n}")
        if mask_mode not in MASK_MODES:
            raise ParameterError(f"mask mode must be one of {MASK_MODES}")
        self.enc_channels = enc_channels
        self.dec_channels = dec_channels
        convs = [nn.Conv2d(enc_channels + dec_channels, width, 3, padding=1)]
        convs += [nn.Conv2d(width, width, 3, padding=1) for _ in range(m - 1)]
        self.convs = nn.ModuleList(convs)
        self.rrdbs = nn.Sequential(*[RRDB(width, growth) for _ in range(n)])
        self.attn = nn.ModuleList(MaskedSelfAttention(width, heads, mask_mode) for _ in range(attention_layers))
        self.out = nn.Conv2d(width, dec_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, enc_feat, dec_feat, lm_prime=None):
        if enc_feat.shape[-2:] != dec_feat.shape[-2:] or enc_feat.shape[0] != dec_feat.shape[0]:
            raise DimensionError(f"encoder tap {tuple(enc_feat.shape)} and decoder tap {tuple(dec_feat.shape)} differ")
        if enc_feat.shape[1] != self.enc_channels or dec_feat.shape[1] != self.dec_channels:
            raise DimensionError("tap channel counts do not match the fusion module")
        h = torch.cat([enc_feat, dec_feat], 1)
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        h = self.rrdbs(h)
        for layer in self.attn:
            h = layer(h, lm_prime)
        return dec_feat + self.out(h)


def build_affm(cfg: AFFMConfig, feat_channels) -> AFFM:
    return AFFM(feat_channels, feat_channels, cfg.width, cfg.m, cfg.n, cfg.attention_heads, cfg.attention_layers, cfg.growth, cfg.mask_mode)


def fuse(affm: AFFM, vq, enc_feat, dec_feat, lm_prime=None):
    """Fused image in [0, 1], (B, 3, H, W)."""
    return vq.decode_tail(affm(enc_feat, dec_feat, lm_prime)).clamp(0.0, 1.0)


def mask_rows_to_lm_prime(rows):
    """(B, N) pooled+activated rows -> (B, N, N) stacked attention masks."""
    rows = torch.as_tensor(rows, dtype=torch.float32)
    n = rows.shape[-1]
    return rows[:, None, :].expand(rows.shape[0], n, n)


def affm_loss(out, gt, x_in, pixel_mask, weight):
    """L1 to ground truth plus ``weight`` x L1 to the input on flare-free pixels."""
    fid = ((out - x_in).abs() * pixel_mask).sum() / (pixel_mask.sum() * out.shape[1]).clamp_min(1.0)
    return (out - gt).abs().mean() + weight * fid


def train_affm(vq, data, val, cfg: AFFMConfig, guided=True, seed=0, frozen_extra=()):
    """Fit the fusion module with every upstream network frozen.

    ``data``/``val`` are dicts of tensors: ``x_in``, ``gt`` (B, 3, H, W),
    ``z0`` (restored latents, unscaled), ``mask_rows`` (B, N) and
    ``pixel_mask`` (B, 1, H, W). ``guided=False`` trains the same network with
    plain (unmasked) attention.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    frozen = [vq, *frozen_extra]
    hashes = [freeze(m) for m in frozen]
    affm = build_affm(cfg, vq.feat_channels)
    affm.train()
    audit_partition(affm, frozen)

    with torch.no_grad():
        enc = vq.encode_features(data["x_in"])[1]
        dec = vq.decode_head(data["z0"])
        v_enc = vq.encode_features(val["x_in"])[1]
        v_dec = vq.decode_head(val["z0"])
    lm = mask_rows_to_lm_prime(data["mask_rows"]) if guided else None
    v_lm = mask_rows_to_lm_prime(val["mask_rows"]) if guided else None

    opt = torch.optim.Adam(affm.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.steps, 1), eta_min=cfg.lr * 0.05)
    history = {"loss": [], "val_l1": [], "val_step": []}

    def validate(step):
        affm.eval()
        with torch.no_grad():
            out = fuse(affm, vq, v_enc, v_dec, v_lm)
            history["val_l1"].append((out - val["gt"]).abs().mean().item())
            history["val_step"].append(step)
        affm.train()

    validate(0)
    n = len(enc)
    for step in range(cfg.steps):
        idx = torch.from_numpy(rng.choice(n, cfg.batch_size, replace=n < cfg.batch_size))
        out = vq.decode_tail(affm(enc[idx], dec[idx], None if lm is None else lm[idx]))
        loss = affm_loss(out, data["gt"][idx], data["x_in"][idx], data["pixel_mask"][idx], cfg.fidelity_weight)
        if not torch.isfinite(loss):
            raise TrainingError(f"AFFM loss became {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(affm.parameters(), 1.0)
        opt.step()
        sched.step()
        history["loss"].append(loss.item())
        if (step + 1) % max(1, cfg.steps // 10) == 0:
            for m, h in zip(frozen, hashes):
                assert_frozen(m, h, type(m).__name__)
            validate(step + 1)
            log.info("affm[%s] step %d loss %.4f val_l1 %.4f", "guided" if guided else "unguided", step + 1, loss.item(), history["val_l1"][-1])
    for m, h in zip(frozen, hashes):
        assert_frozen(m, h, type(m).__name__)
    affm.eval()
    return affm, history
