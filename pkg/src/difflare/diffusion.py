"""DDPM noise schedule, conditional UNet denoiser, guidance and sampling.

The denoiser predicts the noise ``eps`` added to a latent. Conditioning is a
single token id per batch; token 0 is reserved for the NULL condition and
always embeds to zeros.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import DiffusionConfig
from .errors import ConfigError, ParameterError, SamplingError, TrainingError
from .nn import ResBlock, SelfAttention2d, norm, timestep_embedding

log = logging.getLogger(__name__)

NULL_TOKEN = 0


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def tensors(self, dtype=torch.float32):
        return {k: torch.as_tensor(getattr(self, k), dtype=dtype) for k in ("beta", "alpha", "alpha_bar")}


def build_schedule(T=200, beta_start=1e-4, beta_end=0.02, kind="linear") -> NoiseSchedule:
    if T < 1:
        raise ParameterError(f"T must be positive, got {T}")
    if kind == "linear":
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        beta = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
        beta = np.maximum.accumulate(beta)
    else:
        raise ParameterError(f"unknown schedule {kind!r}")
    alpha = 1.0 - beta
    return NoiseSchedule(T, beta, alpha, np.cumprod(alpha))


def schedule_from_config(cfg: DiffusionConfig) -> NoiseSchedule:
    return build_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.schedule)


def q_sample(z0, t, eps, schedule: NoiseSchedule):
    """Forward process ``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``.

    ``t`` is an int or a per-batch integer tensor; works on numpy arrays and
    torch tensors alike.
    """
    t_arr = np.asarray(t.cpu() if torch.is_tensor(t) else t)
    if np.any(t_arr < 0) or np.any(t_arr >= schedule.T):
        raise ParameterError(f"t must lie in [0, {schedule.T}), got {t_arr}")
    ab = schedule.alpha_bar[t_arr]
    if torch.is_tensor(z0):
        ab = torch.as_tensor(ab, dtype=z0.dtype)
        if ab.ndim:
            ab = ab.reshape(-1, *([1] * (z0.ndim - 1)))
        return ab.sqrt() * z0 + (1 - ab).sqrt() * eps
    if np.ndim(ab):
        ab = ab.reshape(-1, *([1] * (np.ndim(z0) - 1)))
    return np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps


class UNet(nn.Module):
    """Small UNet over latents: one residual block per level on each path,
    self-attention at the coarsest level.

    Blocks carry ``key``/``level`` tags so a guidance module can address them;
    ``block_specs()`` lists ``(key, level, in_channels)``.
    """

    def __init__(self, latent_channels=4, widths=(64, 128, 128), vocab_size=16, attention=True):
        super().__init__()
        if len(widths) < 2:
            raise ConfigError("UNet needs at least two resolution levels")
        self.widths = tuple(widths)
        self.levels = len(widths)
        w0 = widths[0]
        temb = 4 * w0
        self.temb_dim = temb
        self.time_mlp = nn.Sequential(nn.Linear(w0, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.cond_emb = nn.Embedding(vocab_size, temb, padding_idx=NULL_TOKEN)
        self.conv_in = nn.Conv2d(latent_channels, w0, 3, padding=1)

        self.down = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        cin = w0
        for lvl in range(self.levels - 1):
            self.down.append(ResBlock(cin, widths[lvl], temb, key=f"down{lvl}", level=lvl))
            self.downsamplers.append(nn.Conv2d(widths[lvl], widths[lvl], 3, stride=2, padding=1))
            cin = widths[lvl]
        last = self.levels - 1
        self.mid1 = ResBlock(cin, widths[last], temb, key="mid1", level=last)
        self.mid_attn = SelfAttention2d(widths[last]) if attention else nn.Identity()
        self.mid2 = ResBlock(widths[last], widths[last], temb, key="mid2", level=last)

        self.up = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        cin = widths[last]
        for lvl in reversed(range(self.levels - 1)):
            self.upsamplers.append(nn.Conv2d(cin, cin, 3, padding=1))
            self.up.append(ResBlock(cin + widths[lvl], widths[lvl], temb, key=f"up{lvl}", level=lvl))
            cin = widths[lvl]
        self.norm_out = norm(w0)
        self.conv_out = nn.Conv2d(w0, latent_channels, 3, padding=1)

    def blocks(self):
        return [*self.down, self.mid1, self.mid2, *self.up]

    def block_specs(self):
        return [(b.key, b.level, b.in_channels) for b in self.blocks()]

    def forward(self, z, t, tokens, modulate=None):
        if z.shape[-1] % 2 ** (self.levels - 1) or z.shape[-2] % 2 ** (self.levels - 1):
            raise ConfigError(f"latent {tuple(z.shape[-2:])} not divisible across {self.levels} levels")
        temb = self.time_mlp(timestep_embedding(t, self.widths[0]).to(z.dtype))
        temb = temb + self.cond_emb(tokens)
        h = self.conv_in(z)
        skips = []
        for blk, ds in zip(self.down, self.downsamplers):
            h = blk(h, temb, modulate)
            skips.append(h)
            h = ds(h)
        h = self.mid1(h, temb, modulate)
        h = self.mid_attn(h)
        h = self.mid2(h, temb, modulate)
        for blk, us in zip(self.up, self.upsamplers):
            h = us(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = blk(torch.cat([h, skips.pop()], 1), temb, modulate)
        return self.conv_out(F.silu(self.norm_out(h)))


def build_unet(cfg: DiffusionConfig, latent_channels=4) -> UNet:
    return UNet(latent_channels, cfg.widths, cfg.vocab_size)


def _tokens(cond: Optional[int], batch: int) -> torch.Tensor:
    return torch.full((batch,), NULL_TOKEN if cond is None else int(cond), dtype=torch.long)


def _timesteps(t, batch):
    if torch.is_tensor(t) and t.ndim == 1:
        return t
    return torch.full((batch,), int(t), dtype=torch.long)


def predict_noise(model: UNet, z_t, t, cond: Optional[int] = None, guidance=None):
    """Noise estimate for ``z_t`` at step ``t``; ``cond=None`` is the NULL condition.

    ``guidance`` is an optional callable ``(key, level, h) -> h'`` applied to the
    normalized input of every residual block (see :class:`difflare.sgim.Guidance`).
    """
    b = z_t.shape[0]
    return model(z_t, _timesteps(t, b), _tokens(cond, b), modulate=guidance)


def cfg_noise(model: UNet, z_t, t, cond: Optional[int], scale: float, guidance=None):
    """Classifier-free guidance: ``(1 + s) eps(z, c) - s eps(z, null)``.

    With ``s == 0`` or a NULL condition the formula reduces to a single
    prediction; that prediction is returned directly so the identities hold
    bit-for-bit instead of up to rounding.
    """
    if scale < 0:
        raise ParameterError(f"guidance scale must be >= 0, got {scale}")
    if cond is None or cond == NULL_TOKEN:
        return predict_noise(model, z_t, t, None, guidance)
    eps_c = predict_noise(model, z_t, t, cond, guidance)
    if scale == 0:
        return eps_c
    eps_u = predict_noise(model, z_t, t, None, guidance)
    return (1 + scale) * eps_c - scale * eps_u


@torch.no_grad()
def sample(model: UNet, schedule: NoiseSchedule, shape, guidance=None, cond=None, scale=0.0, seed=0, x0_clip=6.0):
    """Ancestral DDPM sampling over all ``T`` steps, reverse variance ``beta_t``.

    The x0 estimate is clamped to ``[-x0_clip, x0_clip]`` before forming the
    posterior mean, which keeps trajectories bounded even for untrained weights.
    """
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(shape, generator=gen)
    sc = schedule.tensors()
    beta, alpha, ab = sc["beta"], sc["alpha"], sc["alpha_bar"]
    for t in reversed(range(schedule.T)):
        eps = cfg_noise(model, z, t, cond, scale, guidance)
        ab_prev = ab[t - 1] if t > 0 else torch.tensor(1.0)
        x0 = ((z - (1 - ab[t]).sqrt() * eps) / ab[t].sqrt()).clamp(-x0_clip, x0_clip)
        mean = (ab_prev.sqrt() * beta[t] / (1 - ab[t])) * x0 + (alpha[t].sqrt() * (1 - ab_prev) / (1 - ab[t])) * z
        if t > 0:
            z = mean + beta[t].sqrt() * torch.randn(shape, generator=gen)
        else:
            z = mean
        if not torch.isfinite(z).all():
            raise SamplingError(f"non-finite latent at reverse step t={t}")
    return z


def diffusion_loss(model, z0, t, eps, tokens, schedule_t, modulate=None):
    """Epsilon-prediction MSE; ``schedule_t`` is ``NoiseSchedule.tensors()``."""
    ab = schedule_t["alpha_bar"].to(z0.dtype)[t].reshape(-1, 1, 1, 1)
    z_t = ab.sqrt() * z0 + (1 - ab).sqrt() * eps
    return F.mse_loss(model(z_t, t, tokens, modulate=modulate), eps)


def fixed_validation_draws(n, T, shape, seed):
    gen = torch.Generator().manual_seed(int(seed))
    t = torch.randint(0, T, (n,), generator=gen)
    eps = torch.randn((n, *shape), generator=gen)
    return t, eps


def warmup_cosine(total, warmup_frac=0.05, floor=0.05):
    """LR multiplier: linear warmup, then cosine decay to ``floor``."""
    warm = max(1, int(total * warmup_frac))

    def f(step):
        if step < warm:
            return (step + 1) / warm
        frac = min(1.0, (step - warm) / max(1, total - warm))
        return floor + (1 - floor) * 0.5 * (1 + np.cos(np.pi * frac))

    return f


def pretrain_diffusion(train_latents, val_latents, cfg: DiffusionConfig, seed=0):
    """Train the denoiser on clean (scaled) latents.

    Every example carries ``cfg.clean_token``; a fraction ``cfg.cond_dropout``
    is replaced by NULL so the same network provides both branches of
    classifier-free guidance.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    train = torch.as_tensor(train_latents, dtype=torch.float32)
    val = torch.as_tensor(val_latents, dtype=torch.float32)
    model = build_unet(cfg, train.shape[1])
    schedule = schedule_from_config(cfg)
    st = schedule.tensors()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_cosine(cfg.steps))
    vt, veps = fixed_validation_draws(len(val), cfg.T, val.shape[1:], seed + 1)
    vtok = torch.full((len(val),), cfg.clean_token, dtype=torch.long)
    history = {"loss": [], "val": [], "val_step": []}

    def validate(step):
        model.eval()
        with torch.no_grad():
            history["val"].append(diffusion_loss(model, val, vt, veps, vtok, st).item())
            history["val_step"].append(step)
        model.train()

    validate(0)
    model.train()
    for step in range(cfg.steps):
        idx = torch.from_numpy(rng.choice(len(train), cfg.batch_size, replace=len(train) < cfg.batch_size))
        z0 = train[idx]
        t = torch.from_numpy(rng.integers(0, cfg.T, cfg.batch_size))
        eps = torch.from_numpy(rng.standard_normal(z0.shape).astype(np.float32))
        drop = rng.random(cfg.batch_size) < cfg.cond_dropout
        tokens = torch.from_numpy(np.where(drop, NULL_TOKEN, cfg.clean_token))
        loss = diffusion_loss(model, z0, t, eps, tokens, st)
        if not torch.isfinite(loss):
            raise TrainingError(f"diffusion loss became {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        history["loss"].append(loss.item())
        if (step + 1) % max(1, cfg.steps // 10) == 0:
            validate(step + 1)
            log.info("diffusion step %d loss %.4f val %.4f", step + 1, loss.item(), history["val"][-1])
    model.eval()
    return model, history
