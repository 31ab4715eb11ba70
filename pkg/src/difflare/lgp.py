"""Luminance mask and its latent-resolution attention mask.

Pixels whose BT.601 luma reaches the threshold are treated as flare; every
other pixel is marked 1 (flare-free). The attention mask pools that indicator
down to the latent grid, applies SiLU and repeats the flattened result once per
query position.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation, sobel

from .errors import DimensionError, ParameterError
from .imaging import luminance

DEFAULT_THRESHOLD = 0.85


@dataclass(frozen=True)
class LuminanceMask:
    mask: np.ndarray  # (H, W) uint8, 1 = flare-free
    threshold: float


@dataclass(frozen=True)
class AttentionMask:
    lm_prime: np.ndarray  # (1, h*w, h*w)
    source: LuminanceMask


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x / (1.0 + np.exp(-x))


def luminance_mask(img, s=DEFAULT_THRESHOLD, gradient_dilation=0, gradient_threshold=0.1):
    """Threshold the Y channel: 1 where Y < s, else 0.

    The comparison is against the BT.601 luma of each pixel.

    ``gradient_dilation`` > 0 optionally grows the flare region by that many
    pixels, restricted to pixels whose luma gradient magnitude exceeds
    ``gradient_threshold``. Off by default.
    """
    if not 0.0 < s < 1.0:
        raise ParameterError(f"threshold s must lie in (0, 1), got {s}")
    y = luminance(img)
    flare = y >= s
    if gradient_dilation > 0 and flare.any():
        grad = np.hypot(sobel(y, axis=0), sobel(y, axis=1)) / 8.0
        grown = binary_dilation(flare, iterations=int(gradient_dilation))
        flare = flare | (grown & (grad > gradient_threshold))
    return LuminanceMask(mask=(~flare).astype(np.uint8), threshold=float(s))


def _bin_edges(n_in, n_out):
    # adaptive pooling bins: start = floor(i*n/k), end = ceil((i+1)*n/k)
    starts = (np.arange(n_out) * n_in) // n_out
    ends = -((-(np.arange(1, n_out + 1) * n_in)) // n_out)
    return starts, ends


def adaptive_avg_pool(arr: np.ndarray, out_shape) -> np.ndarray:
    """Average-pool a 2-D array to ``out_shape`` with adaptive bin edges."""
    h, w = arr.shape
    oh, ow = out_shape
    if oh > h or ow > w or oh < 1 or ow < 1:
        raise DimensionError(f"cannot pool {arr.shape} down to {out_shape}")
    if h % oh == 0 and w % ow == 0:
        return arr.reshape(oh, h // oh, ow, w // ow).mean(axis=(1, 3))
    rs, re = _bin_edges(h, oh)
    cs, ce = _bin_edges(w, ow)
    out = np.empty((oh, ow))
    for i in range(oh):
        for j in range(ow):
            out[i, j] = arr[rs[i] : re[i], cs[j] : ce[j]].mean()
    return out


def to_attention_mask(lm: LuminanceMask, latent_shape) -> AttentionMask:
    pooled = adaptive_avg_pool(lm.mask.astype(np.float64), tuple(latent_shape))
    row = silu(pooled).reshape(1, -1)
    n = row.shape[1]
    lm_prime = np.broadcast_to(row[:, None, :], (1, n, n)).copy()
    return AttentionMask(lm_prime=lm_prime, source=lm)


def pooled_mask_row(img, latent_shape, s=DEFAULT_THRESHOLD, gradient_dilation=0) -> np.ndarray:
    """Shortcut returning just the SiLU-activated pooled row, shape (h*w,).

    Batched attention code broadcasts this row instead of materializing the
    stacked (h*w, h*w) matrix.
    """
    lm = luminance_mask(img, s, gradient_dilation=gradient_dilation)
    return silu(adaptive_avg_pool(lm.mask.astype(np.float64), tuple(latent_shape))).reshape(-1)
