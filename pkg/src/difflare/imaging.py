"""Image representation helpers, YCbCr conversion and full-reference metrics.

Images are plain ``float64`` arrays of shape ``(H, W, 3)`` holding sRGB-encoded
values in ``[0, 1]``. Linear-light arrays use the same layout; the helpers
``srgb_to_linear`` / ``linear_to_srgb`` move between the two encodings.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d

from .errors import AssetError, DimensionError

GAMMA = 2.2
PSNR_CAP = 100.0
MIN_SIDE = 8

# BT.601 full-range RGB -> YCbCr (rows: Y, Cb, Cr)
_RGB2YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735891647856, -0.331264108352144, 0.5],
        [0.5, -0.418687589158345, -0.081312410841655],
    ]
)
_YCC2RGB = np.linalg.inv(_RGB2YCC)


def as_image(arr, name="image") -> np.ndarray:
    """Validate an ``(H, W, 3)`` array and return it clipped to [0, 1] as float64."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"{name}: expected (H, W, 3), got {arr.shape}")
    if arr.shape[0] < MIN_SIDE or arr.shape[1] < MIN_SIDE:
        raise DimensionError(f"{name}: sides must be >= {MIN_SIDE}, got {arr.shape[:2]}")
    return np.clip(arr, 0.0, 1.0)


def srgb_to_linear(img: np.ndarray) -> np.ndarray:
    return np.power(np.clip(img, 0.0, 1.0), GAMMA)


def linear_to_srgb(img: np.ndarray) -> np.ndarray:
    return np.power(np.clip(img, 0.0, 1.0), 1.0 / GAMMA)


def rgb_to_ycbcr(img) -> np.ndarray:
    """BT.601 full-range conversion. Y in [0, 1], Cb/Cr in [-0.5, 0.5]."""
    img = as_image(img)
    return img @ _RGB2YCC.T


def ycbcr_to_rgb(ycc) -> np.ndarray:
    ycc = np.asarray(ycc, dtype=np.float64)
    if ycc.ndim != 3 or ycc.shape[2] != 3:
        raise DimensionError(f"expected (H, W, 3) YCbCr planes, got {ycc.shape}")
    return np.clip(ycc @ _YCC2RGB.T, 0.0, 1.0)


def luminance(img) -> np.ndarray:
    return rgb_to_ycbcr(img)[..., 0]


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for data range 1.0, capped at ``PSNR_CAP`` when MSE < 1e-10."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size=11, sigma=1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    r = len(win) // 2
    y = correlate1d(x, win, axis=0, mode="reflect")
    y = correlate1d(y, win, axis=1, mode="reflect")
    return y[r : x.shape[0] - r, r : x.shape[1] - r]


def ssim(a, b, win_size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0) -> float:
    """Mean SSIM over channels with a Gaussian window (valid region only)."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < win_size or a.shape[1] < win_size:
        raise DimensionError(f"image {a.shape[:2]} smaller than {win_size}x{win_size} window")
    win = gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def read_png(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise AssetError(f"cannot decode {path}: {exc}") from exc
    return arr


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(img)
    if arr.ndim == 2:
        Image.fromarray(arr, mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)
