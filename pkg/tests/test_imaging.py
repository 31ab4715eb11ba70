import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from difflare.errors import AssetError, DimensionError
from difflare.imaging import (
    gaussian_window,
    linear_to_srgb,
    luminance,
    psnr,
    read_png,
    rgb_to_ycbcr,
    srgb_to_linear,
    ssim,
    write_png,
    ycbcr_to_rgb,
)


def _ssim_oracle(a, b, win_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Scalar loop SSIM on a single channel, window by window."""
    ax = np.arange(win_size) - win_size // 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = k1**2, k2**2
    vals = []
    for i in range(a.shape[0] - win_size + 1):
        for j in range(a.shape[1] - win_size + 1):
            pa = a[i : i + win_size, j : j + win_size]
            pb = b[i : i + win_size, j : j + win_size]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * pa * pa).sum() - ma * ma
            vb = (w * pb * pb).sum() - mb * mb
            cov = (w * pa * pb).sum() - ma * mb
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_psnr_closed_form():
    a = np.full((16, 16, 3), 0.5)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a + 0.01) == pytest.approx(40.0, abs=1e-9)


def test_psnr_identical_is_capped():
    a = np.random.default_rng(0).random((12, 12, 3))
    assert psnr(a, a) == 100.0


def test_ssim_self_is_one():
    a = np.random.default_rng(1).random((24, 24, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    a = rng.random((16, 18, 3))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    expected = np.mean([_ssim_oracle(a[..., c], b[..., c]) for c in range(3)])
    assert ssim(a, b) == pytest.approx(expected, abs=1e-10)


def test_ssim_too_small():
    a = np.zeros((8, 8, 3))
    with pytest.raises(DimensionError):
        ssim(a, a)


def test_gaussian_window_normalized():
    w = gaussian_window(11, 1.5)
    assert w.sum() == pytest.approx(1.0)
    assert np.allclose(w, w.T)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr(np.zeros((8, 8, 3)), np.zeros((9, 8, 3)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (8, 8, 3), elements=st.floats(0, 1)))
def test_ycbcr_roundtrip(img):
    assert np.allclose(ycbcr_to_rgb(rgb_to_ycbcr(img)), img, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (8, 8, 3), elements=st.floats(0, 1)))
def test_gamma_roundtrip(img):
    assert np.allclose(linear_to_srgb(srgb_to_linear(img)), img, atol=1e-12)


def test_luminance_weights():
    img = np.zeros((8, 8, 3))
    img[..., 0] = 1.0
    assert np.allclose(luminance(img), 0.299)
    assert np.allclose(luminance(np.ones((8, 8, 3))), 1.0)


def test_png_roundtrip(tmp_path):
    img = np.random.default_rng(3).random((10, 12, 3))
    write_png(tmp_path / "a.png", img)
    back = read_png(tmp_path / "a.png")
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_read_png_missing(tmp_path):
    with pytest.raises(AssetError):
        read_png(tmp_path / "nope.png")
