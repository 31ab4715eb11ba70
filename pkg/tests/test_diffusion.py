import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from difflare.config import DiffusionConfig
from difflare.diffusion import (
    NULL_TOKEN,
    UNet,
    build_schedule,
    cfg_noise,
    diffusion_loss,
    predict_noise,
    pretrain_diffusion,
    q_sample,
    sample,
)
from difflare.errors import ParameterError, SamplingError


def _z(seed, b=2):
    return torch.randn((b, 4, 8, 8), generator=torch.Generator().manual_seed(seed))


def test_cfg_scale_zero_is_conditional(tiny_unet):
    for seed in range(5):
        z = _z(seed)
        assert torch.equal(cfg_noise(tiny_unet, z, 17, 1, 0.0), predict_noise(tiny_unet, z, 17, 1))


@pytest.mark.parametrize("scale", [0.0, 0.5, 1.0, 3.0])
def test_cfg_null_is_unconditional(tiny_unet, scale):
    z = _z(1)
    assert torch.equal(cfg_noise(tiny_unet, z, 5, None, scale), predict_noise(tiny_unet, z, 5, None))
    assert torch.equal(cfg_noise(tiny_unet, z, 5, NULL_TOKEN, scale), predict_noise(tiny_unet, z, 5, None))


def test_cfg_scale_one(tiny_unet):
    z = _z(2)
    eps_c = predict_noise(tiny_unet, z, 9, 1)
    eps_u = predict_noise(tiny_unet, z, 9, None)
    assert torch.equal(cfg_noise(tiny_unet, z, 9, 1, 1.0), 2 * eps_c - eps_u)


def test_cfg_negative_scale(tiny_unet):
    with pytest.raises(ParameterError):
        cfg_noise(tiny_unet, _z(0), 0, 1, -1.0)


def test_null_token_embeds_to_zero(tiny_unet):
    assert torch.count_nonzero(tiny_unet.cond_emb.weight[NULL_TOKEN]) == 0


def test_q_sample_statistics():
    sched = build_schedule(200)
    rng = np.random.default_rng(0)
    z0 = np.array([1.5, -0.7, 0.2])
    for t in (0, 50, 199):
        eps = rng.standard_normal((10_000, 3))
        zt = q_sample(np.broadcast_to(z0, eps.shape), t, eps, sched)
        ab = sched.alpha_bar[t]
        mean, var = np.sqrt(ab) * z0, 1 - ab
        assert np.all(np.abs(zt.mean(0) - mean) <= 0.05 * np.maximum(np.abs(mean), np.sqrt(var)))
        assert np.all(np.abs(zt.var(0) - var) <= 0.05 * var)


def test_q_sample_numpy_matches_torch():
    sched = build_schedule(50)
    z0, eps = np.random.default_rng(1).standard_normal((2, 3, 4, 4, 4))
    t = np.array([3, 40, 49])
    a = q_sample(z0, t, eps, sched)
    b = q_sample(torch.from_numpy(z0), torch.from_numpy(t), torch.from_numpy(eps), sched)
    assert np.allclose(a, b.numpy())


def test_q_sample_bad_t():
    with pytest.raises(ParameterError):
        q_sample(np.zeros(3), 200, np.zeros(3), build_schedule(200))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 1000), st.floats(1e-6, 0.01), st.floats(0.0, 0.5), st.sampled_from(["linear", "cosine"]))
def test_alpha_bar_strictly_decreasing(T, b0, span, kind):
    sched = build_schedule(T, b0, min(b0 + span, 0.999), kind)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all((sched.alpha_bar > 0) & (sched.alpha_bar < 1))
    assert np.all(sched.beta > 0)


@pytest.mark.parametrize("args", [(0,), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 0.02, "quadratic")])
def test_schedule_bad_args(args):
    with pytest.raises(ParameterError):
        build_schedule(*args)


def test_sample_deterministic_and_seed_sensitive(tiny_unet):
    sched = build_schedule(10)
    a = sample(tiny_unet, sched, (1, 4, 8, 8), seed=3)
    b = sample(tiny_unet, sched, (1, 4, 8, 8), seed=3)
    c = sample(tiny_unet, sched, (1, 4, 8, 8), seed=4)
    assert torch.equal(a, b) and not torch.equal(a, c)


def test_sample_raises_on_nonfinite(tiny_unet):
    with torch.no_grad():
        tiny_unet.conv_out.bias.fill_(float("nan"))
    with pytest.raises(SamplingError, match="t=9"):
        sample(tiny_unet, build_schedule(10), (1, 4, 8, 8))


def test_unet_output_shape_and_levels(tiny_unet):
    out = tiny_unet(_z(0), torch.tensor([0, 5]), torch.tensor([0, 1]))
    assert out.shape == (2, 4, 8, 8)
    specs = tiny_unet.block_specs()
    assert {level for _, level, _ in specs} == {0, 1, 2}


def test_diffusion_loss_gradient_matches_finite_difference():
    torch.manual_seed(0)
    model = UNet(4, (8, 8), vocab_size=3, attention=False).double()
    sched = build_schedule(20).tensors(torch.float64)
    z0 = torch.randn(2, 4, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(z0)
    t, tok = torch.tensor([3, 15]), torch.tensor([0, 1])
    loss = diffusion_loss(model, z0, t, eps, tok, sched)
    loss.backward()
    p = model.conv_out.weight
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(10):
        idx = tuple(int(rng.integers(0, n)) for n in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = diffusion_loss(model, z0, t, eps, tok, sched).item()
            p[idx] = orig - h
            dn = diffusion_loss(model, z0, t, eps, tok, sched).item()
            p[idx] = orig
        fd = (up - dn) / (2 * h)
        assert abs(fd - p.grad[idx].item()) <= 1e-2 * max(abs(fd), 1e-4)


def test_pretrain_reduces_validation_loss():
    rng = np.random.default_rng(0)
    # structured toy latents: smooth random fields
    base = rng.standard_normal((64, 4, 2, 2)).astype(np.float32)
    lat = torch.nn.functional.interpolate(torch.from_numpy(base), size=(8, 8), mode="bilinear", align_corners=False)
    lat = lat / lat.std()
    cfg = DiffusionConfig(T=50, widths=(16, 32), steps=150, batch_size=16, lr=2e-3, vocab_size=4)
    _, hist = pretrain_diffusion(lat[:48], lat[48:], cfg, seed=0)
    assert hist["val"][-1] < 0.7 * hist["val"][0]
