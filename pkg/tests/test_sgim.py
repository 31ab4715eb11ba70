import numpy as np
import pytest
import torch
from torch import nn

from conftest import randomize
from difflare.checkpoint import freeze, state_hash
from difflare.config import SGIMConfig
from difflare.diffusion import build_schedule, predict_noise
from difflare.errors import ConfigError, DimensionError, IntegrityError
from difflare.nn import norm
from difflare.sgim import SGIM, SpadeLayer, audit_partition, modulate, train_sgim


def test_identity_at_init_on_100_inputs(tiny_unet):
    sgim = SGIM.for_unet(tiny_unet, 4)
    gen = torch.Generator().manual_seed(0)
    for i in range(100):
        z = torch.randn((1, 4, 8, 8), generator=gen)
        z_in = torch.randn((1, 4, 8, 8), generator=gen)
        t = int(torch.randint(0, 200, (1,), generator=gen))
        cond = None if i % 2 else 1
        with torch.no_grad():
            guided = predict_noise(tiny_unet, z, t, cond, sgim.guidance(z_in))
            plain = predict_noise(tiny_unet, z, t, cond)
        assert torch.equal(guided, plain)


def test_trained_spade_changes_output(tiny_unet):
    sgim = randomize(SGIM.for_unet(tiny_unet, 4))
    z = torch.randn(1, 4, 8, 8)
    with torch.no_grad():
        assert not torch.equal(predict_noise(tiny_unet, z, 3, None, sgim.guidance(z)), predict_noise(tiny_unet, z, 3, None))


def test_spade_block_coverage(tiny_unet):
    sgim = SGIM.for_unet(tiny_unet, 4)
    assert set(sgim.spade) == {key for key, _, _ in tiny_unet.block_specs()}
    pyramid = sgim.extract_guidance(torch.zeros(2, 4, 8, 8))
    assert [f.shape[-1] for f in pyramid] == [8, 4, 2]


def test_guidance_resolution_mismatch(tiny_unet):
    sgim = SGIM.for_unet(tiny_unet, 4)
    with pytest.raises(ConfigError):
        sgim.extract_guidance(torch.zeros(1, 4, 6, 6))
    g = sgim.guidance(torch.zeros(1, 4, 16, 16))
    with pytest.raises(ConfigError):
        predict_noise(tiny_unet, torch.zeros(1, 4, 8, 8), 0, None, g)


def test_spade_shape_check():
    layer = SpadeLayer(3, 5)
    with pytest.raises(DimensionError):
        layer(torch.zeros(1, 5, 4, 4), torch.zeros(1, 3, 2, 2))


def test_spade_gradient_matches_finite_difference():
    torch.manual_seed(0)
    layer = randomize(SpadeLayer(3, 4), seed=1, scale=0.3).double()
    normalizer = norm(4).double()
    h = torch.randn(2, 4, 5, 5, dtype=torch.float64, requires_grad=True)
    fea = torch.randn(2, 3, 5, 5, dtype=torch.float64)
    w = torch.randn(2, 4, 5, 5, dtype=torch.float64)

    def f():
        return (modulate(h, fea, layer, normalizer) * w).sum()

    f().backward()
    params = [h, layer.gamma.weight, layer.beta.weight]
    rng = np.random.default_rng(0)
    eps = 1e-6
    for k in range(50):
        p = params[k % 3]
        idx = tuple(int(rng.integers(0, n)) for n in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + eps
            up = f().item()
            p[idx] = orig - eps
            dn = f().item()
            p[idx] = orig
        fd = (up - dn) / (2 * eps)
        assert abs(fd - p.grad[idx].item()) <= 1e-2 * max(abs(fd), 1e-6)


def test_audit_partition():
    a, b = nn.Linear(2, 2), nn.Linear(2, 2)
    freeze(b)
    audit_partition(a, [b])
    with pytest.raises(ConfigError):
        audit_partition(a, [a])
    b.weight.requires_grad_(True)
    with pytest.raises(ConfigError):
        audit_partition(a, [b])


def _pairs(n, seed):
    g = torch.Generator().manual_seed(seed)
    z_gt = torch.randn((n, 4, 8, 8), generator=g)
    return z_gt, z_gt + 0.5 * torch.randn((n, 4, 8, 8), generator=g)


def test_train_sgim_keeps_denoiser_frozen(tiny_unet):
    before = state_hash(tiny_unet)
    sgim, hist = train_sgim(tiny_unet, _pairs(32, 0), _pairs(8, 1), SGIMConfig(steps=20, batch_size=8), build_schedule(50), seed=0)
    assert state_hash(tiny_unet) == before
    assert len(hist["val"]) >= 2
    assert any(p.abs().sum() > 0 for p in sgim.spade.parameters())


def test_train_sgim_detects_tampering(tiny_unet):
    class Tamper(nn.Module):
        # a frozen "extra" whose weights drift during training
        def __init__(self):
            super().__init__()
            self.w = nn.Parameter(torch.zeros(1))

        def parameters(self, recurse=True):
            with torch.no_grad():
                self.w.add_(1.0)
            return super().parameters(recurse)

    with pytest.raises(IntegrityError):
        train_sgim(tiny_unet, _pairs(16, 0), _pairs(4, 1), SGIMConfig(steps=4, batch_size=4), build_schedule(20), frozen_extra=(Tamper(),), check_every=2)
