import math

import numpy as np
import pytest
import torch

from conftest import randomize
from difflare.affm import AFFM, RRDB, MaskedSelfAttention, affm_loss, masked_attention, mask_rows_to_lm_prime
from difflare.errors import DimensionError, ParameterError


def _attention_oracle(q, k, v, mask):
    """Scalar triple loop: softmax over keys of (q.k / sqrt d) * mask."""
    n, d = len(q), len(q[0])
    out = []
    for i in range(n):
        scores = []
        for j in range(n):
            s = sum(q[i][c] * k[j][c] for c in range(d)) / math.sqrt(d)
            scores.append(s * (1.0 if mask is None else mask[i][j]))
        m = max(scores)
        e = [math.exp(s - m) for s in scores]
        tot = sum(e)
        out.append([sum(e[j] / tot * v[j][c] for j in range(n)) for c in range(len(v[0]))])
    return out


def test_masked_attention_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for case in range(200):
        n, d = int(rng.integers(1, 9)), int(rng.integers(1, 6))
        q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
        mask = None if case % 5 == 0 else rng.random((n, n)) * rng.integers(0, 2, (n, n))
        got = masked_attention(*(torch.from_numpy(a) for a in (q, k, v)), None if mask is None else torch.from_numpy(mask))
        want = np.array(_attention_oracle(q.tolist(), k.tolist(), v.tolist(), None if mask is None else mask.tolist()))
        assert np.abs(got.numpy() - want).max() < 1e-6


def test_constant_mask_is_temperature():
    rng = np.random.default_rng(1)
    q, k, v = (torch.from_numpy(rng.standard_normal((6, 4))) for _ in range(3))
    c = 0.37
    masked = masked_attention(q, k, v, torch.full((6, 6), c, dtype=torch.float64))
    assert torch.allclose(masked, masked_attention(q * c, k, v), atol=1e-12)
    assert torch.allclose(masked_attention(q, k, v, torch.ones(6, 6, dtype=torch.float64)), masked_attention(q, k, v), atol=1e-15)


def test_zero_mask_is_uniform_average():
    q, k, v = (torch.randn(5, 3, dtype=torch.float64) for _ in range(3))
    out = masked_attention(q, k, v, torch.zeros(5, 5, dtype=torch.float64))
    assert torch.allclose(out, v.mean(0).expand(5, 3))


def test_additive_mode_excludes_masked_keys():
    q, k, v = (torch.randn(4, 3, dtype=torch.float64) for _ in range(3))
    mask = torch.tensor([1.0, 1.0, 0.0, 0.0], dtype=torch.float64).expand(4, 4)
    out = masked_attention(q, k, v, mask, mode="additive")
    assert torch.allclose(out, masked_attention(q, k[:2], v[:2]), atol=1e-12)


def test_attention_shape_errors():
    q = torch.zeros(4, 3)
    with pytest.raises(DimensionError):
        masked_attention(q, torch.zeros(4, 2), torch.zeros(4, 3))
    with pytest.raises(DimensionError):
        masked_attention(q, q, q, torch.ones(3, 3))
    with pytest.raises(ParameterError):
        masked_attention(q, q, q, torch.ones(4, 4), mode="gate")


def test_mask_rows_stack():
    rows = torch.rand(2, 6)
    lm = mask_rows_to_lm_prime(rows)
    assert lm.shape == (2, 6, 6) and torch.equal(lm[1, 4], rows[1])


def _gradcheck(module, inputs, n=50, seed=0):
    """Central differences vs autograd at random coordinates of inputs and parameters."""
    w = torch.randn_like(module(*inputs))

    def f():
        return (module(*inputs) * w).sum()

    f().backward()
    params = [x for x in inputs if torch.is_tensor(x) and x.requires_grad] + [p for p in module.parameters() if p.requires_grad]
    rng = np.random.default_rng(seed)
    eps = 1e-6
    for k in range(n):
        p = params[int(rng.integers(0, len(params)))]
        idx = tuple(int(rng.integers(0, s)) for s in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + eps
            up = f().item()
            p[idx] = orig - eps
            dn = f().item()
            p[idx] = orig
        fd = (up - dn) / (2 * eps)
        rel = abs(fd - p.grad[idx].item()) / max(abs(fd), abs(p.grad[idx].item()), 1e-6)
        assert rel < 1e-2, (k, fd, p.grad[idx].item())


def test_rrdb_gradient():
    torch.manual_seed(0)
    block = RRDB(4, growth=3).double()
    x = torch.randn(1, 4, 5, 5, dtype=torch.float64, requires_grad=True)
    _gradcheck(block, (x,))


def test_attention_layer_gradient():
    torch.manual_seed(1)
    layer = MaskedSelfAttention(4, heads=2).double()
    x = torch.randn(2, 4, 3, 3, dtype=torch.float64, requires_grad=True)
    lm = mask_rows_to_lm_prime(torch.rand(2, 9)).double()
    _gradcheck(layer, (x, lm))


def test_affm_starts_as_identity_on_decoder_tap():
    affm = AFFM(8, 8, width=8, m=2, n=1, growth=4)
    enc, dec = torch.randn(2, 8, 4, 4), torch.randn(2, 8, 4, 4)
    assert torch.equal(affm(enc, dec, mask_rows_to_lm_prime(torch.rand(2, 16))), dec)


def test_affm_mask_changes_output_once_trained():
    affm = randomize(AFFM(8, 8, width=8, m=1, n=1, growth=4), seed=3, scale=0.2)
    enc, dec = torch.randn(1, 8, 4, 4), torch.randn(1, 8, 4, 4)
    with torch.no_grad():
        a = affm(enc, dec, None)
        b = affm(enc, dec, mask_rows_to_lm_prime(torch.zeros(1, 16)))
    assert not torch.allclose(a, b)


def test_affm_config_errors():
    with pytest.raises(ParameterError):
        AFFM(8, 8, m=0)
    with pytest.raises(ParameterError):
        AFFM(8, 8, mask_mode="gate")
    affm = AFFM(8, 8, width=8, growth=4)
    with pytest.raises(DimensionError):
        affm(torch.zeros(1, 8, 4, 4), torch.zeros(1, 8, 2, 2))
    with pytest.raises(DimensionError):
        affm(torch.zeros(1, 6, 4, 4), torch.zeros(1, 8, 4, 4))


def test_affm_loss_fidelity_term():
    gt = torch.zeros(1, 3, 4, 4)
    x_in = torch.ones(1, 3, 4, 4)
    out = torch.ones(1, 3, 4, 4)
    mask = torch.zeros(1, 1, 4, 4)
    assert affm_loss(out, gt, x_in, mask, 1.0).item() == pytest.approx(1.0)
    out2 = torch.zeros(1, 3, 4, 4)
    assert affm_loss(out2, gt, x_in, torch.ones(1, 1, 4, 4), 0.5).item() == pytest.approx(0.5)
