"""Luminance-masked self-attention inside the fusion module.

Run: python3 demos/04_masked_attention.py
"""
import torch

from difflare.affm import AFFM, masked_attention, mask_rows_to_lm_prime

torch.manual_seed(0)
q, k, v = torch.randn(3, 6, 4, dtype=torch.float64).unbind(0)

# %% Scores are multiplied by the mask before the softmax.
row = torch.tensor([0.73, 0.73, 0.73, 0.0, 0.0, 0.73], dtype=torch.float64)
lm = row.expand(6, 6)
print("rows of the masked softmax still sum to 1:",
      torch.allclose(torch.softmax(q @ k.T / 2 * lm, -1).sum(-1), torch.ones(6, dtype=torch.float64)))

# Masked keys get score 0, not -inf: they still receive weight, just without
# any preference from the query.
print("plain :", masked_attention(q, k, v)[0].numpy().round(3))
print("masked:", masked_attention(q, k, v, lm)[0].numpy().round(3))
print("gated (additive mode):", masked_attention(q, k, v, lm, mode="additive")[0].numpy().round(3))

# %% A constant mask is just a softmax temperature.
c = torch.full((6, 6), 0.5, dtype=torch.float64)
print("constant mask == scaled queries:", torch.allclose(masked_attention(q, k, v, c), masked_attention(0.5 * q, k, v)))

# %% The fusion module adds a residual to the decoder feature. Its output conv
# starts at zero, so before training it returns the decoder feature unchanged.
affm = AFFM(32, 32, width=16, m=2, n=1, growth=8)
enc, dec = torch.randn(2, 32, 16, 16), torch.randn(2, 32, 16, 16)
print("untrained fusion is identity:", torch.equal(affm(enc, dec, mask_rows_to_lm_prime(torch.rand(2, 256))), dec))
