"""Checkpoint files and parameter hashing.

Checkpoints are safetensors files: an 8-byte little-endian header length, a
JSON header mapping each tensor name to dtype/shape/byte offsets, then the raw
little-endian tensor bytes. The header's ``__metadata__`` block holds string
entries:

* ``kind``         -- "vq", "diffusion", "sgim" or "affm"
* ``config``       -- JSON echo of the section config the model was built from
* ``weight_hash``  -- :func:`state_hash` of the stored tensors
* ``extra``        -- JSON dict of scalars (e.g. ``latent_scale``)

The layout is deterministic, so identical weights give identical bytes.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import save as to_bytes

from .errors import DependencyError, IntegrityError


def state_hash(state) -> str:
    """SHA-256 over (name, dtype, shape, bytes) of every tensor, names sorted."""
    if isinstance(state, torch.nn.Module):
        state = state.state_dict()
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save(path, module_or_state, kind, config: dict, extra: dict | None = None) -> str:
    state = module_or_state.state_dict() if isinstance(module_or_state, torch.nn.Module) else module_or_state
    state = {k: v.detach().cpu().contiguous().clone() for k, v in state.items()}
    digest = state_hash(state)
    meta = {
        "kind": kind,
        "config": json.dumps(config, sort_keys=True),
        "weight_hash": digest,
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_canonical(to_bytes(state, metadata=meta)))
    return digest


def _canonical(blob: bytes) -> bytes:
    # the writer emits the header map in hash order; re-serialize it sorted
    n = int.from_bytes(blob[:8], "little")
    header = json.loads(blob[8 : 8 + n])
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    text += b" " * (-len(text) % 8)
    return len(text).to_bytes(8, "little") + text + blob[8 + n :]


def load(path, kind=None):
    """Return ``(state, config, extra)`` after verifying the stored hash."""
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"checkpoint {path} not found")
    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata() or {}
        state = {k: fh.get_tensor(k) for k in fh.keys()}
    if kind is not None and meta.get("kind") != kind:
        raise IntegrityError(f"{path} holds a {meta.get('kind')!r} checkpoint, expected {kind!r}")
    if state_hash(state) != meta.get("weight_hash"):
        raise IntegrityError(f"{path}: weight hash does not match stored digest")
    return state, json.loads(meta["config"]), json.loads(meta.get("extra", "{}"))


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def freeze(module: torch.nn.Module) -> str:
    """Disable gradients on every parameter and return the current hash."""
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return state_hash(module)


def assert_frozen(module: torch.nn.Module, expected: str, what: str) -> None:
    got = state_hash(module)
    if got != expected:
        raise IntegrityError(f"frozen {what} weights changed: {expected[:12]} -> {got[:12]}")
