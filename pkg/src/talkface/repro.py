"""Seed derivation, hashing and checksums shared by every stage."""

from __future__ import annotations

import hashlib
import json
import random

import numpy as np


def derive_seed(root: int, *names) -> int:
    """Deterministic 31-bit sub-seed for a named component of a run."""
    key = ":".join([str(int(root))] + [str(n) for n in names])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:4], "little") & 0x7FFFFFFF


def seed_everything(seed: int) -> None:
    import torch

    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def state_checksum(module_or_state) -> str:
    """sha256 over every tensor of a module/state dict, in key order."""
    state = module_or_state.state_dict() if hasattr(module_or_state, "state_dict") else module_or_state
    h = hashlib.sha256()
    for key in sorted(state):
        value = state[key]
        h.update(key.encode())
        if hasattr(value, "detach"):
            h.update(value.detach().cpu().contiguous().numpy().tobytes())
        else:
            h.update(repr(value).encode())
    return h.hexdigest()[:16]
