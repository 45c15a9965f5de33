"""Named, order-independent RNG streams derived from a base seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts: object) -> int:
    """Stable 64-bit seed from arbitrary key parts (identical across processes)."""
    key = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "big")


def stream(*parts: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def rollout_rng(seed: int, step: int, prompt_id: str, rollout_index: int, slot: int = 0) -> np.random.Generator:
    """One stream per rollout, so results do not depend on worker count or scheduling.

    ``slot`` separates repeated occurrences of a prompt within one batch.
    """
    return stream(seed, "rollout", step, prompt_id, rollout_index, slot)
