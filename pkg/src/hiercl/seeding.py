"""Root-seed bookkeeping.

All randomness in the package flows from one root seed through named
substreams, so generate/train/eval stay reproducible both individually and
as a pipeline. Substreams are independent PCG64 generators derived via
numpy's SeedSequence spawn keys.
"""
from __future__ import annotations

import numpy as np

_STREAMS = {
    "generate": 0,
    "train": 1,
    "eval": 2,
    "prompts": 3,
    "gradcheck": 4,
}


def substream(seed: int, name: str) -> np.random.Generator:
    """Return the named substream generator for a root seed."""
    try:
        key = _STREAMS[name]
    except KeyError:
        raise ValueError(f"unknown substream {name!r}") from None
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))
