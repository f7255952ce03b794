"""Seeded random streams.

All randomness flows through PCG64 generators keyed by ``(seed, *stream)``,
so a chain, fold or tree draws the same numbers no matter which worker runs it.
"""

import hashlib
import json
from typing import Any

import numpy as np

# Stream identifiers; part of the reproducibility contract, never renumber.
SPLIT_STREAM = 1
IMPUTE_STREAM = 2
LASSO_FOLD_STREAM = 3
FOREST_STREAM = 4
BOOTSTRAP_STREAM = 5
TUNING_STREAM = 6
SYNTH_STREAM = 7


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a generator for ``seed`` on the sub-stream ``stream``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(stream))))


def derive_seed(seed: int, *stream: int) -> int:
    """Derive a 64-bit integer seed for a sub-stream."""
    state = np.random.SeedSequence(int(seed), spawn_key=tuple(stream)).generate_state(1, dtype=np.uint64)
    return int(state[0])


def stable_hash(payload: Any) -> str:
    """SHA-256 of the canonical JSON encoding of ``payload``."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
