"""Counter-based random number streams.

Every stochastic routine in the toolkit draws from a Philox generator keyed
by an explicit seed, optionally combined with integer or string tags. Philox
is counter-based: a stream's output depends only on its key, never on how
much any other stream has consumed, so per-frame and per-step streams are
reproducible regardless of evaluation order or parallel schedule.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, str):
        return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:8], "little")
    return int(tag)


def seed_sequence(seed: int, *tags) -> np.random.SeedSequence:
    """Deterministic SeedSequence for (seed, tags)."""
    entropy = [int(seed)] + [_tag_to_int(t) for t in tags]
    return np.random.SeedSequence(entropy)


def philox(seed: int, *tags) -> np.random.Generator:
    """Generator on an independent Philox stream keyed by (seed, tags)."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *tags)))


def derive_seed(seed: int, *tags) -> int:
    """Collapse (seed, tags) to a single integer seed for APIs that take one."""
    return int(seed_sequence(seed, *tags).generate_state(1, np.uint64)[0])
