"""Deterministic substream derivation.

Every random draw in the toolkit comes from a numpy Generator keyed by a
master seed plus a small integer path (domain tag, example index, iteration,
slot).  Substreams are independent, so whether one consumer draws or not
never shifts another consumer's stream, and results do not depend on
scheduling or worker count.
"""
from __future__ import annotations

import numpy as np

# Domain tags keep unrelated subsystems on disjoint substreams.
DOMAIN_DATA = 11
DOMAIN_TRAIN = 12
DOMAIN_ATTACK = 13
DOMAIN_EVAL = 14

# Slots inside an attack iteration.
SLOT_INIT = 0
SLOT_BRIGHTNESS = 1
SLOT_DIVERSITY = 2
SLOT_AUGMENT = 3


def _entropy(path):
    ints = tuple(int(p) for p in path)
    if any(p < 0 for p in ints):
        raise ValueError(f"substream path must be non-negative, got {ints}")
    return ints


def substream_seed(*path: int) -> int:
    """Collapse an integer path into one 64-bit seed for a substream."""
    ss = np.random.SeedSequence(_entropy(path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generator(*path: int) -> np.random.Generator:
    """Generator for the substream identified by `path`."""
    return np.random.default_rng(np.random.SeedSequence(_entropy(path)))
