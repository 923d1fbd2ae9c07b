"""Seed plumbing: every random draw in a run flows from one manifest seed.

Modules get their own generator via ``derive_rng(seed, label)`` so that
adding draws in one module never shifts the stream seen by another.
"""

from __future__ import annotations

import hashlib
import random


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def derive_rng(seed: int, label: str) -> random.Random:
    return random.Random(derive_seed(seed, label))
