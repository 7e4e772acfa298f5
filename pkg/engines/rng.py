"""
engines/rng.py — QLIP Lab
Counter-based random streams. Every stochastic draw in the lab comes from
stream(seed, name, counter), a pure function of its three arguments, so runs
replay bit-exactly and per-sample work can be split in any order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, name: str, counter: int = 0) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{name}/{int(counter)}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed: int, name: str, counter: int = 0) -> np.random.Generator:
    """Philox generator keyed by (seed, name, counter)."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name, counter)))
