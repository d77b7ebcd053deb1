"""Deterministic named RNG substreams.

Every piece of randomness in the pipeline is drawn from a stream derived
from (master seed, stream name), so concurrent or reordered callers see
identical draws.  Stream names in use: "dataset", "split", "proxy-init",
"proxy-train", "blackbox-init", "blackbox-train", "sampling",
"shuffle-ablation", plus per-image streams keyed by image id.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK63 = (1 << 63) - 1


def substream_seed(master_seed: int, *names: str | int) -> int:
    """Derive a 63-bit seed from a master seed and a name path."""
    h = hashlib.sha256()
    h.update(str(int(master_seed)).encode("ascii"))
    for name in names:
        h.update(b"/")
        h.update(str(name).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little") & _MASK63


def substream(master_seed: int, *names: str | int) -> np.random.Generator:
    """A numpy Generator for the named substream."""
    return np.random.default_rng(substream_seed(master_seed, *names))
