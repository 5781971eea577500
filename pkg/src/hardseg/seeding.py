"""Deterministic seed substreams.

Every random draw in the pipeline derives from a single user seed through
named substreams, so that adding or removing one consumer (e.g. an auxiliary
branch) never shifts the stream any other consumer sees.  This is what makes
the "auxiliary weights zero == plain backbone run" equivalence bitwise.
"""

from __future__ import annotations

import hashlib


def substream(seed: int, *tags) -> int:
    """Derive an independent 63-bit seed from (seed, tags) via blake2b."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for t in tags:
        h.update(b"/")
        h.update(str(t).encode())
    return int.from_bytes(h.digest(), "little") & (2**63 - 1)
