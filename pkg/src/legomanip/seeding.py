"""Seed fan-out: every random stream is derived from one master seed."""
from __future__ import annotations

import hashlib


def derive_seed(master: int, *parts) -> int:
    """Stable 63-bit seed from a master seed and a path of names/indices.

    Uses sha256 over the textual path so results do not depend on Python's
    per-process hash randomization.
    """
    text = "/".join([str(int(master))] + [str(p) for p in parts])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1
