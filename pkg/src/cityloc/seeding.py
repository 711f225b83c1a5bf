"""Deterministic seed derivation.

One top-level experiment seed fans out to per-module seeds via SHA-256 over
``"<label>:<seed>[:extra...]"``; the first 8 bytes (little-endian) of the
digest become the derived seed.  Stages are therefore independently
reproducible from (seed, label).
"""

from __future__ import annotations

import hashlib


def derive_seed(seed: int, label: str, *extra: int) -> int:
    text = ":".join([label, str(int(seed))] + [str(int(e)) for e in extra])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
