"""Deterministic seed derivation.

All randomness in the package flows from a single experiment seed through
:func:`derive_seed`, which hashes the base seed together with a string path
("init"/"data"/... plus qualifiers).  Derived streams are therefore
independent of each other and of call order, which is what makes stage-level
resume and parallel scene generation bit-identical to serial runs.
"""

from __future__ import annotations

import hashlib

_MASK = (1 << 63) - 1


def derive_seed(base: int, *parts: object) -> int:
    """Derive a child seed from ``base`` and a path of qualifiers.

    The derivation is a SHA-256 hash, so distinct paths decorrelate and the
    result does not depend on how many other streams were derived before.
    """
    key = "|".join([str(int(base)), *(str(p) for p in parts)])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & _MASK
