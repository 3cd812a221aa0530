"""Named counter-based random streams.

Every random draw in the library comes from a Philox generator keyed by a
stable hash of labels (seed, layer, tile, matrix role, ...). Streams are
therefore independent of scheduling and call order, and any matrix can be
regenerated bit-exactly from its labels alone.
"""

from __future__ import annotations

import hashlib

import numpy as np

_SEP = b"\x1f"


def stream_key(*parts) -> int:
    """128-bit Philox key derived from the canonical encoding of ``parts``.

    Parts may be ints, strings, or tuples thereof; the encoding uses repr(),
    which is stable across platforms for these types.
    """
    enc = _SEP.join(repr(p).encode("utf-8") for p in parts)
    return int.from_bytes(hashlib.blake2b(enc, digest_size=16).digest(), "little")


def stream(*parts) -> np.random.Generator:
    """A fresh Generator on the stream named by ``parts``."""
    return np.random.Generator(np.random.Philox(key=stream_key(*parts)))


def derive_seed(*parts) -> int:
    """A 63-bit seed derived from ``parts``, suitable for storage in checkpoints."""
    return stream_key(*parts) & ((1 << 63) - 1)
