"""Order-independent seed derivation."""

import hashlib


def derive_seed(master, *parts):
    """Stable 63-bit seed from a master seed and a key tuple."""
    text = "|".join([str(int(master)), *map(str, parts)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1
