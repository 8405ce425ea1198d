"""Bit-exact packing of fixed-width unsigned codes into byte streams.

Codes are laid out LSB-first within a little-endian bit stream, the same
order the store's structure-of-arrays slices use. Packing then unpacking
any code array is the identity at the bit level; the padded tail bits of
the final byte are zero.
"""

from __future__ import annotations

import numpy as np


def packed_nbytes(count: int, bits: int) -> int:
    """Bytes needed for `count` codes of `bits` width (whole-byte rounding)."""
    return (count * bits + 7) // 8


def pack_bits(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack uint codes (each < 2^bits) into a uint8 stream."""
    codes = np.asarray(codes, dtype=np.uint64).ravel()
    if bits < 1 or bits > 64:
        raise ValueError(f"bits must be in [1, 64], got {bits}")
    if codes.size and int(codes.max()) >> bits:
        raise ValueError(f"code does not fit in {bits} bits")
    n = codes.size
    out = np.zeros(packed_nbytes(n, bits), dtype=np.uint8)
    # scatter each of the `bits` bit-planes into the byte stream
    positions = np.arange(n, dtype=np.int64) * bits
    for b in range(bits):
        bitpos = positions + b
        mask = ((codes >> np.uint64(b)) & np.uint64(1)).astype(np.uint8)
        np.bitwise_or.at(out, bitpos >> 3, mask << (bitpos & 7).astype(np.uint8))
    return out


def unpack_bits(stream: np.ndarray, bits: int, count: int) -> np.ndarray:
    """Recover `count` codes of `bits` width from a packed uint8 stream."""
    stream = np.asarray(stream, dtype=np.uint8)
    if packed_nbytes(count, bits) > stream.size:
        raise ValueError("stream too short for requested codes")
    positions = np.arange(count, dtype=np.int64) * bits
    out = np.zeros(count, dtype=np.uint64)
    for b in range(bits):
        bitpos = positions + b
        bitvals = (stream[bitpos >> 3] >> (bitpos & 7).astype(np.uint8)) & 1
        out |= bitvals.astype(np.uint64) << np.uint64(b)
    return out
