"""CRC-64/XZ (ECMA-182 polynomial, reflected, init and xorout all ones).

Checkpoints are several megabytes, too slow for a byte loop in Python. The
fast path splits the message into equal chunks, runs the table recurrence
on all chunks at once as numpy lanes, then folds the chunk CRCs together by
shifting the running value over one chunk of zero bytes.
"""

import math

import numpy as np

_POLY = 0xC96C5795D7870F42
_MASK = (1 << 64) - 1


def _make_table():
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_TABLE = _make_table()
_TABLE_NP = np.array(_TABLE, dtype=np.uint64)


def crc64_reference(data, crc=0):
    """Plain byte-at-a-time CRC-64/XZ; ``crc`` continues a previous result."""
    crc ^= _MASK
    for b in bytes(data):
        crc = _TABLE[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ _MASK


def _zero_shift_tables(nbytes):
    """Eight 256-entry tables mapping a register to itself after ``nbytes`` zeros."""
    basis = np.array([1 << i for i in range(64)], dtype=np.uint64)
    ff = np.uint64(0xFF)
    eight = np.uint64(8)
    for _ in range(nbytes):
        basis = _TABLE_NP[(basis & ff).astype(np.intp)] ^ (basis >> eight)
    images = [int(x) for x in basis]
    tables = []
    for j in range(8):
        t = [0] * 256
        for b in range(1, 256):
            low = b & -b
            t[b] = t[b ^ low] ^ images[8 * j + low.bit_length() - 1]
        tables.append(t)
    return tables


def crc64(data):
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    n = buf.size
    if n < 4096:
        return crc64_reference(buf.tobytes())

    # Folding the all-ones init into the first eight bytes turns the job into
    # a zero-init CRC, where leading zero padding is free.
    msg = buf.copy()
    msg[:8] ^= 0xFF
    chunk = max(64, math.isqrt(n))
    lanes = -(-n // chunk)
    padded = np.zeros(lanes * chunk, dtype=np.uint8)
    padded[lanes * chunk - n:] = msg
    grid = padded.reshape(lanes, chunk)

    reg = np.zeros(lanes, dtype=np.uint64)
    ff = np.uint64(0xFF)
    eight = np.uint64(8)
    for j in range(chunk):
        idx = ((reg & ff) ^ grid[:, j].astype(np.uint64)).astype(np.intp)
        reg = _TABLE_NP[idx] ^ (reg >> eight)

    tables = _zero_shift_tables(chunk)
    acc = 0
    for r in reg.tolist():
        shifted = 0
        for j in range(8):
            shifted ^= tables[j][(acc >> (8 * j)) & 0xFF]
        acc = shifted ^ r
    return acc ^ _MASK
