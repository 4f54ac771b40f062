"""Byte-level lossless back-ends applied after Huffman coding.

Layout: flag byte (0 = stored raw, 1 = coded). A coded body is preceded by
the decoded length as an unsigned LEB128 varint. A coded stream that would
not be smaller than its input is replaced by the raw form.
"""

import numpy as np

from ..data_io import aligned_empty

from . import kernels
from .huffman import CodecError

CHOICES = ("none", "rle", "lz")
RAW, CODED = 0, 1


def _varint(n: int) -> bytes:
    out = bytearray()
    while n >= 0x80:
        out.append((n & 0x7F) | 0x80)
        n >>= 7
    out.append(n)
    return bytes(out)


def _read_varint(data: bytes, i: int) -> tuple[int, int]:
    n = shift = 0
    while True:
        if i >= len(data) or shift > 63:
            raise CodecError("truncated length prefix")
        b = data[i]
        i += 1
        n |= (b & 0x7F) << shift
        shift += 7
        if b < 0x80:
            return n, i


def lossless_encode(payload: bytes, choice: str = "lz") -> bytes:
    if choice not in CHOICES:
        raise ValueError(f"unknown lossless back-end {choice!r}")
    src = np.frombuffer(payload, dtype=np.uint8)
    if choice == "none" or src.size == 0:
        return bytes([RAW]) + payload
    if choice == "rle":
        out = aligned_empty(src.size * 2 + 16, np.uint8)
        n = kernels.rle_encode(src, out)
    else:
        out = aligned_empty(src.size + 1, np.uint8)
        n = kernels.lz_encode(src, out)
    prefix = _varint(src.size)
    if n < 0 or n + len(prefix) >= src.size:
        return bytes([RAW]) + payload
    return bytes([CODED]) + prefix + out[:n].tobytes()


def lossless_decode(data: bytes, choice: str) -> bytes:
    if choice not in CHOICES:
        raise ValueError(f"unknown lossless back-end {choice!r}")
    if not data:
        raise CodecError("empty lossless stream")
    flag = data[0]
    if flag == RAW:
        return bytes(data[1:])
    if flag != CODED or choice == "none":
        raise CodecError(f"bad lossless flag {flag}")
    size, start = _read_varint(data, 1)
    src = np.frombuffer(data, dtype=np.uint8, offset=start)
    out = aligned_empty(size, np.uint8)
    fn = kernels.rle_decode if choice == "rle" else kernels.lz_decode
    if fn(src, out) != size:
        raise CodecError("corrupt lossless stream")
    return out.tobytes()
