"""Frequency counting, canonical Huffman codebooks and the bit-level coder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data_io import aligned_empty

from . import kernels


class CodecError(Exception):
    """Malformed or inconsistent codec input."""


@dataclass(frozen=True, eq=False)
class BinHistogram:
    counts: np.ndarray  # int64, indexed by quantization code

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def nonzero(self) -> tuple[np.ndarray, np.ndarray]:
        idx = np.flatnonzero(self.counts)
        return idx, self.counts[idx]

    def probabilities(self) -> np.ndarray:
        return self.counts / self.total

    def __eq__(self, other):
        if not isinstance(other, BinHistogram):
            return NotImplemented
        a, b = self.counts, other.counts
        n = max(a.size, b.size)
        return np.array_equal(np.pad(a, (0, n - a.size)), np.pad(b, (0, n - b.size)))


def count_frequencies(codes: np.ndarray, nbins: int | None = None) -> BinHistogram:
    codes = np.asarray(codes).reshape(-1)
    minlength = 0 if nbins is None else nbins
    return BinHistogram(np.bincount(codes, minlength=minlength).astype(np.int64))


def huffman_lengths(symbols: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Optimal code lengths for ``symbols`` with positive ``counts``.

    Symbols are ordered by (count, symbol) before the in-place length pass,
    so equal counts resolve deterministically. Returns lengths aligned with
    the input order.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size == 0:
        raise CodecError("cannot build a code for an empty histogram")
    if np.any(counts <= 0):
        raise CodecError("counts must be positive")
    order = np.lexsort((symbols, counts))
    work = counts[order].copy()
    kernels.inplace_code_lengths(work)
    lengths = np.empty_like(work)
    lengths[order] = work
    return lengths


@dataclass(frozen=True, eq=False)
class Codebook:
    """Canonical code: parallel arrays sorted by (length, symbol)."""

    symbols: np.ndarray  # int64
    lengths: np.ndarray  # int64
    values: np.ndarray  # int64

    @classmethod
    def from_lengths(cls, symbols, lengths) -> "Codebook":
        symbols = np.asarray(symbols, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        if symbols.size == 0:
            raise CodecError("empty codebook")
        if np.any(lengths < 1) or np.any(lengths > 62):
            raise CodecError("code lengths must be within 1..62")
        if np.unique(symbols).size != symbols.size:
            raise CodecError("duplicate symbols in codebook")
        if np.sum(np.ldexp(1.0, -lengths)) > 1.0 + 1e-12:
            raise CodecError("code lengths violate the Kraft inequality")
        order = np.lexsort((symbols, lengths))
        symbols, lengths = symbols[order], lengths[order]
        values = np.empty_like(lengths)
        kernels.canonical_codes(symbols, lengths, values)
        return cls(symbols, lengths, values)

    def __len__(self):
        return self.symbols.size

    def length_of(self) -> dict[int, int]:
        return dict(zip(self.symbols.tolist(), self.lengths.tolist()))

    def kraft_sum(self) -> float:
        return float(np.sum(np.ldexp(1.0, -self.lengths)))

    def tables(self, nbins: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Dense per-symbol value/length lookup tables (length 0 = absent)."""
        size = int(self.symbols.max()) + 1 if nbins is None else max(nbins, int(self.symbols.max()) + 1)
        val = np.zeros(size, dtype=np.int64)
        ln = np.zeros(size, dtype=np.int64)
        val[self.symbols] = self.values
        ln[self.symbols] = self.lengths
        return val, ln

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return (np.array_equal(self.symbols, other.symbols)
                and np.array_equal(self.lengths, other.lengths))


def build_codebook(hist: BinHistogram) -> Codebook:
    symbols, counts = hist.nonzero()
    if symbols.size == 0:
        raise CodecError("cannot build a codebook from an empty histogram")
    return Codebook.from_lengths(symbols, huffman_lengths(symbols, counts))


def encode(codes: np.ndarray, book: Codebook, hist: BinHistogram | None = None):
    """Huffman-encode ``codes``; returns (payload bytes, (n1, n2, n3)).

    ``hist`` (the histogram the book was built from) sizes the output buffer
    exactly; without it the buffer is sized from the longest code.
    """
    codes = np.ascontiguousarray(codes, dtype=np.int32).reshape(-1)
    val, ln = book.tables()
    if codes.size and (codes.min() < 0 or codes.max() >= val.size):
        raise CodecError("code outside the codebook")
    if hist is not None and hist.counts.size <= val.size:
        nbits = int(np.dot(hist.counts, ln[: hist.counts.size]))
    else:
        nbits = int(book.lengths.max()) * codes.size
    out = aligned_empty(nbits // 8 + 2, np.uint8)
    cases = np.zeros(3, dtype=np.int64)
    nbytes = kernels.huffman_encode(codes, val, ln, out, cases)
    if nbytes < 0:
        raise CodecError("code outside the codebook")
    return out[:nbytes].tobytes(), (int(cases[0]), int(cases[1]), int(cases[2]))


def decode(payload: bytes, n: int, book: Codebook) -> np.ndarray:
    maxlen = int(book.lengths.max())
    count = np.zeros(maxlen + 1, dtype=np.int64)
    first_code = np.zeros(maxlen + 1, dtype=np.int64)
    first_index = np.zeros(maxlen + 1, dtype=np.int64)
    np.add.at(count, book.lengths, 1)
    for length in range(1, maxlen + 1):
        idx = np.searchsorted(book.lengths, length)
        first_index[length] = idx
        if count[length]:
            first_code[length] = book.values[idx]
    out = aligned_empty(n, np.int32)
    buf = np.frombuffer(payload, dtype=np.uint8)
    got = kernels.huffman_decode(buf, n, first_code, first_index, count, book.symbols, maxlen, out)
    if got != n:
        raise CodecError("truncated or corrupt Huffman payload")
    return out
