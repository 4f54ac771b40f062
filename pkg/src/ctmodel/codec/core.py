from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from ..data_io import ScalarField, aligned_empty, aligned_zeros
from . import kernels
from .huffman import BinHistogram, Codebook, CodecError, build_codebook, count_frequencies, decode, encode
from .lossless import CHOICES as LOSSLESS_CHOICES
from .lossless import lossless_decode, lossless_encode

PREDICTORS = ("lorenzo", "interpolation")
MAGIC = b"CTM1"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CompressionConfig:
    predictor: str = "lorenzo"
    eb: float = 1e-3
    quant_radius: int = 32768
    lossless: str = "lz"
    sample_rate: float = 0.04

    def __post_init__(self):
        if self.predictor not in PREDICTORS:
            raise ConfigError(f"unknown predictor {self.predictor!r}")
        if not (self.eb > 0 and math.isfinite(self.eb)):
            raise ConfigError(f"error bound must be positive, got {self.eb}")
        if int(self.quant_radius) != self.quant_radius or not 2 <= self.quant_radius < 2**31 - 1:
            raise ConfigError(f"quant_radius must be an integer >= 2, got {self.quant_radius}")
        if self.lossless not in LOSSLESS_CHOICES:
            raise ConfigError(f"unknown lossless back-end {self.lossless!r}")
        if not 0 < self.sample_rate <= 1:
            raise ConfigError(f"sample_rate must be in (0, 1], got {self.sample_rate}")

    @property
    def nbins(self) -> int:
        return 2 * self.quant_radius + 1

    def with_(self, **kw) -> "CompressionConfig":
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(kw)
        return CompressionConfig(**values)


@dataclass(eq=False)
class QuantOutcome:
    codes: np.ndarray  # int32, flat row-major; 0 marks an outlier
    outliers: np.ndarray  # float64 literals in traversal order
    nbins: int
    _hist: BinHistogram | None = field(default=None, repr=False)

    @property
    def histogram(self) -> BinHistogram:
        if self._hist is None:
            self._hist = count_frequencies(self.codes, self.nbins)
        return self._hist


def as_3d(dims) -> tuple[int, int, int]:
    return (1,) * (3 - len(dims)) + tuple(dims)


def predict_quantize(f: ScalarField, config: CompressionConfig,
                     reuse_buffers: bool = False) -> QuantOutcome:
    """Predict and quantize every point.

    With ``reuse_buffers`` the returned codes live in a buffer that the next
    call overwrites; only the compressor, which consumes them at once, uses it.
    """
    shape = as_3d(f.dims)
    data = f.values.reshape(shape)
    if reuse_buffers:
        outliers = _scratch_buffer("outliers", (f.n,))
        codes = _scratch_buffer("codes", (f.n,), np.int32)
    else:
        outliers = aligned_empty(f.n)
        codes = aligned_empty(f.n, np.int32)
    if config.predictor == "lorenzo":
        rec = _lorenzo_scratch(shape)
        nout = kernels.lorenzo_quantize(data, config.eb, config.quant_radius,
                                        codes.reshape(shape), outliers, rec)
    else:
        none = np.empty(0, dtype=np.uint8)
        nout = kernels.interp_quantize(data, config.eb, config.quant_radius, codes, outliers,
                                       none, none, _scratch_buffer("interp", (f.n,)))
    return QuantOutcome(codes, outliers[:nout].copy(), config.nbins)


_scratch: dict[str, np.ndarray] = {}


def _scratch_buffer(tag: str, shape, dtype=np.float64) -> np.ndarray:
    """Reusable reconstruction buffer; one per tag, kept between calls.

    Reuse spares every run the page faults of a fresh buffer the size of the
    field, which would otherwise be a large and erratic share of its time.
    Contents are stale, so callers must not read cells they have not written.
    """
    size = math.prod(shape)
    buf = _scratch.get(tag)
    if buf is None or buf.size < size or buf.dtype != dtype:
        buf = _scratch[tag] = aligned_zeros(size, dtype)
    return buf[:size].reshape(shape)


def _lorenzo_scratch(shape) -> np.ndarray:
    rec = _scratch_buffer("lorenzo", tuple(d + 1 for d in shape))
    rec[0] = 0.0
    rec[:, 0] = 0.0
    rec[:, :, 0] = 0.0
    return rec


def reconstruct(codes, outliers, dims, predictor, eb, radius) -> np.ndarray:
    shape = as_3d(dims)
    codes = np.ascontiguousarray(codes, dtype=np.int32)
    outliers = np.ascontiguousarray(outliers, dtype=np.float64)
    out = aligned_empty(math.prod(shape)).reshape(shape)
    if predictor == "lorenzo":
        used = kernels.lorenzo_reconstruct(codes.reshape(shape), outliers, eb, radius, out,
                                           _lorenzo_scratch(shape))
    else:
        used = kernels.interp_reconstruct(codes.reshape(-1), outliers, eb, radius,
                                          np.array(shape, dtype=np.int64), out.reshape(-1))
    if used != outliers.size:
        raise CodecError("outlier block does not match the code stream")
    return out.reshape(-1)


@dataclass(frozen=True)
class StageTiming:
    t_pq: float
    t_freq_book: float
    t_encode: float
    t_lossless: float
    t_total: float

    STAGES = ("t_pq", "t_freq_book", "t_encode", "t_lossless")

    def stages(self) -> tuple[float, float, float, float]:
        return (self.t_pq, self.t_freq_book, self.t_encode, self.t_lossless)

    @property
    def stage_sum(self) -> float:
        return sum(self.stages())


@dataclass(eq=False)
class ObservedMetrics:
    n: int
    histogram: BinHistogram
    codebook: Codebook
    case_counts: tuple[int, int, int]
    encoded_size: int  # Huffman payload bytes
    final_size: int  # bytes after the lossless back-end
    outlier_count: int
    archive_size: int

    @property
    def bitrate(self) -> float:
        return 8.0 * self.final_size / self.n

    @property
    def huffman_bitrate(self) -> float:
        """Bits per value leaving the Huffman stage, outlier literals included."""
        return (8.0 * self.encoded_size + 64.0 * self.outlier_count) / self.n

    @property
    def lossless_ratio(self) -> float:
        return self.encoded_size / self.final_size

    @property
    def case_fractions(self) -> tuple[float, float, float]:
        total = sum(self.case_counts)
        return tuple(c / total for c in self.case_counts)


@dataclass(frozen=True, eq=False)
class Archive:
    dims: tuple[int, ...]
    predictor: str
    eb: float
    quant_radius: int
    lossless: str
    outliers: np.ndarray
    codebook: Codebook
    payload: bytes

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<B", len(self.dims)),
                 struct.pack(f"<{len(self.dims)}Q", *self.dims),
                 struct.pack("<BdIB", PREDICTORS.index(self.predictor), self.eb,
                             self.quant_radius, LOSSLESS_CHOICES.index(self.lossless)),
                 struct.pack("<Q", self.outliers.size),
                 self.outliers.astype("<f8").tobytes(),
                 struct.pack("<I", len(self.codebook))]
        book = np.empty(len(self.codebook), dtype=[("code", "<u4"), ("len", "u1")])
        book["code"] = self.codebook.symbols
        book["len"] = self.codebook.lengths
        parts += [book.tobytes(), struct.pack("<Q", len(self.payload)), self.payload]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Archive":
        try:
            return cls._parse(memoryview(data))
        except (struct.error, ValueError, IndexError) as exc:
            raise CodecError(f"corrupt archive: {exc}") from exc

    @classmethod
    def _parse(cls, buf) -> "Archive":
        if bytes(buf[:4]) != MAGIC:
            raise CodecError("not a CTM1 archive")
        pos = 4
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        if not 1 <= rank <= 3:
            raise CodecError(f"bad rank {rank}")
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        pred, eb, radius, ll = struct.unpack_from("<BdIB", buf, pos)
        pos += struct.calcsize("<BdIB")
        (nout,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        if pred >= len(PREDICTORS) or ll >= len(LOSSLESS_CHOICES):
            raise CodecError("bad predictor or lossless tag")
        if pos + 8 * nout > len(buf):
            raise CodecError("truncated outlier block")
        outliers = np.frombuffer(buf, dtype="<f8", count=nout, offset=pos).astype(np.float64)
        pos += 8 * nout
        (nsym,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dt = np.dtype([("code", "<u4"), ("len", "u1")])
        if pos + dt.itemsize * nsym > len(buf):
            raise CodecError("truncated codebook")
        book = np.frombuffer(buf, dtype=dt, count=nsym, offset=pos)
        pos += dt.itemsize * nsym
        (plen,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        if pos + plen != len(buf):
            raise CodecError("payload length mismatch")
        codebook = Codebook.from_lengths(book["code"].astype(np.int64), book["len"].astype(np.int64))
        return cls(tuple(int(d) for d in dims), PREDICTORS[pred], eb, radius,
                   LOSSLESS_CHOICES[ll], outliers, codebook, bytes(buf[pos:]))


_compiled = False


def ensure_compiled() -> None:
    """Trigger JIT compilation so that no timed region pays for it."""
    global _compiled
    if _compiled:
        return
    f = ScalarField((5, 6, 7), np.linspace(0, 1, 210))
    for pred in PREDICTORS:
        for ll in LOSSLESS_CHOICES:
            cfg = CompressionConfig(pred, 1e-2, 64, ll)
            arc, _, _ = _compress(f, cfg)
            decompress(arc)
    grid = f.values.reshape(f.dims)
    rows = np.array([[0, 0, 0, 5, 6, 7, 0, 0, 0, 5, 6, 7]], dtype=np.int64)
    kernels.lorenzo_block_hist(grid, rows, 1e-2, 64, np.zeros(129, dtype=np.int64))
    kernels.interp_block_samples(grid, rows, 1e-2, 64, np.empty(210, dtype=np.int32),
                                 np.empty(210, dtype=np.int64))
    _compiled = True


def compress(f: ScalarField, config: CompressionConfig):
    """Run the four stages, returning (Archive, StageTiming, ObservedMetrics)."""
    ensure_compiled()
    return _compress(f, config)


def _compress(f: ScalarField, config: CompressionConfig):
    clock = time.perf_counter_ns
    start = clock()
    q = predict_quantize(f, config, reuse_buffers=True)
    t1 = clock()
    hist = count_frequencies(q.codes, config.nbins)
    book = build_codebook(hist)
    t2 = clock()
    payload, cases = encode(q.codes, book, hist)
    t3 = clock()
    final = lossless_encode(payload, config.lossless)
    t4 = clock()
    q._hist = hist
    archive = Archive(f.dims, config.predictor, config.eb, config.quant_radius,
                      config.lossless, q.outliers, book, final)
    end = clock()
    timing = StageTiming((t1 - start) * 1e-9, (t2 - t1) * 1e-9, (t3 - t2) * 1e-9,
                         (t4 - t3) * 1e-9, (end - start) * 1e-9)
    header = 4 + 1 + 8 * f.rank + 14 + 8 + 8 * q.outliers.size + 4 + 5 * len(book) + 8
    metrics = ObservedMetrics(f.n, hist, book, cases, len(payload), len(final),
                              int(q.outliers.size), header + len(final))
    return archive, timing, metrics


def decompress(archive: Archive | bytes) -> ScalarField:
    if isinstance(archive, (bytes, bytearray, memoryview)):
        archive = Archive.from_bytes(bytes(archive))
    n = math.prod(archive.dims)
    payload = lossless_decode(archive.payload, archive.lossless)
    codes = decode(payload, n, archive.codebook)
    values = reconstruct(codes, archive.outliers, archive.dims, archive.predictor,
                         archive.eb, archive.quant_radius)
    return ScalarField(archive.dims, values, "reconstructed")
