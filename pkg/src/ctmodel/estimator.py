"""Sampling-based characterization of an input before compressing it.

The bundle produced here holds everything the time model consumes: an
estimated quantization histogram scaled to the full field, Huffman code
lengths computed without building a tree, size estimates and the
byte-boundary case probabilities of the Huffman writer.
"""

from __future__ import annotations

import functools
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .codec import BinHistogram, CompressionConfig, ensure_compiled
from .codec import kernels
from .codec.core import as_3d
from .data_io import ScalarField

OUTLIER_BITS = 64
CASE_VARIANTS = ("paper_formula", "bitwriter_exact")

# core block edge per rank; Lorenzo blocks get a one-point halo on the low
# side, interpolation blocks are grid-aligned with one extra anchor plane
LORENZO_CORE = {1: 64, 2: 8, 3: 8}
INTERP_CORE = {1: 64, 2: 16, 3: 16}


@dataclass(frozen=True)
class SampleBlock:
    ext_origin: tuple[int, int, int]
    ext_extent: tuple[int, int, int]
    core_offset: tuple[int, int, int]
    core_extent: tuple[int, int, int]

    @property
    def size(self) -> int:
        return math.prod(self.core_extent)

    def core_slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o + f, o + f + m) for o, f, m in
                     zip(self.ext_origin, self.core_offset, self.core_extent))

    def row(self) -> list[int]:
        return [*self.ext_origin, *self.ext_extent, *self.core_offset, *self.core_extent]


def sample_block_rows(f: ScalarField, sample_rate: float, seed: int = 0,
                      predictor: str = "lorenzo") -> np.ndarray:
    """Pick contiguous blocks covering about ``sample_rate`` of the field.

    The block grid is split into equal strata along its row-major order and
    one block is drawn per stratum, so the sample is spread uniformly.
    Returns one row per block: extended origin, extended extent, core offset
    and core extent, three axes each.
    """
    if not 0 < sample_rate <= 1:
        raise ValueError(f"sample_rate must be in (0, 1], got {sample_rate}")
    shape = np.array(as_3d(f.dims), dtype=np.int64)
    table = LORENZO_CORE if predictor == "lorenzo" else INTERP_CORE
    edge = table[f.rank]
    core = np.array([1 if i < 3 - f.rank else min(edge, int(n)) for i, n in enumerate(shape)],
                    dtype=np.int64)
    grid = -(-shape // core)
    total = int(grid.prod())
    want = max(1, round(sample_rate * f.n / int(core.prod())))
    if want >= total or sample_rate >= 1:
        chosen = np.arange(total)
    else:
        rng = np.random.default_rng(seed)
        chosen = np.floor((np.arange(want) + rng.random(want)) * (total / want)).astype(np.int64)
        chosen = np.minimum(chosen, total - 1)
    start = np.stack(np.unravel_index(chosen, tuple(grid)), axis=1) * core
    extent = np.minimum(core, shape - start)
    if predictor == "lorenzo":
        ext_origin = np.maximum(start - 1, 0)
        offset = start - ext_origin
        ext_extent = offset + extent
    else:
        ext_origin = start
        offset = np.zeros_like(start)
        ext_extent = np.minimum(extent + 1, shape - start)
    return np.hstack([ext_origin, ext_extent, offset, extent]).astype(np.int64)


def sample_blocks(f: ScalarField, sample_rate: float, seed: int = 0,
                  predictor: str = "lorenzo") -> list[SampleBlock]:
    rows = sample_block_rows(f, sample_rate, seed, predictor).tolist()
    return [SampleBlock(tuple(r[0:3]), tuple(r[3:6]), tuple(r[6:9]), tuple(r[9:12])) for r in rows]


def scale_counts(weights: np.ndarray, total: int) -> np.ndarray:
    """Scale nonnegative ``weights`` to integers summing to ``total`` exactly.

    Largest-remainder rounding; ties go to the lower index.
    """
    weights = np.asarray(weights, dtype=np.float64)
    s = float(weights.sum())
    if s <= 0:
        raise ValueError("cannot scale an empty histogram")
    exact = (weights / s) * total
    base = np.floor(exact).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        frac = exact - base
        cand = np.flatnonzero(frac > 0)
        base[_top_k_lowest_index(cand, frac[cand], short)] += 1
    elif short < 0:
        # float round-off pushed the floors above the total
        order = np.lexsort((np.arange(base.size), -base))
        base[order[:-short]] -= 1
    return base


def _top_k_lowest_index(idx: np.ndarray, key: np.ndarray, k: int) -> np.ndarray:
    """The ``k`` entries of ``idx`` with the largest ``key``; ties to lower idx."""
    if k >= idx.size:
        return idx
    thr = np.partition(key, key.size - k)[key.size - k]
    above = idx[key > thr]
    ties = idx[key == thr]
    return np.concatenate([above, ties[:k - above.size]])


MIN_STRATUM = 32
SMOOTH_MIN_BANDWIDTH = 1.0
BANDWIDTH_FACTOR = 0.9


COARSE_STEPS_PER_BANDWIDTH = 4
SPIKE_Z = 5.0


def _gaussian_smooth(seg: np.ndarray, h: float) -> np.ndarray:
    """Convolve with a Gaussian of width ``h`` bins, same length as ``seg``.

    Wide kernels are applied on a grid coarsened to about h/8 bins per step
    and linearly interpolated back, which keeps the FFT small.
    """
    step = max(1, int(h / COARSE_STEPS_PER_BANDWIDTH))
    if step > 1:
        m = -(-seg.size // step)
        coarse = np.zeros(m * step)
        coarse[:seg.size] = seg
        coarse = coarse.reshape(m, step).sum(axis=1)
        centers = np.arange(m) * step + (step - 1) / 2.0
        smooth = _gaussian_smooth(coarse, h / step) / step
        return np.interp(np.arange(seg.size), centers, smooth)
    half = int(math.ceil(4 * h))
    taps = np.arange(-half, half + 1)
    kernel = np.exp(-0.5 * (taps / h) ** 2)
    kernel /= kernel.sum()
    return signal.fftconvolve(seg, kernel, mode="same")


def smooth_sparse(hist: np.ndarray, n_samples: int) -> np.ndarray:
    """Gaussian kernel smoothing of a sampled code histogram.

    Only kicks in when the rule-of-thumb bandwidth (0.9 min(sd, IQR/1.34)
    n^-1/5, in bins) reaches one bin, i.e. when the sample is sparse relative
    to the spread of the codes. The outlier bin 0 is left untouched and the
    total mass is preserved.
    """
    hist = np.asarray(hist, dtype=np.float64)
    body = hist[1:]
    mass = body.sum()
    if mass <= 0 or n_samples < 2:
        return hist
    idx = np.flatnonzero(body)
    w = body[idx]
    cdf = np.cumsum(w) / mass
    mean = np.dot(idx, w) / mass
    sd = math.sqrt(max(np.dot((idx - mean) ** 2, w) / mass, 0.0))
    iqr = idx[np.searchsorted(cdf, 0.75)] - idx[np.searchsorted(cdf, 0.25)]
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    h = BANDWIDTH_FACTOR * spread * n_samples ** -0.2
    if h < SMOOTH_MIN_BANDWIDTH:
        return hist
    half = int(math.ceil(4 * h))
    lo = max(int(idx[0]) - half, 0)
    hi = min(int(idx[-1]) + half + 1, body.size)
    raw = body[lo:hi]
    seg = np.clip(_gaussian_smooth(raw, h), 0.0, None)
    # Bins far above the smoothed level are real spikes (e.g. exact
    # predictions in flat regions), not sampling noise: keep them as sampled
    # and smooth only the rest.
    # the Poisson test runs in sample units; reweighted histograms are not
    unit = mass / n_samples
    spikes = (raw - seg) / unit > SPIKE_Z * np.sqrt(seg / unit + 1.0)
    if spikes.any():
        rest = np.where(spikes, 0.0, raw)
        seg = np.clip(_gaussian_smooth(rest, h), 0.0, None)
        if seg.sum() > 0:
            seg *= rest.sum() / seg.sum()
        seg[spikes] += raw[spikes]
    out = hist.copy()
    out[1:] = 0.0
    out[1 + lo:1 + hi] = seg * (mass / seg.sum())
    return out


def interp_strata(shape) -> dict[int, int]:
    """Exact point count of every (level, stencil kind) stratum of the
    multilevel interpolation over a full grid, keyed 3 * level + kind."""
    return dict(_interp_strata(tuple(int(d) for d in shape)))


@functools.lru_cache(maxsize=64)
def _interp_strata(shape) -> tuple[tuple[int, int], ...]:
    m = max(shape)
    out = {3 * 0 + kernels.COPY: 1}
    if m <= 1:
        return tuple(out.items())
    s = 1
    while 2 * s <= m - 1:
        s *= 2
    while s >= 1:
        lv = s.bit_length() - 1
        for d in range(3):
            other = 1
            for e in range(3):
                if e < d:
                    other *= -(-shape[e] // s)
                elif e > d:
                    other *= -(-shape[e] // (2 * s))
            n = shape[d]
            c = np.arange(s, n, 2 * s)
            if c.size == 0 or other == 0:
                continue
            copy = c + s >= n
            cubic = ~copy & (c - 3 * s >= 0) & (c + 3 * s < n)
            linear = ~copy & ~cubic
            for kind, mask in ((kernels.CUBIC, cubic), (kernels.LINEAR, linear), (kernels.COPY, copy)):
                cnt = int(mask.sum()) * other
                if cnt:
                    key = 3 * lv + kind
                    out[key] = out.get(key, 0) + cnt
        s //= 2
    return tuple(out.items())


def _mix_strata(codes, strata, full: dict[int, int], nbins: int) -> np.ndarray:
    per_key = np.bincount(strata)
    present = {k: int(per_key[k]) for k in np.flatnonzero(per_key).tolist()}

    def source(key):
        lv, kind = divmod(key, 3)
        if present.get(key, 0) >= MIN_STRATUM:
            return (key,)
        same_level = [k for k in present if k // 3 == lv]
        if sum(present[k] for k in same_level) >= MIN_STRATUM:
            return same_level
        for pool in ([k for k in present if k % 3 == kind], list(present)):
            ok = [k for k in pool if present[k] >= MIN_STRATUM]
            if ok:
                return (min(ok, key=lambda k: (abs(k // 3 - lv), -(k // 3))),)
        return list(present)

    # Each full-grid stratum draws its code distribution from the pooled
    # samples of its source, so every sample carries the summed weight of
    # the strata that draw on it.
    coef = np.zeros(per_key.size)
    for key, count in full.items():
        src = source(key)
        pooled = sum(present[k] for k in src)
        for k in src:
            coef[k] += count / pooled
    return np.bincount(codes, weights=coef[strata], minlength=nbins)


def estimate_histogram(f: ScalarField, blocks, config: CompressionConfig) -> BinHistogram:
    """Quantize sampled blocks independently and scale counts to the field size.

    Interpolation samples are reweighted per (level, stencil) stratum to the
    exact stratum sizes of the full grid, since blocks over-represent the
    fine levels and the short boundary stencils.
    """
    rows = blocks if isinstance(blocks, np.ndarray) else np.array(
        [b.row() for b in blocks], dtype=np.int64).reshape(-1, 12)
    if rows.shape[0] == 0:
        raise ValueError("no blocks to sample")
    ensure_compiled()
    shape = as_3d(f.dims)
    data = f.values.reshape(shape)
    if config.predictor == "lorenzo":
        hist = np.zeros(config.nbins, dtype=np.int64)
        counted = kernels.lorenzo_block_hist(data, rows, config.eb, config.quant_radius, hist)
        weights = hist.astype(np.float64)
    else:
        total = int(rows[:, 9:12].prod(axis=1).sum())
        codes = np.empty(total, dtype=np.int32)
        strata = np.empty(total, dtype=np.int64)
        counted = kernels.interp_block_samples(data, rows, config.eb, config.quant_radius,
                                               codes, strata)
        weights = _mix_strata(codes[:counted], strata[:counted], interp_strata(shape),
                              config.nbins)
    return BinHistogram(scale_counts(smooth_sparse(weights, counted), f.n))


@dataclass(frozen=True)
class CodeLengthDist:
    p: dict[int, float]  # code length -> probability mass
    mean_len: float
    symbols: np.ndarray = field(default=None, repr=False, compare=False)
    lengths: np.ndarray = field(default=None, repr=False, compare=False)

    def pmf(self, max_len: int | None = None) -> np.ndarray:
        top = max(self.p) if max_len is None else max_len
        out = np.zeros(top + 1)
        for j, pj in self.p.items():
            if j <= top:
                out[j] += pj
        return out

    @classmethod
    def from_pmf(cls, p: dict[int, float]) -> "CodeLengthDist":
        total = sum(p.values())
        p = {int(j): v / total for j, v in p.items() if v > 0}
        return cls(p, sum(j * v for j, v in p.items()))


def code_lengths_no_tree(hist: BinHistogram) -> CodeLengthDist:
    symbols, counts = hist.nonzero()
    if symbols.size == 0:
        raise ValueError("empty histogram")
    order = np.lexsort((symbols, counts))
    work = counts[order].copy()
    kernels.inplace_code_lengths(work)
    lengths = np.empty_like(work)
    lengths[order] = work
    mass = np.bincount(lengths, weights=counts) / counts.sum()
    p = {int(j): float(m) for j, m in enumerate(mass) if m > 0}
    return CodeLengthDist(p, float(np.dot(lengths, counts) / counts.sum()), symbols, lengths)


@dataclass(frozen=True)
class CasePrediction:
    p1: float
    p2: float
    p3: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.p1, self.p2, self.p3)


def predict_cases(dist: CodeLengthDist, variant: str = "paper_formula",
                  n_symbols: int = 1_000_000) -> CasePrediction:
    """Probabilities of the three byte-boundary cases of the Huffman writer.

    ``paper_formula`` takes the bit position inside the current byte to be
    uniform over 0..7: case 3 gets 1/8 and case 1 gets
    sum_{i<8} sum_{j<=i} P(len=j) / 8, i.e. the code fits in the i free bits.

    ``bitwriter_exact`` follows the position as a Markov chain on Z/8 started
    at 0 and averages its occupancy over ``n_symbols`` writes; it agrees with
    the formula whenever the lengths mix the position, and stays correct for
    periodic length sets such as all lengths equal to 8.
    """
    pmf = dist.pmf()
    cdf = np.cumsum(pmf)

    def fits(free):
        return cdf[min(free, cdf.size - 1)]

    if variant == "paper_formula":
        p3 = 1.0 / 8.0
        p1 = sum(fits(i) for i in range(8)) / 8.0
    elif variant == "bitwriter_exact":
        occ = _position_occupancy(pmf, n_symbols)
        p3 = float(occ[0])
        p1 = float(sum(occ[y] * fits(8 - y) for y in range(1, 8)))
    else:
        raise ValueError(f"unknown case variant {variant!r}")
    p1 = float(min(max(p1, 0.0), 1.0 - p3))
    return CasePrediction(p1, 1.0 - p1 - p3, p3)


def _position_occupancy(pmf: np.ndarray, n: int) -> np.ndarray:
    """Mean distribution of (bits written mod 8) over the first ``n`` writes."""
    step = np.zeros(8)
    for j, pj in enumerate(pmf):
        step[j % 8] += pj
    q = np.fft.fft(step)
    acc = np.empty(8, dtype=complex)
    for k in range(8):
        if abs(q[k] - 1.0) < 1e-12:
            acc[k] = n
        else:
            acc[k] = (1.0 - q[k] ** n) / (1.0 - q[k])
    occ = np.fft.ifft(acc).real / n
    occ = np.clip(occ, 0.0, None)
    return occ / occ.sum()


def estimate_sizes(hist: BinHistogram, dist: CodeLengthDist, n: int) -> tuple[float, int]:
    """(Huffman-stage bits per value including outlier literals, payload bytes)."""
    outlier_frac = hist.counts[0] / hist.total if hist.counts.size else 0.0
    bitrate = dist.mean_len + OUTLIER_BITS * outlier_frac
    return float(bitrate), int(math.ceil(n * dist.mean_len / 8.0))


@dataclass(frozen=True)
class EstimateBundle:
    n: int
    config: CompressionConfig
    est_histogram: BinHistogram
    code_lengths: CodeLengthDist
    est_bitrate_huffman: float
    est_encoded_size: int
    case_pred: CasePrediction
    case_exact: CasePrediction
    outlier_frac: float
    p_max: float
    sample_points: int
    sample_cost: float

    def cases(self, variant: str) -> CasePrediction:
        return self.case_pred if variant == "paper_formula" else self.case_exact

    def summary(self) -> dict:
        return {
            "n": self.n, "est_bitrate": self.est_bitrate_huffman,
            "est_encoded_size": self.est_encoded_size, "mean_len": self.code_lengths.mean_len,
            "outlier_frac": self.outlier_frac, "p_max": self.p_max,
            "p1": self.case_pred.p1, "p2": self.case_pred.p2, "p3": self.case_pred.p3,
            "sample_points": self.sample_points, "sample_cost": self.sample_cost,
        }


def characterize(f: ScalarField, config: CompressionConfig, seed: int = 0) -> EstimateBundle:
    ensure_compiled()
    start = time.perf_counter()
    blocks = sample_block_rows(f, config.sample_rate, seed, config.predictor)
    hist = estimate_histogram(f, blocks, config)
    dist = code_lengths_no_tree(hist)
    bitrate, size = estimate_sizes(hist, dist, f.n)
    cases = predict_cases(dist, "paper_formula")
    exact = predict_cases(dist, "bitwriter_exact", f.n)
    counts = hist.counts
    elapsed = time.perf_counter() - start
    return EstimateBundle(
        n=f.n, config=config, est_histogram=hist, code_lengths=dist,
        est_bitrate_huffman=bitrate, est_encoded_size=size, case_pred=cases, case_exact=exact,
        outlier_frac=float(counts[0] / f.n), p_max=float(counts.max() / f.n),
        sample_points=int(blocks[:, 9:12].prod(axis=1).sum()), sample_cost=elapsed,
    )


def tv_distance(a: BinHistogram, b: BinHistogram) -> float:
    n = max(a.counts.size, b.counts.size)
    pa = np.pad(a.counts, (0, n - a.counts.size)) / a.total
    pb = np.pad(b.counts, (0, n - b.counts.size)) / b.total
    return 0.5 * float(np.abs(pa - pb).sum())
