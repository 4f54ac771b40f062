"""Per-stage surrogates and their composition into a compression-time prediction.

Stage 1 (prediction + quantization) is a linear model over cheap bundle
features. Stage 2 (frequency counting + codebook) is a smoothed curve of
seconds per element against the estimated Huffman bitrate. Stage 3 (Huffman
encoding) is a weighted sum of expected byte-boundary case counts, plus a
residual curve above a bitrate threshold. Stage 4 (lossless) divides the
estimated Huffman output size by a piecewise affine throughput in the
lossless ratio.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from .codec import PREDICTORS, CompressionConfig
from .estimator import CASE_VARIANTS, EstimateBundle

STAGE1_FEATURES = ("n", "n_outlier", "n_non_modal", "n_bits")
RIDGE_CONDITION = 1e10
RIDGE_SCALE = 1e-8
DEFAULT_WINDOW = 5


class ModelError(Exception):
    """Unfitted, malformed or mismatched time model."""


# ---------------------------------------------------------------- stage 1


def features_stage1(bundle: EstimateBundle, n: int | None = None,
                    config: CompressionConfig | None = None) -> np.ndarray:
    """[N, N*outlier_frac, N*(1-p_max), N*est_bitrate], in that order."""
    if config is not None and config != bundle.config:
        raise ModelError("bundle was computed for a different configuration")
    n = bundle.n if n is None else n
    return np.array([n, n * bundle.outlier_frac, n * (1.0 - bundle.p_max),
                     n * bundle.est_bitrate_huffman], dtype=np.float64)


@dataclass(frozen=True)
class LinearSurrogate:
    weights: tuple[float, ...]  # one per feature, intercept last
    feature_names: tuple[str, ...]
    ridge: bool = False

    def __post_init__(self):
        if len(self.weights) != len(self.feature_names) + 1:
            raise ModelError("need one weight per feature plus an intercept")
        if not all(math.isfinite(w) for w in self.weights):
            raise ModelError("non-finite linear weights")

    @property
    def intercept(self) -> float:
        return self.weights[-1]

    def predict(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(np.dot(self.weights[:-1], x) + self.weights[-1])


def fit_linear(features, times, feature_names=None, intercept: bool = True,
               nonnegative: bool = False) -> LinearSurrogate:
    """Least squares on column-scaled features.

    Falls back to ridge damping (lambda = 1e-8 * trace of the scaled normal
    matrix) when that matrix has a condition number above 1e10. With
    ``intercept=False`` the intercept is pinned to zero. ``nonnegative``
    solves the bounded problem instead (no ridge needed), for features that
    can only add cost; free signs let correlated features cancel and then
    extrapolate to negative times outside the calibration range.
    """
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(times, dtype=np.float64).reshape(-1)
    rows, cols = X.shape
    if feature_names is None:
        feature_names = tuple(f"x{i}" for i in range(cols))
    if len(feature_names) != cols:
        raise ModelError("feature_names does not match the feature count")
    if rows != y.size:
        raise ModelError("features and times differ in length")
    if rows < cols + int(intercept):
        raise ModelError(f"need at least {cols + int(intercept)} rows, got {rows}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ModelError("non-finite training data")
    A = np.hstack([X, np.ones((rows, 1))]) if intercept else X
    scale = np.abs(A).max(axis=0)
    scale[scale == 0] = 1.0
    As = A / scale
    normal = As.T @ As
    ridge = not nonnegative and bool(np.linalg.cond(normal) > RIDGE_CONDITION)
    if nonnegative:
        coef = optimize.nnls(As, y)[0]
    elif ridge:
        lam = RIDGE_SCALE * np.trace(normal)
        coef = np.linalg.solve(normal + lam * np.eye(normal.shape[0]), As.T @ y)
    else:
        coef = np.linalg.lstsq(As, y, rcond=None)[0]
    coef = coef / scale
    weights = tuple(float(c) for c in coef) + (() if intercept else (0.0,))
    return LinearSurrogate(weights, tuple(feature_names), ridge)


# ------------------------------------------------------------------ curves


@dataclass(frozen=True)
class CurveSurrogate:
    """Piecewise-linear curve through smoothed knots, flat beyond both ends."""

    xs: tuple[float, ...]
    ys: tuple[float, ...]
    window: int = DEFAULT_WINDOW
    signed: bool = False  # residual curves may dip below zero

    def __post_init__(self):
        if len(self.xs) == 0 or len(self.xs) != len(self.ys):
            raise ModelError("curve needs matching, nonempty knot lists")
        if any(b <= a for a, b in zip(self.xs, self.xs[1:])):
            raise ModelError("curve knots must be strictly increasing")
        if not all(math.isfinite(v) for v in self.xs + self.ys):
            raise ModelError("non-finite curve knots")
        if not self.signed and any(v < 0 for v in self.ys):
            raise ModelError("curve values must be nonnegative")
        if self.window < 1 or self.window % 2 == 0:
            raise ModelError("window must be a positive odd integer")

    def __call__(self, x: float) -> float:
        return float(np.interp(x, self.xs, self.ys))


def moving_average(y: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; the window shrinks symmetrically at the ends."""
    half = window // 2
    out = np.empty(y.size)
    for i in range(y.size):
        r = min(half, i, y.size - 1 - i)
        out[i] = y[i - r:i + r + 1].mean()
    return out


def fit_curve(xs, ys, window: int = DEFAULT_WINDOW, signed: bool = False) -> CurveSurrogate:
    """Sort by x, smooth y with a centered moving average, merge equal x."""
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    if xs.size == 0:
        raise ModelError("cannot fit a curve to no samples")
    if xs.size != ys.size:
        raise ModelError("x and y differ in length")
    if window < 1 or window % 2 == 0:
        raise ModelError("window must be a positive odd integer")
    if xs.size < window:
        raise ModelError(f"need at least {window} samples for window {window}")
    order = np.lexsort((ys, xs))
    xs, smooth = xs[order], moving_average(ys[order], window)
    ux, inverse = np.unique(xs, return_inverse=True)
    uy = np.bincount(inverse, weights=smooth) / np.bincount(inverse)
    if not signed:
        uy = np.clip(uy, 0.0, None)
    return CurveSurrogate(tuple(float(v) for v in ux), tuple(float(v) for v in uy),
                          window, signed)


def _odd_window(window: int, n: int) -> int:
    w = min(window, n)
    return w if w % 2 else w - 1


# ------------------------------------------------------------------ stage 4


@dataclass(frozen=True)
class ThroughputSegment:
    lo: float  # ratio range start (-inf for the first segment)
    hi: float  # ratio range end (inf for the last segment)
    slope: float
    intercept: float


@dataclass(frozen=True)
class PiecewiseThroughput:
    """Throughput in bytes/s as a piecewise affine function of the lossless ratio.

    Inputs are clamped to the fitted ratio range and the output to at least
    half the smallest observed throughput.
    """

    segments: tuple[ThroughputSegment, ...]
    x_range: tuple[float, float]
    floor: float

    def __post_init__(self):
        if not self.segments:
            raise ModelError("piecewise model has no segments")
        if self.segments[0].lo != -math.inf or self.segments[-1].hi != math.inf:
            raise ModelError("segments must cover the whole ratio axis")
        for a, b in zip(self.segments, self.segments[1:]):
            if a.hi != b.lo:
                raise ModelError("segments must be contiguous")
        if not self.floor > 0:
            raise ModelError("throughput floor must be positive")

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return tuple(s.hi for s in self.segments[:-1])

    def __call__(self, ratio: float) -> float:
        x = min(max(ratio, self.x_range[0]), self.x_range[1])
        for seg in self.segments:
            if x < seg.hi:
                break
        return max(seg.slope * x + seg.intercept, self.floor)


def _affine_sse(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    if x.size == 0:
        return 0.0, 0.0, 0.0
    if x.size == 1 or np.ptp(x) == 0:
        c = float(y.mean())
        return float(((y - c) ** 2).sum()), 0.0, c
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    return float(resid @ resid), float(slope), float(icpt)


def fit_piecewise(ratios, throughputs, max_breaks: int = 2,
                  quantile_step: float = 0.05) -> PiecewiseThroughput:
    """Grid-search up to ``max_breaks`` breakpoints over sample quantiles.

    Each segment gets its own least-squares affine fit. The break count is
    chosen by SSE + 2 * sigma^2 per segment, where sigma^2 is the residual
    variance of the most flexible fit; fewer segments win ties.
    """
    x = np.asarray(ratios, dtype=np.float64).reshape(-1)
    y = np.asarray(throughputs, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ModelError("ratios and throughputs differ in length")
    if x.size < 6:
        raise ModelError(f"need at least 6 samples, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.all(y > 0)):
        raise ModelError("throughputs must be finite and positive")
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    qs = np.arange(quantile_step, 1.0 - quantile_step / 2, quantile_step)
    grid = np.unique(np.quantile(x, qs, method="lower"))

    def split(bps):
        edges = [-math.inf, *bps, math.inf]
        parts = []
        for lo, hi in zip(edges, edges[1:]):
            m = (x >= lo) & (x < hi)
            if m.sum() < 2:
                return None
            parts.append((lo, hi, m))
        return parts

    best = {}  # break count -> (sse, parts, fits)
    for k in range(max_breaks + 1):
        for bps in itertools.combinations(grid.tolist(), k):
            parts = split(bps)
            if parts is None:
                continue
            fits = [_affine_sse(x[m], y[m]) for _, _, m in parts]
            sse = sum(f[0] for f in fits)
            if k not in best or sse < best[k][0] - 1e-12 * max(sse, 1.0):
                best[k] = (sse, parts, fits)
    top = max(best)
    dof = x.size - 2 * (top + 1)
    sigma2 = best[top][0] / dof if dof > 0 else best[0][0] / max(x.size - 2, 1)
    # exact data would make the penalty vanish and let round-off pick the count
    sigma2 = max(sigma2, (1e-9 * float(np.abs(y).max())) ** 2)
    score = {k: v[0] + 2.0 * sigma2 * (k + 1) for k, v in best.items()}
    chosen = min(score, key=lambda k: (score[k], k))
    _, parts, fits = best[chosen]
    segs = tuple(ThroughputSegment(float(lo), float(hi), f[1], f[2])
                 for (lo, hi, _), f in zip(parts, fits))
    return PiecewiseThroughput(segs, (float(x[0]), float(x[-1])), float(y.min() / 2.0))


# ---------------------------------------------------------------- stage 3


@dataclass(frozen=True)
class EncodeModel:
    """Per-case write costs below ``tau``; above it a residual curve is added.

    The residual curve passes through (tau, 0), so the prediction is
    continuous in the estimated bitrate at the threshold.
    """

    weights: tuple[float, float, float]  # seconds per case-1/2/3 write
    tau: float
    residual: CurveSurrogate

    def per_element(self, probs, bitrate: float) -> float:
        base = float(np.dot(self.weights, probs))
        if bitrate <= self.tau:
            return base
        return base + self.residual(bitrate)


def fit_encode(probs, per_elem, bitrates, tau: float | None = None,
               window: int = DEFAULT_WINDOW) -> EncodeModel:
    """Fit case weights by nonnegative least squares on records at or below tau,
    then a smoothed residual curve on the records above it."""
    P = np.asarray(probs, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(per_elem, dtype=np.float64).reshape(-1)
    x = np.asarray(bitrates, dtype=np.float64).reshape(-1)
    if not P.shape[0] == t.size == x.size:
        raise ModelError("stage-3 training arrays differ in length")
    tau = float(np.median(x)) if tau is None else float(tau)
    low = x <= tau
    if low.sum() < 1:
        raise ModelError("no calibration records at or below tau")
    w, _ = optimize.nnls(P[low], t[low])
    rx, ry = [tau], [0.0]
    high = ~low
    if high.sum():
        resid = t[high] - P[high] @ w
        curve = fit_curve(x[high], resid, _odd_window(window, int(high.sum())), signed=True)
        rx += list(curve.xs)
        ry += list(curve.ys)
    return EncodeModel(tuple(float(v) for v in w), tau, CurveSurrogate(tuple(rx), tuple(ry),
                                                                        window, True))


def predict_stage3(bundle: EstimateBundle, n: int, model: "TimeModel") -> float:
    pm = model.for_predictor(bundle.config.predictor)
    probs = bundle.cases(model.case_variant).as_tuple()
    return max(0.0, n * pm.s3.per_element(probs, bundle.est_bitrate_huffman))


# ------------------------------------------------------------ composition


@dataclass(frozen=True)
class PredictorModel:
    s1: LinearSurrogate
    s2: CurveSurrogate
    s3: EncodeModel


@dataclass(frozen=True)
class LosslessModel:
    throughput: PiecewiseThroughput
    # observed (estimated Huffman bitrate, lossless ratio) pairs, sorted by bitrate
    ratio_xs: tuple[float, ...]
    ratio_ys: tuple[float, ...]

    def ratio_at(self, bitrate: float) -> float:
        i = int(np.argmin(np.abs(np.asarray(self.ratio_xs) - bitrate)))
        return self.ratio_ys[i]


@dataclass(frozen=True)
class TimeModel:
    predictors: dict  # predictor name -> PredictorModel
    s4: LosslessModel
    case_variant: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.predictors:
            raise ModelError("time model has no predictor surrogates")
        unknown = set(self.predictors) - set(PREDICTORS)
        if unknown:
            raise ModelError(f"unknown predictors {sorted(unknown)}")
        if self.case_variant not in CASE_VARIANTS:
            raise ModelError(f"unknown case variant {self.case_variant!r}")

    def for_predictor(self, predictor: str) -> PredictorModel:
        try:
            return self.predictors[predictor]
        except KeyError:
            raise ModelError(f"model has no surrogates for predictor {predictor!r}") from None

    def with_metadata(self, **kw) -> "TimeModel":
        return replace(self, metadata={**self.metadata, **kw})


@dataclass(frozen=True)
class PredictionReport:
    t1: float
    t2: float
    t3: float
    t4: float
    t_total: float
    ci_low: float
    ci_high: float
    n: int
    eb: float
    predictor: str
    est_bitrate: float
    sample_cost: float = 0.0

    STAGES = ("t1", "t2", "t3", "t4")

    def stages(self) -> tuple[float, float, float, float]:
        return (self.t1, self.t2, self.t3, self.t4)

    def with_ci(self, low: float, high: float) -> "PredictionReport":
        # the interval always brackets the point prediction
        return replace(self, ci_low=min(low, self.t_total), ci_high=max(high, self.t_total))

    def as_row(self) -> dict:
        return {"n": self.n, "eb": self.eb, "predictor": self.predictor,
                "est_bitrate": self.est_bitrate, "t1": self.t1, "t2": self.t2,
                "t3": self.t3, "t4": self.t4, "t_total": self.t_total,
                "ci_low": self.ci_low, "ci_high": self.ci_high,
                "sample_cost": self.sample_cost}


def predict_stages(bundle: EstimateBundle, n: int, model: TimeModel) -> tuple[float, ...]:
    pm = model.for_predictor(bundle.config.predictor)
    x = bundle.est_bitrate_huffman
    t1 = max(0.0, pm.s1.predict(features_stage1(bundle, n)))
    t2 = max(0.0, n * pm.s2(x))
    t3 = predict_stage3(bundle, n, model)
    ratio = model.s4.ratio_at(x)
    size = bundle.est_encoded_size * (n / bundle.n)
    t4 = max(0.0, size / model.s4.throughput(ratio))
    return t1, t2, t3, t4


def predict_total(bundle: EstimateBundle, n: int | None = None,
                  config: CompressionConfig | None = None,
                  model: TimeModel | None = None) -> PredictionReport:
    """Point prediction for every stage; the interval collapses to the point
    until an uncertainty model is attached."""
    if model is None:
        raise ModelError("no fitted time model")
    if config is not None and config != bundle.config:
        raise ModelError("bundle was computed for a different configuration")
    lossless = model.metadata.get("lossless")
    if lossless is not None and lossless != bundle.config.lossless:
        raise ModelError(f"model was calibrated for lossless={lossless!r}, "
                         f"not {bundle.config.lossless!r}")
    n = bundle.n if n is None else int(n)
    t1, t2, t3, t4 = predict_stages(bundle, n, model)
    total = t1 + t2 + t3 + t4
    return PredictionReport(t1, t2, t3, t4, total, total, total, n, bundle.config.eb,
                            bundle.config.predictor, bundle.est_bitrate_huffman,
                            bundle.sample_cost)
