"""Algorithm and system uncertainty of predicted compression times.

Both are modeled as normal distributions of relative deviations; their sum
gives the combined model used for 95% intervals. A gamma fit of raw run
times is kept as a diagnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .codec import CompressionConfig, compress
from .data_io import ScalarField

Z95 = 1.959964
KINDS = ("algorithm", "system")


class UncertaintyError(ValueError):
    pass


@dataclass(frozen=True)
class ResidualSample:
    kind: str
    value: float
    context: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UncertaintyError(f"unknown residual kind {self.kind!r}")
        if not math.isfinite(self.value):
            raise UncertaintyError("residual must be finite")


def relative_residual(actual: float, predicted: float) -> float:
    """(actual - predicted) / predicted."""
    if not predicted > 0:
        raise UncertaintyError("predicted time must be positive")
    return (actual - predicted) / predicted


@dataclass(frozen=True)
class NormalFit:
    mu: float
    sigma: float
    n: int

    def __post_init__(self):
        if self.sigma < 0 or not math.isfinite(self.sigma) or not math.isfinite(self.mu):
            raise UncertaintyError("normal fit needs finite mu and sigma >= 0")
        if self.n < 2:
            raise UncertaintyError("normal fit needs n >= 2")


@dataclass(frozen=True)
class GammaFit:
    k: float
    theta: float
    n: int

    def __post_init__(self):
        if not (self.k > 0 and self.theta > 0):
            raise UncertaintyError("gamma fit needs k > 0 and theta > 0")


def _values(samples) -> np.ndarray:
    return np.array([s.value if isinstance(s, ResidualSample) else s for s in samples],
                    dtype=np.float64)


def fit_normal(samples) -> NormalFit:
    x = _values(samples)
    if x.size < 2:
        raise UncertaintyError("need at least 2 samples")
    if not np.all(np.isfinite(x)):
        raise UncertaintyError("samples must be finite")
    return NormalFit(float(x.mean()), float(x.std(ddof=1)), int(x.size))


def fit_gamma(samples) -> GammaFit:
    """Method-of-moments gamma fit: k = mean^2/var, theta = var/mean."""
    x = _values(samples)
    if x.size < 4:
        raise UncertaintyError("need at least 4 samples")
    if not np.all(x > 0):
        raise UncertaintyError("gamma samples must be positive")
    mean, var = float(x.mean()), float(x.var(ddof=1))
    if not var > 0:
        raise UncertaintyError("zero variance: gamma fit is degenerate")
    return GammaFit(mean * mean / var, var / mean, int(x.size))


def system_residuals(times, context=(), correct: bool = False) -> list[ResidualSample]:
    """Relative deviations of repeated run times from their mean.

    ``correct`` rescales by sqrt(n/(n-1)) so that deviations from the sample
    mean of a few runs are not biased narrow.
    """
    t = np.asarray(times, dtype=np.float64)
    if t.size < 2:
        raise UncertaintyError("need at least 2 runs")
    mean = float(t.mean())
    if not mean > 0:
        raise UncertaintyError("run times must be positive")
    scale = math.sqrt(t.size / (t.size - 1)) if correct else 1.0
    return [ResidualSample("system", float((v - mean) / mean * scale), tuple(context))
            for v in t]


def measure_system(f: ScalarField, config: CompressionConfig, repeats: int = 30):
    """Compress ``repeats`` times after one discarded warm-up run.

    Returns (system residuals of t_total, raw run times).
    """
    if repeats < 5:
        raise UncertaintyError("repeats must be at least 5")
    compress(f, config)
    times = [compress(f, config)[1].t_total for _ in range(repeats)]
    ctx = (f.name, config.eb, config.predictor)
    return system_residuals(times, ctx), times


@dataclass(frozen=True)
class UncertaintyModel:
    algo: NormalFit
    sys: NormalFit
    gamma_diag: GammaFit | None = None

    @property
    def combined(self) -> NormalFit:
        return NormalFit(self.algo.mu + self.sys.mu,
                         math.sqrt(self.algo.sigma ** 2 + self.sys.sigma ** 2),
                         min(self.algo.n, self.sys.n))

    def to_dict(self) -> dict:
        g = self.gamma_diag
        return {"mu_a": self.algo.mu, "sigma_a": self.algo.sigma, "n_a": self.algo.n,
                "mu_s": self.sys.mu, "sigma_s": self.sys.sigma, "n_s": self.sys.n,
                "gamma_k": None if g is None else g.k,
                "gamma_theta": None if g is None else g.theta,
                "gamma_n": None if g is None else g.n}

    @classmethod
    def from_dict(cls, d: dict) -> "UncertaintyModel":
        expected = {"mu_a", "sigma_a", "n_a", "mu_s", "sigma_s", "n_s",
                    "gamma_k", "gamma_theta", "gamma_n"}
        if set(d) != expected:
            raise UncertaintyError(f"uncertainty keys {sorted(d)} != {sorted(expected)}")
        gamma = None
        if d["gamma_k"] is not None:
            gamma = GammaFit(float(d["gamma_k"]), float(d["gamma_theta"]), int(d["gamma_n"]))
        return cls(NormalFit(float(d["mu_a"]), float(d["sigma_a"]), int(d["n_a"])),
                   NormalFit(float(d["mu_s"]), float(d["sigma_s"]), int(d["n_s"])), gamma)


def confidence_interval(t_pred: float, model: UncertaintyModel | None,
                        level: float = 0.95) -> tuple[float, float]:
    """t_pred * (1 + mu_c -/+ z * sigma_c), low end clamped at zero."""
    if model is None:
        raise UncertaintyError("no fitted uncertainty model")
    if not 0 < level < 1:
        raise UncertaintyError("level must be in (0, 1)")
    z = Z95 if level == 0.95 else float(norm.ppf(0.5 + level / 2))
    c = model.combined
    return (max(0.0, t_pred * (1 + c.mu - z * c.sigma)), t_pred * (1 + c.mu + z * c.sigma))

