"""Offline calibration: timing sweeps, surrogate fitting and the model file."""

from __future__ import annotations

import datetime as _dt
import json
import math
import platform
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .codec import PREDICTORS, CompressionConfig, ObservedMetrics, StageTiming, compress
from .data_io import ScalarField, write_csv
from .estimator import CASE_VARIANTS, EstimateBundle, characterize
from .time_model import (
    STAGE1_FEATURES,
    CurveSurrogate,
    EncodeModel,
    LinearSurrogate,
    LosslessModel,
    ModelError,
    PiecewiseThroughput,
    PredictorModel,
    ThroughputSegment,
    TimeModel,
    _odd_window,
    features_stage1,
    fit_curve,
    fit_encode,
    fit_linear,
    fit_piecewise,
    predict_total,
)
from .uncertainty import (
    UncertaintyError,
    UncertaintyModel,
    confidence_interval,
    fit_gamma,
    fit_normal,
    relative_residual,
    system_residuals,
)

MODEL_VERSION = 1
MIN_EBS = 4
DEFAULT_EB_GRID = tuple(float(v) for v in np.logspace(-1, -6, 12))
RECORD_COLUMNS = ("field", "eb", "predictor", "t_pq", "t_fb", "t_enc", "t_ll", "bitrate",
                  "est_bitrate", "n1", "n2", "n3", "lossless_ratio")


class ModelFileError(ModelError):
    """Unreadable, malformed or wrong-version model file."""


@dataclass(frozen=True)
class CalibrationPlan:
    fields: tuple[str, ...]
    eb_grid: tuple[float, ...] = DEFAULT_EB_GRID
    predictors: tuple[str, ...] = PREDICTORS
    repeats: int = 3
    lossless: str = "lz"
    sample_rate: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if not self.fields:
            raise ValueError("plan needs at least one field")
        if len(set(self.fields)) != len(self.fields):
            raise ValueError("field names must be unique")
        if not self.eb_grid or any(not (e > 0 and math.isfinite(e)) for e in self.eb_grid):
            raise ValueError("eb_grid must hold positive error bounds")
        if any(b >= a for a, b in zip(self.eb_grid, self.eb_grid[1:])):
            raise ValueError("eb_grid must be strictly decreasing")
        if not self.predictors or any(p not in PREDICTORS for p in self.predictors):
            raise ValueError(f"predictors must be a nonempty subset of {PREDICTORS}")
        if self.repeats < 3:
            raise ValueError("repeats must be at least 3")

    @property
    def cells(self) -> int:
        return len(self.fields) * len(self.eb_grid) * len(self.predictors)


@dataclass(frozen=True, eq=False)
class CalibrationRecord:
    field: str
    config: CompressionConfig
    timing: StageTiming  # per-stage medians over the repeats
    metrics: ObservedMetrics
    bundle: EstimateBundle
    repeat_totals: tuple[float, ...]

    @property
    def n(self) -> int:
        return self.metrics.n

    def as_row(self) -> dict:
        m, t = self.metrics, self.timing
        n1, n2, n3 = m.case_counts
        return {"field": self.field, "eb": self.config.eb, "predictor": self.config.predictor,
                "t_pq": t.t_pq, "t_fb": t.t_freq_book, "t_enc": t.t_encode,
                "t_ll": t.t_lossless, "bitrate": m.bitrate,
                "est_bitrate": self.bundle.est_bitrate_huffman, "n1": n1, "n2": n2, "n3": n3,
                "lossless_ratio": m.lossless_ratio}


def median_timing(timings: list[StageTiming]) -> StageTiming:
    """Median of every stage independently (and of the total)."""
    cols = np.array([[*t.stages(), t.t_total] for t in timings])
    med = np.median(cols, axis=0)
    return StageTiming(*(float(v) for v in med))


def timed_rounds(jobs, repeats: int):
    """Compress every (field, config) job ``repeats`` times, round-robin.

    Spreading each job's repeats over the whole run, rather than running
    them back to back, keeps a burst of machine load from spoiling all
    repeats of the same cells. Returns, per job, its timings and the
    metrics of its last run.
    """
    timings = [[] for _ in jobs]
    metrics = [None] * len(jobs)
    for _ in range(repeats):
        for i, (f, config) in enumerate(jobs):
            _, timing, metrics[i] = compress(f, config)
            timings[i].append(timing)
    return list(zip(timings, metrics))


def _record(f, config, timings, metrics, seed, name) -> CalibrationRecord:
    bundle = characterize(f, config, seed)
    return CalibrationRecord(name or f.name, config, median_timing(timings), metrics, bundle,
                             tuple(t.t_total for t in timings))


def run_cell(f: ScalarField, config: CompressionConfig, repeats: int, seed: int = 0,
             name: str | None = None) -> CalibrationRecord:
    [(timings, metrics)] = timed_rounds([(f, config)], repeats)
    return _record(f, config, timings, metrics, seed, name)


def run_sweep(plan: CalibrationPlan,
              datasets: Mapping[str, ScalarField | Callable[[], ScalarField]]) -> list[CalibrationRecord]:
    """Time every (field, predictor, eb) cell of the plan, serially.

    ``datasets`` maps field names to fields or zero-argument loaders; a
    failing loader aborts the sweep and nothing is returned. Repeats run in
    rounds over all cells.
    """
    fields = {}
    for name in plan.fields:
        if name not in datasets:
            raise KeyError(f"no dataset named {name!r}")
        f = datasets[name]
        fields[name] = f() if callable(f) else f
    cells = [(name, CompressionConfig(predictor, eb, lossless=plan.lossless,
                                      sample_rate=plan.sample_rate))
             for name in plan.fields for predictor in plan.predictors for eb in plan.eb_grid]
    runs = timed_rounds([(fields[name], config) for name, config in cells], plan.repeats)
    return [_record(fields[name], config, timings, metrics, plan.seed, name)
            for (name, config), (timings, metrics) in zip(cells, runs)]


def write_records_csv(records, path) -> None:
    write_csv([r.as_row() for r in records], path, RECORD_COLUMNS)


# ----------------------------------------------------------------- fitting


def case_variant_mad(records, variant: str) -> float:
    """Mean absolute deviation between predicted and counted case fractions."""
    dev = [np.abs(np.subtract(r.bundle.cases(variant).as_tuple(),
                              r.metrics.case_fractions)).mean() for r in records]
    return float(np.mean(dev))


def select_case_variant(records) -> tuple[str, dict]:
    mads = {v: case_variant_mad(records, v) for v in CASE_VARIANTS}
    # ties go to the first listed variant
    best = min(CASE_VARIANTS, key=lambda v: (mads[v], CASE_VARIANTS.index(v)))
    return best, mads


def _fit_predictor(recs, variant: str, window: int) -> PredictorModel:
    if len(recs) < len(STAGE1_FEATURES):
        raise ModelError(f"need at least {len(STAGE1_FEATURES)} records per predictor")
    X = np.array([features_stage1(r.bundle, r.n) for r in recs])
    s1 = fit_linear(X, [r.timing.t_pq for r in recs], STAGE1_FEATURES, intercept=False,
                    nonnegative=True)
    x = np.array([r.bundle.est_bitrate_huffman for r in recs])
    w = _odd_window(window, len(recs))
    s2 = fit_curve(x, [r.timing.t_freq_book / r.n for r in recs], w)
    probs = [r.bundle.cases(variant).as_tuple() for r in recs]
    s3 = fit_encode(probs, [r.timing.t_encode / r.n for r in recs], x, None, window)
    return PredictorModel(s1, s2, s3)


def _fit_lossless(records) -> LosslessModel:
    ratios = np.array([r.metrics.lossless_ratio for r in records])
    tput = np.array([r.metrics.encoded_size / max(r.timing.t_lossless, 1e-9) for r in records])
    throughput = fit_piecewise(ratios, tput)
    xs = np.array([r.bundle.est_bitrate_huffman for r in records])
    order = np.lexsort((ratios, xs))
    return LosslessModel(throughput, tuple(float(v) for v in xs[order]),
                         tuple(float(v) for v in ratios[order]))


def _check_span(records) -> None:
    if len(records) < 8:
        raise ModelError(f"need at least 8 calibration records, got {len(records)}")
    ebs = {r.config.eb for r in records}
    if len(ebs) < MIN_EBS:
        raise ModelError(f"need at least {MIN_EBS} distinct error bounds, got {len(ebs)}")
    if len({r.config.lossless for r in records}) != 1:
        raise ModelError("calibration records mix lossless back-ends")


def fit_time_model(records, case_variant: str | None = None, window: int = 5,
                   metadata: dict | None = None) -> TimeModel:
    _check_span(records)
    variant, mads = select_case_variant(records)
    if case_variant is not None:
        variant = case_variant
    groups = {}
    for r in records:
        groups.setdefault(r.config.predictor, []).append(r)
    predictors = {p: _fit_predictor(groups[p], variant, window)
                  for p in PREDICTORS if p in groups}
    meta = {
        "machine": platform.node() or "unknown",
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "fields": sorted({r.field for r in records}),
        "eb_grid": sorted({r.config.eb for r in records}, reverse=True),
        "lossless": records[0].config.lossless,
        "curve_domain": "estimated huffman bitrate",
        "lossless_ratio_source": "nearest calibration record by estimated bitrate",
        "case_variant_mad": mads,
        "stage1_intercept": "pinned to zero",
    }
    meta.update(metadata or {})
    return TimeModel(predictors, _fit_lossless(records), variant, json.loads(json.dumps(meta)))


HOLDOUTS = ("eb", "field")


def _holdout_key(holdout: str):
    if holdout == "eb":
        return lambda r: r.config.eb
    if holdout == "field":
        return lambda r: r.field
    raise ValueError(f"unknown holdout {holdout!r}")


def algorithm_residuals(records, window: int = 5, case_variant: str | None = None,
                        holdout: str = "eb"):
    """Held-out relative errors (actual - predicted) / predicted of the total time.

    ``holdout="eb"`` refits without each error bound in turn (all fields and
    predictors at that bound left out) and predicts the missing cells;
    ``holdout="field"`` does the same per calibration field. With fewer than
    two groups this degrades to in-sample residuals.

    Error-bound holdout is the default: with two calibration fields of
    different character, dropping one measures transfer between unlike
    fields and overstates the error on new fields resembling either.
    """
    key = _holdout_key(holdout)
    groups = sorted({key(r) for r in records})
    if holdout == "eb" and len(groups) <= MIN_EBS:
        # dropping a bound would leave too few to fit
        return algorithm_residuals(records, window, case_variant, "field")
    out = []
    if len(groups) < 2:
        model = fit_time_model(records, case_variant, window)
        return [relative_residual(r.timing.t_total, predict_total(r.bundle, model=model).t_total)
                for r in records]
    for g in groups:
        train = [r for r in records if key(r) != g]
        model = fit_time_model(train, case_variant, window)
        for r in records:
            if key(r) == g:
                pred = predict_total(r.bundle, model=model).t_total
                out.append(relative_residual(r.timing.t_total, pred))
    return out


def fit_uncertainty(records, window: int = 5, case_variant: str | None = None,
                    correct_small_samples: bool = True, holdout: str = "eb") -> UncertaintyModel:
    algo = fit_normal(algorithm_residuals(records, window, case_variant, holdout))
    sys_res = []
    for r in records:
        if len(r.repeat_totals) >= 2:
            sys_res += system_residuals(r.repeat_totals, (r.field, r.config.eb),
                                        correct_small_samples)
    sysfit = fit_normal(sys_res)
    try:
        gamma = fit_gamma([1.0 + s.value for s in sys_res])
    except UncertaintyError:
        gamma = None
    return UncertaintyModel(algo, sysfit, gamma)


def fit_all(records, case_variant: str | None = None, window: int = 5,
            metadata: dict | None = None) -> tuple[TimeModel, UncertaintyModel]:
    """Fit every surrogate plus the uncertainty model from sweep records."""
    records = list(records)
    model = fit_time_model(records, case_variant, window, metadata)
    unc = fit_uncertainty(records, window, model.case_variant)
    return model, unc


def predict_with_ci(bundle: EstimateBundle, model: TimeModel, unc: UncertaintyModel,
                    n: int | None = None):
    report = predict_total(bundle, n, model=model)
    return report.with_ci(*confidence_interval(report.t_total, unc))


# ---------------------------------------------------------------- evaluate

EVAL_COLUMNS = ("field", "eb", "predictor", "n", "bitrate", "est_bitrate",
                "t_pq", "t_fb", "t_enc", "t_ll", "t_total",
                "p_pq", "p_fb", "p_enc", "p_ll", "p_total",
                "pq_err", "fb_err", "enc_err", "ll_err", "overall_err",
                "ci_low", "ci_high", "covered", "runs", "runs_in_ci", "sample_cost")


def _rel(pred: float, actual: float) -> float:
    return (pred - actual) / actual if actual > 0 else math.nan


def evaluate_field(f: ScalarField, eb_grid, predictors, model: TimeModel,
                   unc: UncertaintyModel, seed: int = 0, lossless: str | None = None,
                   sample_rate: float = 0.04, repeats: int = 3) -> list[dict]:
    """One row per (predictor, eb): median stage times over ``repeats``
    compress runs next to their predictions, relative errors and CI coverage.

    ``covered`` refers to the median total; ``runs_in_ci`` counts the single
    runs inside the interval.
    """
    if repeats < 1:
        raise ValueError("repeats must be positive")
    lossless = lossless or model.metadata.get("lossless", "lz")
    configs = [CompressionConfig(predictor, eb, lossless=lossless, sample_rate=sample_rate)
               for predictor in predictors for eb in eb_grid]
    bundles = [characterize(f, config, seed) for config in configs]
    reports = [predict_with_ci(bundle, model, unc) for bundle in bundles]
    runs = timed_rounds([(f, config) for config in configs], repeats)
    rows = []
    for config, bundle, rep, (timings, m) in zip(configs, bundles, reports, runs):
        t = median_timing(timings)
        actual = (*t.stages(), t.t_total)
        pred = (*rep.stages(), rep.t_total)
        row = {"field": f.name, "eb": config.eb, "predictor": config.predictor, "n": f.n,
               "bitrate": m.bitrate, "est_bitrate": bundle.est_bitrate_huffman}
        for key, a, p in zip(("pq", "fb", "enc", "ll", "total"), actual, pred):
            row[f"t_{key}"] = a
            row[f"p_{key}"] = p
        for key, a, p in zip(("pq_err", "fb_err", "enc_err", "ll_err", "overall_err"),
                             actual, pred):
            row[key] = _rel(p, a)
        inside = sum(rep.ci_low <= x.t_total <= rep.ci_high for x in timings)
        row.update(ci_low=rep.ci_low, ci_high=rep.ci_high,
                   covered=bool(rep.ci_low <= t.t_total <= rep.ci_high),
                   runs=repeats, runs_in_ci=int(inside), sample_cost=bundle.sample_cost)
        rows.append(row)
    return rows


def summarize(rows) -> list[dict]:
    """Per-field mean absolute stage errors and CI coverage."""
    out = []
    for name in dict.fromkeys(r["field"] for r in rows):
        sel = [r for r in rows if r["field"] == name]
        summary = {"field": name, "cells": len(sel)}
        for key in ("pq_err", "fb_err", "enc_err", "ll_err", "overall_err"):
            summary[key] = float(np.nanmean([abs(r[key]) for r in sel]))
        summary["coverage"] = (sum(r["runs_in_ci"] for r in sel)
                               / sum(r["runs"] for r in sel))
        out.append(summary)
    return out


# -------------------------------------------------------------- model file


def _curve_doc(c: CurveSurrogate) -> dict:
    return {"window": c.window, "xs": list(c.xs), "ys": list(c.ys)}


def model_to_dict(model: TimeModel, unc: UncertaintyModel) -> dict:
    meta = dict(model.metadata)
    machine = meta.pop("machine", "unknown")
    tp = model.s4.throughput
    return {
        "version": MODEL_VERSION,
        "machine": machine,
        "case_variant": model.case_variant,
        "s1": {p: {"weights": list(pm.s1.weights), "feature_names": list(pm.s1.feature_names),
                   "ridge": pm.s1.ridge} for p, pm in model.predictors.items()},
        "s2": {p: _curve_doc(pm.s2) for p, pm in model.predictors.items()},
        "s3": {p: {"weights": list(pm.s3.weights), "tau": pm.s3.tau,
                   **_curve_doc(pm.s3.residual)} for p, pm in model.predictors.items()},
        "s4": {"breakpoints": list(tp.breakpoints),
               "segments": [[s.slope, s.intercept] for s in tp.segments],
               "x_range": list(tp.x_range), "floor": tp.floor,
               "ratio_xs": list(model.s4.ratio_xs), "ratio_ys": list(model.s4.ratio_ys)},
        "uncertainty": unc.to_dict(),
        "calibration": meta,
    }


def _keys(doc, expected, where):
    if not isinstance(doc, dict):
        raise ModelFileError(f"{where}: expected an object")
    if set(doc) != set(expected):
        extra = sorted(set(doc) - set(expected))
        missing = sorted(set(expected) - set(doc))
        raise ModelFileError(f"{where}: unexpected keys {extra}, missing keys {missing}")


def _floats(seq) -> tuple[float, ...]:
    return tuple(float(v) for v in seq)


def model_from_dict(doc: dict) -> tuple[TimeModel, UncertaintyModel]:
    if not isinstance(doc, dict):
        raise ModelFileError("model document must be a JSON object")
    version = doc.get("version")
    if version != MODEL_VERSION:
        raise ModelFileError(f"unsupported model version {version!r} (expected {MODEL_VERSION})")
    _keys(doc, ("version", "machine", "case_variant", "s1", "s2", "s3", "s4",
                "uncertainty", "calibration"), "model")
    try:
        names = set(doc["s1"])
        if names != set(doc["s2"]) or names != set(doc["s3"]):
            raise ModelFileError("s1/s2/s3 cover different predictors")
        predictors = {}
        for p in sorted(names, key=PREDICTORS.index):
            d1, d2, d3 = doc["s1"][p], doc["s2"][p], doc["s3"][p]
            _keys(d1, ("weights", "feature_names", "ridge"), f"s1.{p}")
            _keys(d2, ("window", "xs", "ys"), f"s2.{p}")
            _keys(d3, ("weights", "tau", "window", "xs", "ys"), f"s3.{p}")
            s1 = LinearSurrogate(_floats(d1["weights"]), tuple(str(v) for v in d1["feature_names"]),
                                 bool(d1["ridge"]))
            s2 = CurveSurrogate(_floats(d2["xs"]), _floats(d2["ys"]), int(d2["window"]))
            w = _floats(d3["weights"])
            if len(w) != 3:
                raise ModelFileError(f"s3.{p}: expected three case weights")
            s3 = EncodeModel(w, float(d3["tau"]),
                             CurveSurrogate(_floats(d3["xs"]), _floats(d3["ys"]),
                                            int(d3["window"]), True))
            predictors[p] = PredictorModel(s1, s2, s3)
        d4 = doc["s4"]
        _keys(d4, ("breakpoints", "segments", "x_range", "floor", "ratio_xs", "ratio_ys"), "s4")
        bps = _floats(d4["breakpoints"])
        if len(d4["segments"]) != len(bps) + 1:
            raise ModelFileError("s4: segment count does not match breakpoints")
        edges = (-math.inf, *bps, math.inf)
        segs = tuple(ThroughputSegment(lo, hi, float(a), float(b))
                     for lo, hi, (a, b) in zip(edges, edges[1:], d4["segments"]))
        xr = _floats(d4["x_range"])
        tp = PiecewiseThroughput(segs, (xr[0], xr[1]), float(d4["floor"]))
        s4 = LosslessModel(tp, _floats(d4["ratio_xs"]), _floats(d4["ratio_ys"]))
        if not isinstance(doc["calibration"], dict):
            raise ModelFileError("calibration metadata must be an object")
        meta = {"machine": doc["machine"], **doc["calibration"]}
        model = TimeModel(predictors, s4, doc["case_variant"], meta)
        unc = UncertaintyModel.from_dict(doc["uncertainty"])
    except ModelFileError:
        raise
    except (ModelError, UncertaintyError, KeyError, TypeError, ValueError, IndexError) as exc:
        raise ModelFileError(f"malformed model document: {exc}") from exc
    return model, unc


def save_model(model: TimeModel, unc: UncertaintyModel, path) -> None:
    text = json.dumps(model_to_dict(model, unc), indent=2, allow_nan=False)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def load_model(path) -> tuple[TimeModel, UncertaintyModel]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ModelFileError(f"cannot read model file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"model file {path} is not valid JSON: {exc}") from exc
    return model_from_dict(doc)
