"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 model error.
Results go to stdout as one key=value line or as CSV; floats are printed
with the shortest decimal that round-trips.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass
from typing import Callable

from .calibration import (
    DEFAULT_EB_GRID,
    EVAL_COLUMNS,
    CalibrationPlan,
    evaluate_field,
    fit_all,
    load_model,
    predict_with_ci,
    run_sweep,
    save_model,
    summarize,
    write_records_csv,
)
from .codec import LOSSLESS_CHOICES, PREDICTORS, Archive, CodecError, CompressionConfig, ConfigError
from .codec import compress, decompress
from .data_io import DTYPES, DataError, DatasetManifest, append_csv_row, format_cell, load_raw
from .data_io import parse_dims, write_csv, write_raw
from .estimator import characterize
from .time_model import ModelError
from .uncertainty import UncertaintyError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3

TIMING_COLUMNS = ("field", "predictor", "eb", "n", "t_pq", "t_freq_book", "t_encode",
                  "t_lossless", "t_total", "bitrate")
SUMMARY_COLUMNS = ("field", "cells", "pq_err", "fb_err", "enc_err", "ll_err", "overall_err",
                   "coverage", "sigma_combined", "reference_overall_err",
                   "reference_sigma_low", "reference_sigma_high")
# published reference figures, echoed for comparison and never asserted on
REFERENCE_OVERALL_ERR = 0.05
REFERENCE_SIGMA = (0.039, 0.048)

SELECTION_BAND = 0.05
SELECTION_RULE = "min_time_within_5pct_of_best_bitrate"
SEARCH_MAX_ITER = 30


class UsageError(Exception):
    pass


# ------------------------------------------------------------ pure helpers


def select_predictor(candidates: dict[str, tuple[float, float]],
                     band: float = SELECTION_BAND) -> str:
    """Pick the fastest predictor among those whose bitrate is within
    ``band`` (relative) of the best one; ties go to the earlier entry of
    PREDICTORS, i.e. lorenzo.

    ``candidates`` maps predictor -> (predicted time, estimated bitrate).
    """
    if not candidates:
        raise ValueError("no candidates")
    best = min(b for _, b in candidates.values())
    ok = [p for p, (_, b) in candidates.items() if b <= best * (1 + band)]
    order = {p: i for i, p in enumerate(PREDICTORS)}
    return min(ok, key=lambda p: (candidates[p][0], order.get(p, len(order))))


@dataclass(frozen=True)
class SearchResult:
    eb: float
    time: float
    iterations: int
    feasible: bool
    converged: bool


class NotMonotoneError(ModelError):
    pass


def check_monotone(time_of: Callable[[float], float], eb_min: float, eb_max: float,
                   slack: float = 0.01) -> tuple[float, float, float]:
    """Three-point probe that predicted time does not grow with eb."""
    mid = math.sqrt(eb_min * eb_max)
    t = (time_of(eb_min), time_of(mid), time_of(eb_max))
    if t[1] > t[0] * (1 + slack) or t[2] > t[1] * (1 + slack):
        raise NotMonotoneError(
            f"predicted time is not non-increasing in eb: t({eb_min!r})={t[0]!r}, "
            f"t({mid!r})={t[1]!r}, t({eb_max!r})={t[2]!r}")
    return t


def search_eb(time_of: Callable[[float], float], target: float, eb_min: float,
              eb_max: float, tol: float = 0.01, max_iter: int = SEARCH_MAX_ITER) -> SearchResult:
    """Smallest eb in [eb_min, eb_max] whose predicted time meets ``target``.

    Bisects on log(eb), keeping hi feasible and lo infeasible, and stops
    once t(hi) is within ``tol`` (relative) of the target.
    """
    if not (0 < eb_min <= eb_max and target > 0 and tol > 0):
        raise ValueError("need 0 < eb_min <= eb_max, target > 0, tol > 0")
    t_lo = time_of(eb_min)
    if t_lo <= target:
        return SearchResult(eb_min, t_lo, 0, True, True)
    t_hi = time_of(eb_max)
    if t_hi > target:
        return SearchResult(eb_max, t_hi, 0, False, False)
    lo, hi = math.log(eb_min), math.log(eb_max)
    it = 0
    while it < max_iter and (target - t_hi) / target > tol:
        it += 1
        mid = 0.5 * (lo + hi)
        t_mid = time_of(math.exp(mid))
        if t_mid <= target:
            hi, t_hi = mid, t_mid
        else:
            lo = mid
    return SearchResult(math.exp(hi), t_hi, it, True, (target - t_hi) / target <= tol)


# ----------------------------------------------------------------- parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be positive, got {text!r}")
    return v


def _dims(text: str) -> tuple[int, ...]:
    try:
        return parse_dims(text)
    except DataError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _eb_grid(text: str) -> tuple[float, ...]:
    grid = tuple(_positive(t) for t in text.split(","))
    if any(b >= a for a, b in zip(grid, grid[1:])):
        raise argparse.ArgumentTypeError("--eb-grid must be strictly decreasing")
    return grid


def _predictors(text: str) -> tuple[str, ...]:
    names = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [p for p in names if p not in PREDICTORS]
    if not names or bad:
        raise argparse.ArgumentTypeError(f"predictors must come from {PREDICTORS}")
    return names


def _repeats(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 3:
        raise argparse.ArgumentTypeError("--repeats must be at least 3")
    return v


def _add_input(p, dims_required=True):
    p.add_argument("--input", required=True, help="raw little-endian binary file")
    p.add_argument("--dims", type=_dims, required=dims_required,
                   help="comma-separated extents, slowest first, e.g. 512,512,512")
    p.add_argument("--dtype", choices=sorted(DTYPES), default="f32le")


def _add_seed(p):
    p.add_argument("--seed", type=int, default=0, help="sampling seed (default 0)")
    p.add_argument("--sample-rate", type=_positive, default=0.04)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctmodel", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("compress", help="compress a raw field and report stage timings")
    _add_input(p)
    p.add_argument("--eb", type=_positive, required=True, help="absolute error bound")
    p.add_argument("--predictor", choices=PREDICTORS, default="lorenzo")
    p.add_argument("--lossless", choices=LOSSLESS_CHOICES, default="lz")
    p.add_argument("--out", required=True, help="archive path")
    p.add_argument("--timing-csv", help="append one timing row to this CSV")

    p = sub.add_parser("decompress", help="restore a raw field from an archive")
    p.add_argument("--input", required=True, help="archive path")
    p.add_argument("--out", required=True, help="raw output path")
    p.add_argument("--dtype", choices=sorted(DTYPES), default="f64le",
                   help="output type; f64le keeps the error bound exact (default)")

    p = sub.add_parser("calibrate", help="time an eb sweep and fit the model file")
    p.add_argument("--manifest", required=True, help="CSV with columns path,dims,dtype,name")
    p.add_argument("--eb-grid", type=_eb_grid, default=DEFAULT_EB_GRID,
                   help="comma-separated, strictly decreasing (default 12 points 1e-1..1e-6)")
    p.add_argument("--predictors", type=_predictors, default=PREDICTORS)
    p.add_argument("--repeats", type=_repeats, default=3, help="runs per cell, at least 3")
    p.add_argument("--lossless", choices=LOSSLESS_CHOICES, default="lz")
    p.add_argument("--model-out", required=True)
    p.add_argument("--records-csv", help="dump one row per calibration cell")
    _add_seed(p)

    p = sub.add_parser("predict", help="predict stage times and a 95%% interval")
    _add_input(p)
    p.add_argument("--eb", type=_positive, required=True)
    p.add_argument("--predictor", choices=PREDICTORS, default="lorenzo")
    p.add_argument("--model", required=True)
    _add_seed(p)

    p = sub.add_parser("evaluate", help="compare predictions with measured runs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--eb-grid", type=_eb_grid, help="default: the calibration grid")
    p.add_argument("--predictors", type=_predictors, default=None,
                   help="default: every predictor in the model")
    p.add_argument("--repeats", type=_repeats, default=3)
    p.add_argument("--out-csv", help="per-field error table; stdout when omitted")
    p.add_argument("--cells-csv", help="per-cell predictions and measurements")
    _add_seed(p)

    p = sub.add_parser(
        "select-predictor",
        help="choose a predictor: lowest predicted time among candidates whose "
             "estimated bitrate is within 5%% of the best; ties go to lorenzo")
    _add_input(p)
    p.add_argument("--eb", type=_positive, required=True)
    p.add_argument("--model", required=True)
    _add_seed(p)

    p = sub.add_parser(
        "search-eb",
        help="smallest eb whose predicted time meets a target (bisection on log eb)")
    _add_input(p)
    p.add_argument("--target-seconds", type=_positive, required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--eb-min", type=_positive, default=1e-6)
    p.add_argument("--eb-max", type=_positive, default=1e-1)
    p.add_argument("--tol", type=_positive, default=0.01, help="relative tolerance on time")
    p.add_argument("--predictor", choices=PREDICTORS, default="lorenzo")
    _add_seed(p)
    return parser


# ---------------------------------------------------------------- commands


def _kv(pairs: dict) -> str:
    return " ".join(f"{k}={format_cell(v)}" for k, v in pairs.items())


def _config(args, predictor=None, eb=None, model=None) -> CompressionConfig:
    lossless = getattr(args, "lossless", None)
    if lossless is None and model is not None:
        lossless = model.metadata.get("lossless", "lz")
    return CompressionConfig(predictor or args.predictor, args.eb if eb is None else eb,
                             lossless=lossless or "lz",
                             sample_rate=getattr(args, "sample_rate", 0.04))


def cmd_compress(args, out) -> int:
    f = load_raw(args.input, args.dims, args.dtype)
    config = _config(args)
    archive, timing, m = compress(f, config)
    data = archive.to_bytes()
    try:
        with open(args.out, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}") from exc
    row = {"field": f.name, "predictor": config.predictor, "eb": config.eb, "n": f.n,
           "t_pq": timing.t_pq, "t_freq_book": timing.t_freq_book,
           "t_encode": timing.t_encode, "t_lossless": timing.t_lossless,
           "t_total": timing.t_total, "bitrate": m.bitrate}
    if args.timing_csv:
        append_csv_row(row, args.timing_csv, TIMING_COLUMNS)
    print(_kv({**row, "archive_bytes": len(data)}), file=out)
    return EXIT_OK


def cmd_decompress(args, out) -> int:
    try:
        with open(args.input, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {args.input}: {exc}") from exc
    f = decompress(Archive.from_bytes(data))
    try:
        write_raw(f, args.out, args.dtype)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}") from exc
    print(_kv({"dims": ",".join(map(str, f.dims)), "n": f.n, "dtype": args.dtype,
               "out": args.out}), file=out)
    return EXIT_OK


def cmd_calibrate(args, out) -> int:
    manifest = DatasetManifest.read(args.manifest)
    if not manifest.entries:
        raise DataError("manifest lists no fields")
    datasets = {e.name: e.load for e in manifest.entries}
    try:
        plan = CalibrationPlan(tuple(datasets), args.eb_grid, args.predictors, args.repeats,
                               args.lossless, args.sample_rate, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    records = run_sweep(plan, datasets)
    if args.records_csv:
        write_records_csv(records, args.records_csv)
    model, unc = fit_all(records, metadata={"sample_rate": plan.sample_rate,
                                            "seed": plan.seed, "repeats": plan.repeats})
    save_model(model, unc, args.model_out)
    c = unc.combined
    print(_kv({"model": args.model_out, "records": len(records),
               "case_variant": model.case_variant, "sigma_algorithm": unc.algo.sigma,
               "sigma_system": unc.sys.sigma, "sigma_combined": c.sigma, "mu_combined": c.mu}),
          file=out)
    return EXIT_OK


def _predict(f, config, model, unc, seed):
    return predict_with_ci(characterize(f, config, seed), model, unc)


def cmd_predict(args, out) -> int:
    model, unc = load_model(args.model)
    f = load_raw(args.input, args.dims, args.dtype)
    rep = _predict(f, _config(args, model=model), model, unc, args.seed)
    print(_kv(rep.as_row()), file=out)
    return EXIT_OK


def cmd_evaluate(args, out) -> int:
    model, unc = load_model(args.model)
    manifest = DatasetManifest.read(args.manifest)
    grid = args.eb_grid or tuple(model.metadata.get("eb_grid", DEFAULT_EB_GRID))
    predictors = args.predictors or tuple(p for p in PREDICTORS if p in model.predictors)
    missing = [p for p in predictors if p not in model.predictors]
    if missing:
        raise ModelError(f"model has no surrogates for {missing}")
    rows = []
    for entry in manifest.entries:
        rows += evaluate_field(entry.load(), grid, predictors, model, unc, args.seed,
                               sample_rate=args.sample_rate, repeats=args.repeats)
    if args.cells_csv:
        write_csv(rows, args.cells_csv, EVAL_COLUMNS)
    table = summarize(rows)
    table.append(summarize([{**r, "field": "all"} for r in rows])[0])
    extra = {"sigma_combined": unc.combined.sigma,
             "reference_overall_err": REFERENCE_OVERALL_ERR,
             "reference_sigma_low": REFERENCE_SIGMA[0],
             "reference_sigma_high": REFERENCE_SIGMA[1]}
    table = [{**row, **extra} for row in table]
    if args.out_csv:
        write_csv(table, args.out_csv, SUMMARY_COLUMNS)
        print(_kv({"out_csv": args.out_csv, "fields": len(manifest.entries),
                   "cells": len(rows), "overall_err": table[-1]["overall_err"],
                   "coverage": table[-1]["coverage"]}), file=out)
    else:
        print(",".join(SUMMARY_COLUMNS), file=out)
        for row in table:
            print(",".join(format_cell(row[c]) for c in SUMMARY_COLUMNS), file=out)
    return EXIT_OK


def cmd_select_predictor(args, out) -> int:
    model, unc = load_model(args.model)
    missing = [p for p in PREDICTORS if p not in model.predictors]
    if missing:
        raise ModelError(f"model has no surrogates for {missing}")
    f = load_raw(args.input, args.dims, args.dtype)
    reports = {p: _predict(f, _config(args, predictor=p, model=model), model, unc, args.seed)
               for p in PREDICTORS}
    chosen = select_predictor({p: (r.t_total, r.est_bitrate) for p, r in reports.items()})
    line = {"selected": chosen, "eb": args.eb, "rule": SELECTION_RULE}
    for p, r in reports.items():
        line.update({f"{p}_time": r.t_total, f"{p}_bitrate": r.est_bitrate,
                     f"{p}_ci_low": r.ci_low, f"{p}_ci_high": r.ci_high})
    print(_kv(line), file=out)
    return EXIT_OK


def cmd_search_eb(args, out) -> int:
    if args.eb_min > args.eb_max:
        raise UsageError("--eb-min must not exceed --eb-max")
    model, unc = load_model(args.model)
    model.for_predictor(args.predictor)
    f = load_raw(args.input, args.dims, args.dtype)
    cache = {}

    def report(eb):
        if eb not in cache:
            cache[eb] = _predict(f, _config(args, eb=eb, model=model), model, unc, args.seed)
        return cache[eb]

    def time_of(eb):
        return report(eb).t_total

    check_monotone(time_of, args.eb_min, args.eb_max)
    res = search_eb(time_of, args.target_seconds, args.eb_min, args.eb_max, args.tol)
    rep = report(res.eb)
    print(_kv({"eb": res.eb, "predicted_time": res.time, "ci_low": rep.ci_low,
               "ci_high": rep.ci_high, "target": args.target_seconds,
               "feasible": res.feasible, "infeasible": not res.feasible,
               "converged": res.converged, "iterations": res.iterations,
               "predictor": args.predictor}), file=out)
    return EXIT_OK


COMMANDS = {
    "compress": cmd_compress,
    "decompress": cmd_decompress,
    "calibrate": cmd_calibrate,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "select-predictor": cmd_select_predictor,
    "search-eb": cmd_search_eb,
}


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=err)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"usage error: {exc}", file=err)
        return EXIT_USAGE
    except (ModelError, UncertaintyError) as exc:
        print(f"model error: {exc}", file=err)
        return EXIT_MODEL
    except (DataError, CodecError, OSError) as exc:
        print(f"data error: {exc}", file=err)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
