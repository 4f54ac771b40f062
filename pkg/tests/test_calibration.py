import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctmodel import calibration
from ctmodel.calibration import (
    EVAL_COLUMNS,
    MODEL_VERSION,
    RECORD_COLUMNS,
    CalibrationPlan,
    ModelFileError,
    algorithm_residuals,
    case_variant_mad,
    evaluate_field,
    fit_all,
    fit_time_model,
    load_model,
    median_timing,
    model_from_dict,
    model_to_dict,
    run_sweep,
    save_model,
    summarize,
    timed_rounds,
    write_records_csv,
)
from ctmodel.codec import CompressionConfig, StageTiming
from ctmodel.data_io import DataError, read_csv, synth_field
from ctmodel.estimator import CASE_VARIANTS
from ctmodel.time_model import ModelError, features_stage1, predict_stages, predict_total

GRID4 = (1e-1, 1e-2, 1e-3, 1e-4)


def tiny_fields(size=8):
    return {"a": synth_field("smooth", (size,) * 3, 1, "a"),
            "b": synth_field("banded", (size,) * 3, 2, "b")}


@pytest.fixture
def counted_compress(monkeypatch):
    calls = []
    real = calibration.compress

    def wrapper(f, config):
        calls.append((f.name, config.predictor, config.eb))
        return real(f, config)

    monkeypatch.setattr(calibration, "compress", wrapper)
    return calls


# ------------------------------------------------------------------- plan

def test_plan_validation():
    with pytest.raises(ValueError):
        CalibrationPlan(("a",), repeats=2)
    with pytest.raises(ValueError):
        CalibrationPlan(("a",), eb_grid=(1e-3, 1e-2))
    with pytest.raises(ValueError):
        CalibrationPlan(("a",), eb_grid=(1e-2, 1e-2))
    with pytest.raises(ValueError):
        CalibrationPlan(("a", "a"))
    with pytest.raises(ValueError):
        CalibrationPlan(("a",), predictors=("wavelet",))
    with pytest.raises(ValueError):
        CalibrationPlan(())
    assert CalibrationPlan(("a", "b")).cells == 2 * 12 * 2


def test_sweep_cell_and_call_counts(counted_compress):
    plan = CalibrationPlan(("a", "b"), predictors=("lorenzo",), repeats=3)
    records = run_sweep(plan, tiny_fields())
    assert len(records) == 24
    assert len(counted_compress) == 72


def test_single_eb_gives_one_record(counted_compress):
    plan = CalibrationPlan(("a",), eb_grid=(1e-2,), predictors=("lorenzo",))
    records = run_sweep(plan, tiny_fields())
    assert len(records) == 1
    assert records[0].config.eb == 1e-2
    assert len(records[0].repeat_totals) == 3


def test_repeats_are_interleaved(counted_compress):
    plan = CalibrationPlan(("a",), eb_grid=(1e-1, 1e-3), predictors=("lorenzo",))
    run_sweep(plan, tiny_fields())
    ebs = [c[2] for c in counted_compress]
    assert ebs == [1e-1, 1e-3] * 3


def test_record_order_is_deterministic():
    plan = CalibrationPlan(("b", "a"), eb_grid=GRID4)
    records = run_sweep(plan, tiny_fields())
    keys = [(r.field, r.config.predictor, r.config.eb) for r in records]
    assert keys == [(f, p, e) for f in ("b", "a") for p in plan.predictors for e in GRID4]


def test_loader_failure_aborts():
    def broken():
        raise DataError("disk gone")

    plan = CalibrationPlan(("a", "b"), eb_grid=GRID4)
    with pytest.raises(DataError):
        run_sweep(plan, {"a": tiny_fields()["a"], "b": broken})
    with pytest.raises(KeyError):
        run_sweep(plan, {"a": tiny_fields()["a"]})


def test_loaders_are_called():
    plan = CalibrationPlan(("a",), eb_grid=(1e-2,), predictors=("lorenzo",))
    records = run_sweep(plan, {"a": lambda: synth_field("smooth", (8, 8, 8), 1, "a")})
    assert records[0].n == 512


def test_timed_rounds_keeps_last_metrics():
    f = synth_field("smooth", (8, 8, 8), 1)
    out = timed_rounds([(f, CompressionConfig("lorenzo", 1e-2))], 4)
    timings, metrics = out[0]
    assert len(timings) == 4 and metrics.n == 512


# ----------------------------------------------------------------- medians

timing_values = st.floats(0.0, 10.0, allow_nan=False)


@given(st.lists(st.tuples(timing_values, timing_values, timing_values, timing_values),
                min_size=1, max_size=9))
def test_median_timing_is_bounded_per_stage(rows):
    timings = [StageTiming(*r, sum(r)) for r in rows]
    med = median_timing(timings)
    cols = np.array(rows)
    for k, name in enumerate(StageTiming.STAGES):
        v = getattr(med, name)
        assert cols[:, k].min() <= v <= cols[:, k].max()
        assert v == pytest.approx(float(np.median(cols[:, k])))


def test_record_medians_within_repeats(small_calibration):
    records, _, _ = small_calibration
    for r in records:
        assert min(r.repeat_totals) <= r.timing.t_total <= max(r.repeat_totals)


# ------------------------------------------------------------------ fitting

def oracle_records(c=3e-9):
    """Real records of two sizes with t_pq replaced by c * N exactly."""
    out = []
    for size in (8, 12):
        fields = {f"s{size}": synth_field("smooth", (size,) * 3, size, f"s{size}")}
        plan = CalibrationPlan(tuple(fields), eb_grid=GRID4)
        for r in run_sweep(plan, fields):
            t = dataclasses.replace(r.timing, t_pq=c * r.n)
            out.append(dataclasses.replace(r, timing=t))
    return out


def test_stage1_recovers_linear_oracle():
    c = 3e-9
    records = oracle_records(c)
    model = fit_time_model(records)
    for p, pm in model.predictors.items():
        assert pm.s1.weights[0] == pytest.approx(c, rel=1e-6)
        for r in records:
            if r.config.predictor == p:
                pred = pm.s1.predict(features_stage1(r.bundle, r.n))
                assert abs(pred - r.timing.t_pq) / r.timing.t_pq <= 1e-6


def test_stage1_weights_are_nonnegative(small_calibration):
    _, model, _ = small_calibration
    for pm in model.predictors.values():
        assert min(pm.s1.weights) >= 0


def test_fit_needs_four_error_bounds():
    plan = CalibrationPlan(tuple(tiny_fields()), eb_grid=(1e-1, 1e-2, 1e-3))
    records = run_sweep(plan, tiny_fields())
    with pytest.raises(ModelError, match="4 distinct"):
        fit_all(records)


def test_fit_needs_eight_records():
    plan = CalibrationPlan(("a",), eb_grid=GRID4, predictors=("lorenzo",))
    records = run_sweep(plan, tiny_fields())
    with pytest.raises(ModelError, match="8"):
        fit_all(records)


def test_no_negative_predictions_on_training_records(small_calibration):
    records, model, _ = small_calibration
    for r in records:
        stages = predict_stages(r.bundle, r.n, model)
        assert min(stages) >= 0
        assert predict_total(r.bundle, model=model).t_total > 0


def test_case_variant_is_the_closer_one(small_calibration):
    records, model, _ = small_calibration
    mads = {v: case_variant_mad(records, v) for v in CASE_VARIANTS}
    assert mads[model.case_variant] == min(mads.values())
    assert model.metadata["case_variant_mad"] == pytest.approx(mads)


def test_stage3_threshold_is_median_bitrate(small_calibration):
    records, model, _ = small_calibration
    for p, pm in model.predictors.items():
        x = [r.bundle.est_bitrate_huffman for r in records if r.config.predictor == p]
        assert pm.s3.tau == pytest.approx(float(np.median(x)))


def test_metadata_describes_the_calibration(small_calibration):
    records, model, _ = small_calibration
    meta = model.metadata
    assert meta["fields"] == ["b2", "s1"]
    assert meta["eb_grid"] == sorted({r.config.eb for r in records}, reverse=True)
    assert meta["machine"] and meta["timestamp"]


def test_algorithm_residual_holdouts(small_calibration):
    records, _, _ = small_calibration
    assert len(algorithm_residuals(records, holdout="eb")) == len(records)
    assert len(algorithm_residuals(records, holdout="field")) == len(records)
    with pytest.raises(ValueError):
        algorithm_residuals(records, holdout="predictor")


def test_eb_holdout_falls_back_when_grid_is_minimal():
    plan = CalibrationPlan(tuple(tiny_fields()), eb_grid=GRID4)
    records = run_sweep(plan, tiny_fields())
    by_eb = algorithm_residuals(records, holdout="eb")
    by_field = algorithm_residuals(records, holdout="field")
    assert by_eb == by_field


def test_system_uncertainty_from_repeats(small_calibration):
    records, _, unc = small_calibration
    assert unc.sys.n == sum(len(r.repeat_totals) for r in records)
    assert unc.sys.mu == pytest.approx(0, abs=1e-12)
    assert unc.algo.n == len(records)


# -------------------------------------------------------- reproducibility

def test_sweep_is_reproducible_apart_from_timings():
    plan = CalibrationPlan(tuple(tiny_fields()), eb_grid=GRID4)
    first = run_sweep(plan, tiny_fields())
    second = run_sweep(plan, tiny_fields())
    timing_keys = {"t_pq", "t_fb", "t_enc", "t_ll"}
    for a, b in zip(first, second):
        ra, rb = a.as_row(), b.as_row()
        assert {k: v for k, v in ra.items() if k not in timing_keys} == \
            {k: v for k, v in rb.items() if k not in timing_keys}
        assert a.bundle.est_histogram == b.bundle.est_histogram
        assert a.metrics.case_counts == b.metrics.case_counts


# ----------------------------------------------------------------- model file

def test_model_round_trip(small_calibration, tmp_path):
    _, model, unc = small_calibration
    path = tmp_path / "model.json"
    save_model(model, unc, path)
    model2, unc2 = load_model(path)
    assert model2 == model
    assert unc2 == unc
    save_model(model2, unc2, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_text() == path.read_text()


def test_model_file_rejects_other_versions(small_calibration, tmp_path):
    _, model, unc = small_calibration
    doc = model_to_dict(model, unc)
    doc["version"] = MODEL_VERSION + 1
    path = tmp_path / "v2.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ModelFileError, match="version"):
        load_model(path)


def test_model_file_rejects_truncation(small_calibration, tmp_path):
    _, model, unc = small_calibration
    path = tmp_path / "model.json"
    save_model(model, unc, path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(ModelFileError):
        load_model(path)
    with pytest.raises(ModelFileError):
        load_model(tmp_path / "missing.json")


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(extra=1),
    lambda d: d.pop("s4"),
    lambda d: d["s4"].pop("floor"),
    lambda d: d["uncertainty"].update(sigma_x=0.1),
    lambda d: d["s3"]["lorenzo"].update(weights=[1.0, 2.0]),
    lambda d: d["s1"].pop("interpolation"),
    lambda d: d.update(case_variant="guess"),
    lambda d: d["s4"].update(segments=[]),
    lambda d: d.update(calibration=[]),
])
def test_model_file_rejects_malformed(small_calibration, mutate):
    _, model, unc = small_calibration
    doc = json.loads(json.dumps(model_to_dict(model, unc)))
    mutate(doc)
    with pytest.raises(ModelFileError):
        model_from_dict(doc)


# ----------------------------------------------------------------- outputs

def test_records_csv(small_calibration, tmp_path):
    records, _, _ = small_calibration
    path = tmp_path / "records.csv"
    write_records_csv(records, path)
    rows = read_csv(path)
    assert len(rows) == len(records)
    assert tuple(rows[0]) == RECORD_COLUMNS
    assert float(rows[0]["eb"]) == records[0].config.eb


def test_evaluate_rows_and_coverage(small_calibration):
    _, model, unc = small_calibration
    f = synth_field("smooth", (32, 32, 32), 7, "held")
    rows = evaluate_field(f, (1e-1, 1e-3), ("lorenzo",), model, unc, repeats=2)
    assert len(rows) == 2
    for row in rows:
        assert set(row) == set(EVAL_COLUMNS)
        assert 0 <= row["runs_in_ci"] <= row["runs"] == 2
        assert row["ci_low"] <= row["p_total"] <= row["ci_high"]
        parts = row["p_pq"] + row["p_fb"] + row["p_enc"] + row["p_ll"]
        assert row["p_total"] == pytest.approx(parts)
    [summary] = summarize(rows)
    assert summary["cells"] == 2
    assert 0.0 <= summary["coverage"] <= 1.0
    with pytest.raises(ValueError):
        evaluate_field(f, (1e-1,), ("lorenzo",), model, unc, repeats=0)


# ------------------------------------------------------- desk calibration

def test_desk_leave_one_field_out_error(desk_calibration):
    res = algorithm_residuals(desk_calibration["records"], holdout="field")
    mean_abs = float(np.mean(np.abs(res)))
    print(f"leave-one-field-out mean |relative error| {mean_abs:.3f}")
    assert mean_abs <= 0.15


def _stage1_fit(desk, field, predictor):
    model = desk["model"]
    recs = [r for r in desk["records"] if r.field == field and r.config.predictor == predictor]
    s1 = model.predictors[predictor].s1
    y = np.array([r.timing.t_pq for r in recs])
    yhat = np.array([s1.predict(features_stage1(r.bundle, r.n)) for r in recs])
    return y, yhat


@pytest.mark.xfail(strict=False, reason="t_pq is nearly flat in eb on a smooth field with "
                   "this quantizer, so R^2 measures run-to-run noise; see the ledger")
def test_desk_stage1_r2_on_smooth_sweep(desk_calibration):
    for p in desk_calibration["plan"].predictors:
        y, yhat = _stage1_fit(desk_calibration, "smooth1", p)
        r2 = 1 - np.sum((y - yhat) ** 2) / np.sum((y - y.mean()) ** 2)
        print(f"stage-1 R^2 on the smooth calibration field, {p}: {r2:.3f} "
              f"(t_pq spread {y.std() / y.mean():.3f} of its mean)")
        assert r2 >= 0.95


def test_desk_stage1_relative_fit_error(desk_calibration):
    for field in desk_calibration["train"]:
        for p in desk_calibration["plan"].predictors:
            y, yhat = _stage1_fit(desk_calibration, field, p)
            rel = np.abs((yhat - y) / y)
            rms = float(np.sqrt(np.mean(rel ** 2)))
            print(f"stage-1 relative error, {field} {p}: median {np.median(rel):.3f}, "
                  f"rms {rms:.3f}")
            # median: one cell caught by a burst of host load must not decide it
            assert np.median(rel) <= 0.10


def test_desk_calibration_fields_fit_no_worse_than_twice_held_out(desk_calibration):
    d = desk_calibration
    rows = []
    for f in d["train"].values():
        rows += evaluate_field(f, d["plan"].eb_grid, d["plan"].predictors, d["model"], d["unc"])
    own = float(np.mean([abs(r["overall_err"]) for r in rows]))
    held = float(np.mean([abs(r["overall_err"]) for r in d["rows"]]))
    print(f"mean |error| on calibration fields {own:.3f}, held-out {held:.3f}")
    assert own <= 2 * held
