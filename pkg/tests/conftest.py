import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

from hypothesis import HealthCheck, settings

settings.register_profile("ci", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

import pytest

from ctmodel.calibration import CalibrationPlan, fit_all, run_sweep
from ctmodel.data_io import synth_field


@pytest.fixture(scope="session")
def small_calibration():
    """A quick two-field calibration at 48^3; timings are real but tiny."""
    fields = {"s1": synth_field("smooth", (48, 48, 48), 1, "s1"),
              "b2": synth_field("banded", (48, 48, 48), 2, "b2")}
    plan = CalibrationPlan(tuple(fields))
    records = run_sweep(plan, fields)
    model, unc = fit_all(records)
    return records, model, unc


DESK_SIZE = (128, 128, 128)
HELD_OUT = (("smooth", 11), ("smooth", 12), ("banded", 13), ("banded", 14), ("smooth", 15))


@pytest.fixture(scope="session")
def desk_calibration():
    """Calibrate on two 128^3 fields, then evaluate on five held-out ones.

    Returns a dict with the plan, training fields, records, fitted model
    and uncertainty, and the evaluation rows over the full eb grid.
    """
    from ctmodel.calibration import evaluate_field

    train = {"smooth1": synth_field("smooth", DESK_SIZE, 1, "smooth1"),
             "banded2": synth_field("banded", DESK_SIZE, 2, "banded2")}
    plan = CalibrationPlan(tuple(train))
    records = run_sweep(plan, train)
    model, unc = fit_all(records)
    rows = []
    for kind, seed in HELD_OUT:
        f = synth_field(kind, DESK_SIZE, seed, f"{kind}{seed}")
        rows += evaluate_field(f, plan.eb_grid, plan.predictors, model, unc)
    return {"plan": plan, "train": train, "records": records, "model": model,
            "unc": unc, "rows": rows}
