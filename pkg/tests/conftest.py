import numpy as np
import pytest

from pkforecast.data import (
    DoseSeries,
    PatientRecord,
    StaticFeatures,
    TimeGrid,
    WindowSample,
)


def make_record(
    n_steps=40,
    seed=0,
    patient_id="p0",
    start=0,
    step=5,
    bolus_rate=0.3,
    basal_rate=0.2,
    one_hot=None,
):
    """Small random record for unit tests."""
    rng = np.random.default_rng(seed)
    grid = TimeGrid(start_timestamp=start, step_minutes=step, n_steps=n_steps)
    bolus = rng.uniform(0.5, 4.0, n_steps) * (rng.random(n_steps) < bolus_rate)
    basal = rng.uniform(0.2, 1.5, n_steps) * (rng.random(n_steps) < basal_rate)
    return PatientRecord(
        patient_id=patient_id,
        grid=grid,
        glucose=rng.uniform(60.0, 250.0, n_steps),
        cho=rng.uniform(0.0, 60.0, n_steps) * (rng.random(n_steps) < 0.1),
        doses=DoseSeries(bolus=bolus, basal=basal),
        observed_mask=np.ones(n_steps, dtype=bool),
        statics=StaticFeatures(one_hot_patient=one_hot if one_hot is not None else np.array([1.0])),
    )


@pytest.fixture
def record():
    return make_record()


@pytest.fixture
def window(record):
    return WindowSample(record, 0, 3, 8, 2)
