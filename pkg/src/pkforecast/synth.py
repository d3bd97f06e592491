"""Desk-scale synthetic glucose data.

A deliberately small discrete-time plant stands in for a physiological
simulator: glucose relaxes toward a per-patient baseline, meals push it up
through a fixed absorption kernel, and insulin pulls it down. Two insulin
mechanisms are available:

* ``minimal_model`` convolves doses with fixed two-compartment kernels;
* ``encoder_oracle`` makes the insulin effect exactly
  insulin_sensitivity * encode_doses(doses, k*, f), so the encoder's
  absorption constant is identifiable from the generated data by
  construction.

Meals are scheduled at jittered breakfast/lunch/dinner times; each meal
triggers a bolus from a standard calculator (carb ratio plus correction
above target). Basal insulin is delivered as one dose at the top of every
hour. A constant endogenous production term is calibrated per patient so
the steady basal drag does not drift the series.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset, DoseSeries, PatientRecord, StaticFeatures, TimeGrid
from .encoder import concentration_curve

GLUCOSE_MIN = 20.0
GLUCOSE_MAX = 600.0

MODES = ("minimal_model", "encoder_oracle")


@dataclass
class SynthPatient:
    patient_id: str
    carb_ratio: float  # grams covered per unit
    correction_factor: float  # mg/dL lowered per unit
    target_glucose: float
    basal_rate: float  # units/hour
    insulin_sensitivity: float  # effect multiplier on the insulin input
    carb_impact: float  # mg/dL rise per absorbed gram
    noise_sd: float
    baseline_glucose: float
    return_rate: float  # per-step pull toward baseline
    production_per_step: float  # endogenous supply offsetting basal drag
    oracle_k_bolus: Optional[float] = None
    oracle_k_basal: Optional[float] = None

    def __post_init__(self):
        for name in ("carb_ratio", "correction_factor", "target_glucose", "basal_rate",
                     "insulin_sensitivity", "baseline_glucose"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class SynthConfig:
    n_patients: int = 5
    days: int = 20
    meals_per_day: int = 3
    seed: int = 0
    mode: str = "minimal_model"
    step_minutes: int = 5
    start_timestamp: int = 0
    oracle_k_bolus: float = 1.3
    oracle_k_basal: float = 1.1
    # test hooks: override the sampled per-patient value for all patients
    insulin_sensitivity: Optional[float] = None
    carb_impact: Optional[float] = None
    noise_sd: Optional[float] = None

    def __post_init__(self):
        if self.days < 1:
            raise ValueError("days must be >= 1")
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _biexponential_kernel(tau_absorb: float, tau_eliminate: float, n_steps: int, f: float) -> np.ndarray:
    """Normalized absorption kernel, zero at lag 0 so effects start next step."""
    t = np.arange(n_steps) * f
    k = np.exp(-t / tau_eliminate) - np.exp(-t / tau_absorb)
    k = np.maximum(k, 0.0)
    return k / k.sum()


def _kernels(f: float) -> dict[str, np.ndarray]:
    return {
        "carb": _biexponential_kernel(15.0, 45.0, int(180 / f), f),
        "bolus": _biexponential_kernel(30.0, 90.0, int(300 / f), f),
        "basal": _biexponential_kernel(50.0, 150.0, int(480 / f), f),
    }


def schedule_meals(config: SynthConfig, patient: SynthPatient, rng: np.random.Generator) -> list[tuple[int, float]]:
    """Jittered meal schedule as (step, grams), strictly increasing in time."""
    f = config.step_minutes
    if config.meals_per_day == 3:
        anchors = np.array([480.0, 780.0, 1140.0])  # 8:00, 13:00, 19:00
    else:
        anchors = np.linspace(420.0, 1200.0, config.meals_per_day)
    gap = anchors[1] - anchors[0] if len(anchors) > 1 else 360.0
    jitter_max = min(45.0, gap / 3.0)
    meals = []
    for day in range(config.days):
        for anchor in anchors:
            minute = day * 1440.0 + anchor + rng.uniform(-jitter_max, jitter_max)
            grams = rng.uniform(30.0, 90.0)
            meals.append((int(minute // f), grams))
    return meals


def bolus_controller(glucose_now: float, grams: float, patient: SynthPatient) -> float:
    """Standard bolus calculator: meal coverage plus correction above target."""
    if grams < 0:
        raise ValueError("grams must be non-negative")
    units = grams / patient.carb_ratio
    units += max(glucose_now - patient.target_glucose, 0.0) / patient.correction_factor
    return max(units, 0.0)


def _unit_effect_total(mode: str, k_oracle: float | None, kernel: np.ndarray, f: float) -> float:
    """Summed per-step effect of a single unit, for calibration."""
    if mode == "encoder_oracle":
        horizon = np.arange(int(3 * 1440 / f)) * f
        return float(concentration_curve(horizon, 1.0, k_oracle).sum())
    return float(kernel.sum())


def _sample_patient(i: int, config: SynthConfig, rng: np.random.Generator, kernels: dict) -> SynthPatient:
    carb_ratio = rng.uniform(8.0, 15.0)
    correction_factor = rng.uniform(30.0, 60.0)
    target = rng.uniform(100.0, 120.0)
    basal_rate = rng.uniform(0.7, 1.3)
    base_sensitivity = rng.uniform(35.0, 55.0)
    noise_sd = rng.uniform(1.5, 3.0)
    baseline = rng.uniform(120.0, 150.0)
    return_rate = rng.uniform(0.01, 0.03)
    carb_jitter = rng.uniform(0.9, 1.1)

    oracle_kb = config.oracle_k_bolus if config.mode == "encoder_oracle" else None
    oracle_ks = config.oracle_k_basal if config.mode == "encoder_oracle" else None
    f = config.step_minutes
    if config.mode == "encoder_oracle":
        # concentration features are per-minute, so the per-step multiplier
        # absorbs the grid step to keep per-unit potency comparable
        sensitivity = base_sensitivity * f
    else:
        sensitivity = base_sensitivity

    if config.insulin_sensitivity is not None:
        sensitivity = config.insulin_sensitivity

    # calibrate so a meal's rise roughly matches its bolus's total drop
    unit_drop = sensitivity * _unit_effect_total(config.mode, oracle_kb, kernels["bolus"], f)
    carb_impact = unit_drop / carb_ratio * carb_jitter
    if config.carb_impact is not None:
        carb_impact = config.carb_impact

    # endogenous production offsets the steady drag of hourly basal doses
    basal_unit = sensitivity * _unit_effect_total(config.mode, oracle_ks, kernels["basal"], f)
    production = basal_unit * basal_rate * f / 60.0

    return SynthPatient(
        patient_id=f"p{i:02d}",
        carb_ratio=carb_ratio,
        correction_factor=correction_factor,
        target_glucose=target,
        basal_rate=basal_rate,
        insulin_sensitivity=sensitivity,
        carb_impact=carb_impact,
        noise_sd=noise_sd if config.noise_sd is None else config.noise_sd,
        baseline_glucose=baseline,
        return_rate=return_rate,
        production_per_step=production,
        oracle_k_bolus=oracle_kb,
        oracle_k_basal=oracle_ks,
    )


def _simulate_patient(
    patient: SynthPatient,
    config: SynthConfig,
    grid: TimeGrid,
    rng: np.random.Generator,
    kernels: dict,
) -> PatientRecord:
    n = grid.n_steps
    f = grid.step_minutes
    glucose = np.empty(n)
    cho = np.zeros(n)
    bolus = np.zeros(n)
    basal = np.zeros(n)
    carb_in = np.zeros(n)
    eff_bolus = np.zeros(n)
    eff_basal = np.zeros(n)

    meals = dict(schedule_meals(config, patient, rng))
    noise = rng.normal(0.0, patient.noise_sd, n) if patient.noise_sd > 0 else np.zeros(n)
    offsets = np.arange(n, dtype=float) * f

    def add_insulin(effect: np.ndarray, t: int, units: float, kind: str) -> None:
        if config.mode == "encoder_oracle":
            k = patient.oracle_k_bolus if kind == "bolus" else patient.oracle_k_basal
            effect[t:] += concentration_curve(offsets[: n - t], units, k)
        else:
            kern = kernels[kind]
            span = min(len(kern), n - t)
            effect[t : t + span] += units * kern[:span]

    glucose[0] = float(np.clip(patient.baseline_glucose + noise[0], GLUCOSE_MIN, GLUCOSE_MAX))
    for t in range(n):
        if grid.minutes_at(t) % 60 == 0:
            basal[t] += patient.basal_rate
            add_insulin(eff_basal, t, patient.basal_rate, "basal")
        if t in meals:
            grams = meals[t]
            cho[t] += grams
            units = bolus_controller(glucose[t], grams, patient)
            if units > 0:
                bolus[t] += units
                add_insulin(eff_bolus, t, units, "bolus")
            kern = kernels["carb"]
            span = min(len(kern), n - t)
            carb_in[t : t + span] += grams * kern[:span]
        if t + 1 < n:
            delta = (
                patient.return_rate * (patient.baseline_glucose - glucose[t])
                + patient.carb_impact * carb_in[t]
                - patient.insulin_sensitivity * (eff_bolus[t] + eff_basal[t])
                + patient.production_per_step
                + noise[t + 1]
            )
            glucose[t + 1] = float(np.clip(glucose[t] + delta, GLUCOSE_MIN, GLUCOSE_MAX))

    one_hot = np.zeros(config.n_patients)
    one_hot[int(patient.patient_id[1:])] = 1.0
    statics = StaticFeatures(
        one_hot_patient=one_hot,
        age_bucket=int(rng.integers(0, 3)),
        weight_kg=float(rng.uniform(50.0, 90.0)),
        pump_type=int(rng.integers(0, 2)),
    )
    return PatientRecord(
        patient_id=patient.patient_id,
        grid=grid,
        glucose=glucose,
        cho=cho,
        doses=DoseSeries(bolus=bolus, basal=basal),
        observed_mask=np.ones(n, dtype=bool),
        statics=statics,
    )


def generate(config: SynthConfig) -> Dataset:
    """Generate a multi-patient dataset. Deterministic for a given config."""
    f = config.step_minutes
    n_steps = config.days * 1440 // f
    grid = TimeGrid(start_timestamp=config.start_timestamp, step_minutes=f, n_steps=n_steps)
    kernels = _kernels(f)
    records = []
    patients = []
    for i in range(config.n_patients):
        rng = np.random.default_rng([config.seed, i])
        patient = _sample_patient(i, config, rng, kernels)
        patients.append(patient)
        records.append(_simulate_patient(patient, config, grid, rng, kernels))
    meta = {
        "synth": {
            "mode": config.mode,
            "seed": config.seed,
            "days": config.days,
            "meals_per_day": config.meals_per_day,
            "step_minutes": f,
            "patients": [p.to_dict() for p in patients],
        }
    }
    if config.mode == "encoder_oracle":
        meta["synth"]["oracle_k_bolus"] = config.oracle_k_bolus
        meta["synth"]["oracle_k_basal"] = config.oracle_k_basal
    return Dataset(grid=grid, records=records, meta=meta)
