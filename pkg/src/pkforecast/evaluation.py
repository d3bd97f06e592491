"""Rolling backtests, error metrics, counterfactuals, and the k-value test.

Metrics pool every horizon point of every rolling forecast. Points whose
ground truth was forward-filled never contribute, and "critical" cells
restrict further to hypo/hyperglycemic truth (<= 70 or >= 180 mg/dL).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .data import PatientRecord, ValidationError, make_windows
from .encoder import PkParams
from .models import FeatureConfig, ForecastModel, featurize

CRITICAL_LOW = 70.0
CRITICAL_HIGH = 180.0


def mae(y: np.ndarray, yhat: np.ndarray) -> float:
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise ValueError("mae requires at least one element")
    return float(np.abs(y - yhat).mean())


def rmse(y: np.ndarray, yhat: np.ndarray) -> float:
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise ValueError("rmse requires at least one element")
    return float(np.sqrt(((y - yhat) ** 2).mean()))


def critical_mask(y: np.ndarray, low: float = CRITICAL_LOW, high: float = CRITICAL_HIGH) -> np.ndarray:
    """True where glucose is at or below ``low`` or at or above ``high``."""
    y = np.asarray(y, dtype=float)
    return (y <= low) | (y >= high)


def rolling_forecast(
    model: ForecastModel,
    feature_config: FeatureConfig,
    pk: PkParams | None,
    record: PatientRecord,
    L: int,
    H: int,
) -> tuple[np.ndarray, np.ndarray]:
    """H-step forecasts from every origin at one-step stride.

    Returns (origins, predictions) where row i forecasts steps
    [origins[i], origins[i] + H) from history ending at origins[i].
    """
    windows = make_windows(record, L, H, stride=1)
    origins = np.array([w.origin for w in windows])
    preds = np.empty((len(windows), H))
    for i, w in enumerate(windows):
        preds[i] = model.predict(featurize(w, feature_config, pk))
    return origins, preds


@dataclass
class _Accumulator:
    sum_abs: float = 0.0
    sum_sq: float = 0.0
    n: int = 0

    def add(self, errors: np.ndarray) -> None:
        self.sum_abs += float(np.abs(errors).sum())
        self.sum_sq += float((errors**2).sum())
        self.n += errors.size

    def cell(self) -> dict | None:
        if self.n == 0:
            return None
        return {
            "mae": self.sum_abs / self.n,
            "rmse": math.sqrt(self.sum_sq / self.n),
            "n": self.n,
        }


def evaluate_record(
    model: ForecastModel,
    feature_config: FeatureConfig,
    pk: PkParams | None,
    record: PatientRecord,
    L: int,
    H: int,
    low: float = CRITICAL_LOW,
    high: float = CRITICAL_HIGH,
) -> dict:
    """Pooled all-values and critical-values metrics for one record."""
    origins, preds = rolling_forecast(model, feature_config, pk, record, L, H)
    acc_all, acc_crit = _Accumulator(), _Accumulator()
    for i, origin in enumerate(origins):
        y = record.glucose[origin : origin + H]
        observed = record.observed_mask[origin : origin + H]
        err = preds[i] - y
        acc_all.add(err[observed])
        crit = critical_mask(y, low, high) & observed
        if crit.any():
            acc_crit.add(err[crit])
    return {
        "all": acc_all.cell(),
        "critical": acc_crit.cell(),
        "n_windows": len(origins),
        "_sums": {
            "all": (acc_all.sum_abs, acc_all.sum_sq, acc_all.n),
            "critical": (acc_crit.sum_abs, acc_crit.sum_sq, acc_crit.n),
        },
    }


def _combine_patient_cells(cells_by_pid: dict[str, dict]) -> dict:
    per_patient = {}
    agg_all, agg_crit = _Accumulator(), _Accumulator()
    for pid, cells in cells_by_pid.items():
        sums = cells.pop("_sums")
        per_patient[pid] = cells
        agg_all.sum_abs += sums["all"][0]
        agg_all.sum_sq += sums["all"][1]
        agg_all.n += sums["all"][2]
        agg_crit.sum_abs += sums["critical"][0]
        agg_crit.sum_sq += sums["critical"][1]
        agg_crit.n += sums["critical"][2]
    return {
        "per_patient": per_patient,
        "aggregate": {"all": agg_all.cell(), "critical": agg_crit.cell()},
    }


def evaluate_model(
    model: ForecastModel,
    feature_config: FeatureConfig,
    pk: PkParams | None,
    records: list[PatientRecord],
    L: int,
    H: int,
) -> dict:
    """Per-patient cells plus the pooled aggregate over all horizon points."""
    return _combine_patient_cells(
        {r.patient_id: evaluate_record(model, feature_config, pk, r, L, H) for r in records}
    )


def evaluate_local_models(
    fitted: dict[str, tuple[ForecastModel, PkParams | None]],
    feature_config: FeatureConfig,
    records: list[PatientRecord],
    L: int,
    H: int,
) -> dict:
    """Like evaluate_model, but each patient is scored by their own model."""
    cells = {}
    for record in records:
        model, pk = fitted[record.patient_id]
        cells[record.patient_id] = evaluate_record(model, feature_config, pk, record, L, H)
    return _combine_patient_cells(cells)


# ---------------------------------------------------------------------------
# Counterfactual dose experiments
# ---------------------------------------------------------------------------

DOSE_TRANSFORMS = ("original", "zeroed_bolus", "scaled_bolus")


@dataclass
class CounterfactualSpec:
    dose_transform: str = "original"
    scale_factor: float = 10.0

    def __post_init__(self):
        if self.dose_transform not in DOSE_TRANSFORMS:
            raise ValueError(f"unknown dose_transform {self.dose_transform!r}")
        if self.scale_factor <= 0:
            raise ValueError("scale_factor must be positive")


def apply_dose_transform(record: PatientRecord, spec: CounterfactualSpec) -> PatientRecord:
    """Copy of ``record`` with the bolus series transformed; basal untouched."""
    out = record.copy()
    if spec.dose_transform == "zeroed_bolus":
        out.doses.bolus[:] = 0.0
    elif spec.dose_transform == "scaled_bolus":
        out.doses.bolus[:] *= spec.scale_factor
    return out


def counterfactual_forecasts(
    model: ForecastModel,
    feature_config: FeatureConfig,
    pk: PkParams | None,
    record: PatientRecord,
    spec: CounterfactualSpec,
    L: int,
    H: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Final-horizon-point forecasts after transforming the bolus series.

    Only the pharmacokinetic feature mode responds to dose changes in the
    intended way, so other modes are rejected.
    """
    if feature_config.mode != "pharmacokinetic":
        raise ValueError("counterfactual analysis requires pharmacokinetic features")
    transformed = apply_dose_transform(record, spec)
    origins, preds = rolling_forecast(model, feature_config, pk, transformed, L, H)
    return origins, preds[:, -1]


def counterfactual_table(
    model: ForecastModel,
    feature_config: FeatureConfig,
    pk: PkParams | None,
    record: PatientRecord,
    L: int,
    H: int,
    scale_factor: float = 10.0,
) -> dict:
    """Original / zeroed / scaled final-horizon forecasts per origin."""
    origins, original = counterfactual_forecasts(
        model, feature_config, pk, record, CounterfactualSpec("original"), L, H
    )
    _, zeroed = counterfactual_forecasts(
        model, feature_config, pk, record, CounterfactualSpec("zeroed_bolus"), L, H
    )
    _, scaled = counterfactual_forecasts(
        model, feature_config, pk, record, CounterfactualSpec("scaled_bolus", scale_factor), L, H
    )
    return {
        "origins": origins,
        "original": original,
        "zeroed": zeroed,
        "scaled": scaled,
        "means": {
            "original": float(original.mean()),
            "zeroed": float(zeroed.mean()),
            "scaled": float(scaled.mean()),
        },
    }


# ---------------------------------------------------------------------------
# Paired one-sided t-test (alternative: a > b)
# ---------------------------------------------------------------------------


def _student_t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t via the regularized incomplete beta."""
    x = df / (df + t * t)
    half = 0.5 * float(special.betainc(0.5 * df, 0.5, x))
    return half if t >= 0 else 1.0 - half


def paired_t_test_one_sided(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Paired t statistic and one-sided p-value for the alternative a > b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test requires at least 2 pairs")
    d = a - b
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise ValueError("differences have zero variance; t statistic undefined")
    t = float(d.mean()) / (sd / math.sqrt(n))
    return t, _student_t_sf(t, n - 1)


# ---------------------------------------------------------------------------
# Global-vs-local comparison and trial-level reports
# ---------------------------------------------------------------------------


def compare_global_local(global_mae: dict[str, list[float]], local_mae: dict[str, list[float]]) -> dict:
    """Per-patient trial-mean MAE for both modes plus improvement columns.

    Inputs map patient id to that patient's per-trial MAE values.
    """
    if set(global_mae) != set(local_mae):
        raise ValueError("global and local results cover different patients")
    rows = []
    for pid in sorted(global_mae):
        g, l = global_mae[pid], local_mae[pid]
        if len(g) != len(l):
            raise ValueError(f"trial count mismatch for patient {pid!r}")
        g_mean, l_mean = float(np.mean(g)), float(np.mean(l))
        rows.append(
            {
                "patient": pid,
                "global_mean_mae": g_mean,
                "local_mean_mae": l_mean,
                "delta": l_mean - g_mean,
                "pct_improvement": (l_mean - g_mean) / l_mean * 100.0 if l_mean else 0.0,
            }
        )
    g_all = float(np.mean([r["global_mean_mae"] for r in rows]))
    l_all = float(np.mean([r["local_mean_mae"] for r in rows]))
    return {
        "per_patient": rows,
        "aggregate": {
            "global_mean_mae": g_all,
            "local_mean_mae": l_all,
            "delta": l_all - g_all,
            "pct_improvement": (l_all - g_all) / l_all * 100.0 if l_all else 0.0,
        },
    }


@dataclass
class EvalReport:
    """Trial mean/sd of every metric cell, per patient and aggregate."""

    label: str
    n_trials: int
    per_patient: dict
    aggregate: dict

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "n_trials": self.n_trials,
            "per_patient": self.per_patient,
            "aggregate": self.aggregate,
        }

    def to_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv_rows(self) -> list[tuple]:
        """Flat rows: (patient, mode, metric, subset, trial_mean, trial_sd)."""
        rows = []
        scopes = [("__aggregate__", self.aggregate)]
        scopes += sorted(self.per_patient.items())
        for patient, cells in scopes:
            for subset in ("all", "critical"):
                cell = cells.get(subset)
                if cell is None:
                    continue
                for metric in ("mae", "rmse"):
                    rows.append(
                        (patient, self.label, metric, subset, cell[metric]["mean"], cell[metric]["sd"])
                    )
        return rows


def summarize_trials(per_trial_evals: list[dict], label: str) -> EvalReport:
    """Collapse evaluate_model outputs from repeated trials into mean/sd cells.

    A critical cell is reported only when every trial produced one.
    """
    if not per_trial_evals:
        raise ValueError("no trial evaluations to summarize")
    n_trials = len(per_trial_evals)

    def collapse(cells_per_trial: list[dict | None]) -> dict | None:
        if any(c is None for c in cells_per_trial):
            return None
        out = {}
        for metric in ("mae", "rmse"):
            vals = np.array([c[metric] for c in cells_per_trial])
            sd = float(vals.std(ddof=1)) if n_trials > 1 else 0.0
            out[metric] = {"mean": float(vals.mean()), "sd": sd}
        out["n"] = int(np.mean([c["n"] for c in cells_per_trial]))
        return out

    pids = sorted(per_trial_evals[0]["per_patient"])
    per_patient = {}
    for pid in pids:
        per_patient[pid] = {
            subset: collapse([ev["per_patient"][pid][subset] for ev in per_trial_evals])
            for subset in ("all", "critical")
        }
        per_patient[pid]["n_windows"] = per_trial_evals[0]["per_patient"][pid]["n_windows"]
    aggregate = {
        subset: collapse([ev["aggregate"][subset] for ev in per_trial_evals])
        for subset in ("all", "critical")
    }
    return EvalReport(label=label, n_trials=n_trials, per_patient=per_patient, aggregate=aggregate)
