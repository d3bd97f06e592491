"""Pharmacokinetic dose encoder.

A dose d administered at time 0 produces the plasma concentration curve

    C(t, d, k) = d / (k * sqrt(2*pi) * t) * exp(-(ln(t) - 1)^2 / (2*k^2))

for t > 0, i.e. d times the log-normal density with mu = 1 and sigma = k.
C(0) is defined as 0 (the density's right-limit), so a dose contributes
nothing at or before its own step. The curve integrates to d over (0, inf):
the full dose reaches circulation, and k alone controls the shape -- larger
k means a shorter, steeper profile.

A window of sparse doses is encoded by superposing one curve per dose,
which is what the stacking matrix expresses in vectorized form. The encoder
also returns the analytic partial of the encoded feature with respect to k,

    dC/dk = C * ((ln(t) - 1)^2 / k^3 - 1/k),

so k can be learned per patient by gradient descent through any model that
consumes the feature.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import PatientRecord, WindowSample

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _check_domain(t, k: float) -> None:
    if k <= 0:
        raise ValueError(f"absorption constant k must be positive, got {k}")
    if np.any(np.asarray(t) < 0):
        raise ValueError("time t must be non-negative")


def _curve(t: np.ndarray, d: float, k: float) -> np.ndarray:
    """C(t, d, k) elementwise over an array of times in minutes."""
    out = np.zeros_like(t, dtype=float)
    pos = t > 0
    tp = t[pos]
    z = np.log(tp) - 1.0
    out[pos] = d / (k * _SQRT_2PI * tp) * np.exp(-z * z / (2.0 * k * k))
    return out


def _curve_grad_k(t: np.ndarray, d: float, k: float) -> np.ndarray:
    """dC/dk elementwise; 0 where t == 0."""
    out = np.zeros_like(t, dtype=float)
    pos = t > 0
    tp = t[pos]
    z = np.log(tp) - 1.0
    c = d / (k * _SQRT_2PI * tp) * np.exp(-z * z / (2.0 * k * k))
    out[pos] = c * (z * z / k**3 - 1.0 / k)
    return out


def concentration_curve(t_minutes: np.ndarray, d: float, k: float) -> np.ndarray:
    """C(t, d, k) over an array of times in minutes."""
    t_minutes = np.asarray(t_minutes, dtype=float)
    _check_domain(t_minutes, k)
    return _curve(t_minutes, d, k)


def concentration_at(t: float, d: float, k: float) -> float:
    """Concentration at ``t`` minutes after a dose ``d``."""
    # routed through the array kernel so scalar and vectorized paths agree
    # bit for bit
    return float(concentration_curve(np.asarray([t], dtype=float), d, k)[0])


def concentration_grad_k(t: float, d: float, k: float) -> float:
    """Partial derivative of concentration_at with respect to k."""
    _check_domain(t, k)
    return float(_curve_grad_k(np.asarray([t], dtype=float), d, k)[0])


def stacking_matrix(L: int) -> np.ndarray:
    """Step-offset matrix w with w[t, j] = max(j - t, 0).

    Row t counts steps elapsed since step t; zeros at and before the dose
    step mean a dose only ever influences later steps.
    """
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    j = np.arange(L)
    return np.maximum(j[None, :] - j[:, None], 0)


@dataclass
class ConcentrationFeature:
    """Encoded dose curve plus its partial with respect to k."""

    values: np.ndarray
    grad_k: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


def superpose(doses: np.ndarray, k: float, f: float, length: int | None = None) -> ConcentrationFeature:
    """Superpose one concentration curve per non-zero dose.

    ``doses[t]`` is administered at step t; output step j accumulates
    C((j - t) * f, doses[t], k) over all t < j, f being the step length in
    minutes. ``length`` extends the output beyond len(doses) when curves
    should run past the dosing window.
    """
    _check_domain(0.0, k)
    doses = np.asarray(doses, dtype=float)
    if f <= 0:
        raise ValueError(f"step minutes f must be positive, got {f}")
    n = len(doses) if length is None else length
    values = np.zeros(n)
    grad = np.zeros(n)
    offsets = np.arange(n, dtype=float) * f
    for t in np.flatnonzero(doses):
        d = doses[t]
        tail = offsets[: n - t]  # elapsed minutes 0, f, 2f, ... from step t
        values[t:] += concentration_curve(tail, d, k)
        grad[t:] += _curve_grad_k(tail, d, k)
    return ConcentrationFeature(values=values, grad_k=grad)


def encode_doses(doses: np.ndarray, k: float, f: float) -> ConcentrationFeature:
    """Encode a window's sparse dose vector as a dense concentration feature.

    Equivalent to summing C(w[t, j] * f, doses[t], k) over rows t of the
    stacking matrix; rows with zero dose contribute exactly zero and are
    skipped.
    """
    return superpose(doses, k, f)


def softplus(u: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, u)


def softplus_inverse(k: np.ndarray) -> np.ndarray:
    k = np.asarray(k, dtype=float)
    if np.any(k <= 0):
        raise ValueError("softplus_inverse requires positive input")
    return np.log(np.expm1(k))


def softplus_grad(u: np.ndarray) -> np.ndarray:
    """d softplus(u) / du, the logistic function."""
    return 1.0 / (1.0 + np.exp(-np.asarray(u, dtype=float)))


@dataclass
class PkParams:
    """Per-patient absorption constants, one (k_bolus, k_basal) pair each.

    Positivity is guaranteed by storing unconstrained values that map
    through softplus; optimizers update u_bolus/u_basal freely.
    """

    patient_ids: list[str]
    u_bolus: np.ndarray
    u_basal: np.ndarray

    def __post_init__(self):
        self.u_bolus = np.asarray(self.u_bolus, dtype=float)
        self.u_basal = np.asarray(self.u_basal, dtype=float)
        n = len(self.patient_ids)
        if len(self.u_bolus) != n or len(self.u_basal) != n:
            raise ValueError("one (u_bolus, u_basal) pair per patient required")
        self._index = {pid: i for i, pid in enumerate(self.patient_ids)}

    @classmethod
    def initialize(cls, patient_ids: list[str], k_bolus: float, k_basal: float) -> "PkParams":
        n = len(patient_ids)
        return cls(
            patient_ids=list(patient_ids),
            u_bolus=np.full(n, float(softplus_inverse(k_bolus))),
            u_basal=np.full(n, float(softplus_inverse(k_basal))),
        )

    @property
    def n_patients(self) -> int:
        return len(self.patient_ids)

    @property
    def k_bolus(self) -> np.ndarray:
        return softplus(self.u_bolus)

    @property
    def k_basal(self) -> np.ndarray:
        return softplus(self.u_basal)

    def index(self, patient_id: str) -> int:
        if patient_id not in self._index:
            raise KeyError(f"unknown patient {patient_id!r}")
        return self._index[patient_id]

    def copy(self) -> "PkParams":
        return PkParams(list(self.patient_ids), self.u_bolus.copy(), self.u_basal.copy())

    def to_json(self, path: str | Path | None = None) -> dict:
        doc = {
            pid: {"k_bolus": float(self.k_bolus[i]), "k_basal": float(self.k_basal[i])}
            for i, pid in enumerate(self.patient_ids)
        }
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, indent=2, sort_keys=True)
                fh.write("\n")
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "PkParams":
        pids = sorted(doc)
        return cls(
            patient_ids=pids,
            u_bolus=softplus_inverse(np.array([doc[p]["k_bolus"] for p in pids])),
            u_basal=softplus_inverse(np.array([doc[p]["k_basal"] for p in pids])),
        )


def encode_record(
    record: PatientRecord, params: PkParams, window: WindowSample
) -> tuple[ConcentrationFeature, ConcentrationFeature]:
    """Encode a window's bolus and basal series with the patient's constants.

    Glucose and CHO pass through untouched elsewhere; only medication
    channels are transformed.
    """
    i = params.index(record.patient_id)
    f = record.grid.step_minutes
    c_bolus = encode_doses(window.bolus_hist, float(params.k_bolus[i]), f)
    c_basal = encode_doses(window.basal_hist, float(params.k_basal[i]), f)
    return c_bolus, c_basal
