"""Huber/Adam training with global and local modes.

Global training shares one network across all patients while keeping the
absorption constants per patient: each k entry only ever receives gradient
from its own patient's windows. Local training fits an independent network
per patient. Both track validation loss on a chronological tail slice of
the training data (forward-filled points excluded) and return the
parameters that minimized it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset, PatientRecord, make_windows, split_train_test
from .encoder import PkParams, softplus_grad
from .models import (
    FeatureConfig,
    ForecastModel,
    build_model,
    compute_normalization,
    featurize,
)

C_BOLUS_CHANNEL = 2
C_BASAL_CHANNEL = 3


class TrainingError(RuntimeError):
    """Raised when optimization cannot proceed (bad gradients, no data)."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4
    dropout: float = 0.0
    training_steps: int = 1000
    seed: int = 1
    huber_delta: float = 1.0
    k_init_range: tuple[float, float] = (1.0, 2.0)
    mode: str = "global"
    architecture: str = "nhits"
    L: int = 120
    H: int = 6
    hidden: tuple[int, ...] = (64, 64)
    val_fraction: float = 0.1
    val_every: int = 100
    max_val_windows: int = 256
    clip_norm: float | None = 10.0
    test_steps: int = 2691

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.training_steps <= 0:
            raise ValueError("learning_rate, batch_size, training_steps must be positive")
        if not 0.0 <= self.dropout <= 0.5:
            raise ValueError(f"dropout must be in [0, 0.5], got {self.dropout}")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")
        if self.mode not in ("global", "local"):
            raise ValueError(f"mode must be global or local, got {self.mode!r}")
        self.k_init_range = tuple(self.k_init_range)
        self.hidden = tuple(self.hidden)

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "dropout": self.dropout,
            "training_steps": self.training_steps,
            "seed": self.seed,
            "huber_delta": self.huber_delta,
            "k_init_range": list(self.k_init_range),
            "mode": self.mode,
            "architecture": self.architecture,
            "L": self.L,
            "H": self.H,
            "hidden": list(self.hidden),
            "val_fraction": self.val_fraction,
            "val_every": self.val_every,
            "max_val_windows": self.max_val_windows,
            "clip_norm": self.clip_norm,
            "test_steps": self.test_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def huber_loss(y: np.ndarray, yhat: np.ndarray, delta: float) -> float:
    """Mean piecewise loss: quadratic within delta of zero, linear beyond."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise ValueError("huber_loss requires at least one element")
    if delta <= 0:
        raise ValueError("delta must be positive")
    r = np.abs(yhat - y)
    vals = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    return float(vals.mean())


def _huber_value_grad(y: np.ndarray, yhat: np.ndarray, delta: float) -> tuple[float, np.ndarray]:
    r = yhat - y
    a = np.abs(r)
    vals = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    grad = np.clip(r, -delta, delta) / r.size
    return float(vals.mean()), grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), t=0)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Returns (new params, new state)."""
    if params.shape != grads.shape:
        raise ValueError("params and grads must have matching shapes")
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise TrainingError(
            f"non-finite gradient at index {bad} "
            f"({int((~np.isfinite(grads)).sum())} of {grads.size} entries)"
        )
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m=m, v=v, t=t)


@dataclass
class TrainResult:
    model: ForecastModel
    pk: PkParams | None
    history: list[dict]
    best_val_loss: float
    config: TrainConfig
    feature_config: FeatureConfig


def _carve_validation(
    records: list[PatientRecord], config: TrainConfig
) -> tuple[list[PatientRecord], list[PatientRecord]]:
    fit, val = [], []
    min_len = config.L + config.H
    for r in records:
        val_steps = int(round(r.n_steps * config.val_fraction))
        if val_steps >= min_len and r.n_steps - val_steps >= min_len:
            a, b = split_train_test(r, val_steps)
            fit.append(a)
            val.append(b)
        else:
            fit.append(r)
    return fit, val


def _windows_of(records: list[PatientRecord], patient_index_of: dict[str, int], L, H):
    windows = []
    for r in records:
        windows.extend(make_windows(r, L, H, stride=1, patient_index=patient_index_of[r.patient_id]))
    return windows


def _validation_loss(model, feature_config, pk, val_windows, delta) -> float:
    """Huber loss over observed horizon points only; NaN when none exist."""
    residual_sum = 0.0
    count = 0
    for w in val_windows:
        mask = w.mask_future
        if not mask.any():
            continue
        ft = featurize(w, feature_config, pk)
        yhat = model.forward(ft, train=False)
        y = model.norm.normalize_target(w.glucose_future)
        r = np.abs(yhat[mask] - y[mask])
        vals = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
        residual_sum += vals.sum()
        count += int(mask.sum())
    return residual_sum / count if count else float("nan")


def train_global(dataset: Dataset, config: TrainConfig, feature_config: FeatureConfig) -> TrainResult:
    """Train one parameter set across all patients.

    Per-patient absorption constants ride along in the optimizer vector;
    a patient whose windows carry no dose gradient leaves its entries at
    initialization. Returns the parameters that minimized validation Huber
    loss over the horizon.
    """
    if not dataset.records:
        raise TrainingError("dataset has no patients")
    rng = np.random.default_rng(config.seed)
    L, H = config.L, config.H
    pids = dataset.patient_ids()
    index_of = {pid: i for i, pid in enumerate(pids)}

    fit_records, val_records = _carve_validation(dataset.records, config)
    fit_windows = _windows_of(fit_records, index_of, L, H)
    if not fit_windows:
        raise TrainingError("no valid training windows (records shorter than L + H?)")
    val_windows = _windows_of(val_records, index_of, L, H)
    if len(val_windows) > config.max_val_windows:
        take = np.unique(
            np.linspace(0, len(val_windows) - 1, config.max_val_windows).astype(int)
        )
        val_windows = [val_windows[i] for i in take]

    pk = None
    if feature_config.mode == "pharmacokinetic":
        lo, hi = config.k_init_range
        k0_bolus = float(rng.uniform(lo, hi))
        k0_basal = float(rng.uniform(lo, hi))
        pk = PkParams.initialize(pids, k0_bolus, k0_basal)

    norm = compute_normalization(fit_windows, feature_config, pk)
    statics_dim = len(dataset.records[0].statics.vector()) if feature_config.include_statics else 0
    model = build_model(
        config.architecture,
        L,
        H,
        feature_config.n_channels,
        statics_dim,
        norm,
        rng,
        hidden=config.hidden,
        dropout=config.dropout,
    )

    n_theta = model.n_params
    n_pat = pk.n_patients if pk is not None else 0
    joint = model.param_vector()
    if pk is not None:
        joint = np.concatenate([joint, pk.u_bolus, pk.u_basal])
    state = AdamState.zeros(joint.size)

    best_val = float("inf")
    best_joint = joint.copy()
    history: list[dict] = []

    for step in range(1, config.training_steps + 1):
        batch = rng.integers(0, len(fit_windows), size=config.batch_size)
        g_joint = np.zeros_like(joint)
        train_loss = 0.0
        for i in batch:
            w = fit_windows[i]
            ft = featurize(w, feature_config, pk)
            yhat = model.forward(ft, train=True, rng=rng)
            y = model.norm.normalize_target(w.glucose_future)
            loss, g_out = _huber_value_grad(y, yhat, config.huber_delta)
            g_theta, g_channels = model.backward(g_out)
            if n_theta:
                g_joint[:n_theta] += g_theta
            if pk is not None:
                p = pk.index(w.record.patient_id)
                g_k_bolus = float((g_channels[C_BOLUS_CHANNEL] * ft.dc_bolus_dk).sum())
                g_k_basal = float((g_channels[C_BASAL_CHANNEL] * ft.dc_basal_dk).sum())
                g_joint[n_theta + p] += g_k_bolus * float(softplus_grad(pk.u_bolus[p]))
                g_joint[n_theta + n_pat + p] += g_k_basal * float(softplus_grad(pk.u_basal[p]))
            train_loss += loss
        g_joint /= config.batch_size
        train_loss /= config.batch_size

        if config.clip_norm is not None:
            g_norm = float(np.linalg.norm(g_joint))
            if g_norm > config.clip_norm:
                g_joint *= config.clip_norm / g_norm

        joint, state = adam_step(joint, g_joint, state, config.learning_rate)
        model.set_param_vector(joint[:n_theta])
        if pk is not None:
            pk.u_bolus[:] = joint[n_theta : n_theta + n_pat]
            pk.u_basal[:] = joint[n_theta + n_pat :]

        entry = {"step": step, "train_loss": train_loss, "val_loss": None}
        if step % config.val_every == 0 or step == config.training_steps:
            val_loss = _validation_loss(model, feature_config, pk, val_windows, config.huber_delta)
            entry["val_loss"] = val_loss
            if val_loss < best_val:  # NaN never passes
                best_val = val_loss
                best_joint = joint.copy()
        history.append(entry)

    if np.isfinite(best_val):
        joint = best_joint
        model.set_param_vector(joint[:n_theta])
        if pk is not None:
            pk.u_bolus[:] = joint[n_theta : n_theta + n_pat]
            pk.u_basal[:] = joint[n_theta + n_pat :]

    return TrainResult(
        model=model,
        pk=pk,
        history=history,
        best_val_loss=best_val if np.isfinite(best_val) else float("nan"),
        config=config,
        feature_config=feature_config,
    )


def train_local(
    dataset: Dataset, config: TrainConfig, feature_config: FeatureConfig
) -> dict[str, TrainResult]:
    """One independent model per patient, trained on that patient only."""
    results: dict[str, TrainResult] = {}
    for record in dataset.records:
        sub = Dataset(grid=record.grid, records=[record], meta=dataset.meta)
        results[record.patient_id] = train_global(sub, config, feature_config)
    return results


def validation_select(
    candidates: list[TrainConfig], dataset: Dataset, feature_config: FeatureConfig
) -> TrainConfig:
    """Train every candidate and return the one with the lowest validation
    Huber loss. NaN losses disqualify; ties break on learning rate, then
    seed."""
    if not candidates:
        raise ValueError("validation_select requires at least one candidate")
    scored = []
    for cand in candidates:
        result = train_global(dataset, cand, feature_config)
        if np.isnan(result.best_val_loss):
            continue
        scored.append((result.best_val_loss, cand.learning_rate, cand.seed, cand))
    if not scored:
        raise TrainingError("every candidate produced NaN validation loss")
    scored.sort(key=lambda item: item[:3])
    return scored[0][3]


@dataclass
class TrialSet:
    """Repeated independently seeded trainings of one configuration."""

    seeds: list[int]
    results: list = field(default_factory=list)  # TrainResult or {pid: TrainResult}
    metrics: list = field(default_factory=list)

    @property
    def n_trials(self) -> int:
        return len(self.seeds)


def run_trials(
    dataset: Dataset,
    config: TrainConfig,
    feature_config: FeatureConfig,
    n_trials: int = 8,
) -> TrialSet:
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    seeds = [config.seed + t for t in range(n_trials)]
    trials = TrialSet(seeds=seeds)
    for seed in seeds:
        cfg = replace(config, seed=seed)
        if cfg.mode == "local":
            trials.results.append(train_local(dataset, cfg, feature_config))
        else:
            trials.results.append(train_global(dataset, cfg, feature_config))
    return trials
