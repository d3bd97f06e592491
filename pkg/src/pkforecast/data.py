"""Data model, event-CSV ingestion, forward-fill, and windowing.

Everything downstream works on fixed-frequency grids (5-minute steps by
default). Sparse medication events from raw logs are materialized onto the
grid here: square-dual boluses get split evenly across their administration
window, boluses in the same step are summed, and basal rates are turned
into hourly doses with temporary rates taking precedence.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    """Malformed row in an input file. Carries the 1-based line number."""

    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class ValidationError(ValueError):
    """Input violates a data-model constraint (sign, range, alignment)."""


EVENT_KINDS = (
    "glucose",
    "cho",
    "bolus_normal",
    "bolus_square_dual",
    "basal_rate",
    "temp_basal_rate",
)

ALIGNED_COLUMNS = ("timestamp", "glucose", "cho", "bolus", "basal", "observed")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform sampling grid in epoch minutes.

    ``step_minutes`` is the data frequency. ``n_steps`` may be zero only for
    the degenerate empty partition produced by a zero-length split.
    """

    start_timestamp: int
    step_minutes: int
    n_steps: int

    def __post_init__(self):
        if self.step_minutes <= 0:
            raise ValidationError(f"step_minutes must be positive, got {self.step_minutes}")
        if self.n_steps < 0:
            raise ValidationError(f"n_steps must be non-negative, got {self.n_steps}")

    @property
    def end_timestamp(self) -> int:
        """One past the last step (exclusive upper edge)."""
        return self.start_timestamp + self.step_minutes * self.n_steps

    def minutes_at(self, index: int) -> int:
        return self.start_timestamp + index * self.step_minutes

    def snap(self, timestamp: float, allow_end: bool = False) -> int:
        """Nearest step index for ``timestamp``.

        Raises ValidationError when the snapped index falls outside the grid.
        ``allow_end`` admits index == n_steps, for exclusive interval ends.
        """
        index = int(np.floor((timestamp - self.start_timestamp) / self.step_minutes + 0.5))
        upper = self.n_steps if allow_end else self.n_steps - 1
        if index < 0 or index > upper:
            raise ValidationError(
                f"timestamp {timestamp} outside grid "
                f"[{self.start_timestamp}, {self.end_timestamp})"
            )
        return index


@dataclass
class DoseSeries:
    """Per-step medication doses, in insulin units delivered at each step."""

    bolus: np.ndarray
    basal: np.ndarray

    def __post_init__(self):
        self.bolus = np.asarray(self.bolus, dtype=float)
        self.basal = np.asarray(self.basal, dtype=float)
        if self.bolus.shape != self.basal.shape:
            raise ValidationError("bolus and basal series must have equal length")
        if np.any(self.bolus < 0) or np.any(self.basal < 0):
            raise ValidationError("doses must be non-negative")

    def __len__(self) -> int:
        return len(self.bolus)

    def copy(self) -> "DoseSeries":
        return DoseSeries(self.bolus.copy(), self.basal.copy())


@dataclass
class StaticFeatures:
    """Time-invariant patient descriptors."""

    one_hot_patient: np.ndarray
    age_bucket: int | None = None
    weight_kg: float | None = None
    pump_type: int | None = None

    def __post_init__(self):
        self.one_hot_patient = np.asarray(self.one_hot_patient, dtype=float)
        if self.one_hot_patient.size and not np.isclose(self.one_hot_patient.sum(), 1.0):
            raise ValidationError("one_hot_patient must sum to 1 for a known patient")

    def vector(self) -> np.ndarray:
        """Numeric encoding used as model input. Missing fields encode as 0."""
        tail = [
            float(self.age_bucket) if self.age_bucket is not None else 0.0,
            float(self.weight_kg) / 100.0 if self.weight_kg is not None else 0.0,
            float(self.pump_type) if self.pump_type is not None else 0.0,
        ]
        return np.concatenate([self.one_hot_patient, tail])

    def to_dict(self) -> dict:
        return {
            "one_hot_patient": self.one_hot_patient.tolist(),
            "age_bucket": self.age_bucket,
            "weight_kg": self.weight_kg,
            "pump_type": self.pump_type,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StaticFeatures":
        return cls(
            one_hot_patient=np.asarray(d["one_hot_patient"], dtype=float),
            age_bucket=d.get("age_bucket"),
            weight_kg=d.get("weight_kg"),
            pump_type=d.get("pump_type"),
        )


@dataclass
class PatientRecord:
    """One patient's aligned series: glucose target plus exogenous inputs.

    ``observed_mask`` is True where glucose was actually measured and False
    where it was forward-filled.
    """

    patient_id: str
    grid: TimeGrid
    glucose: np.ndarray
    cho: np.ndarray
    doses: DoseSeries
    observed_mask: np.ndarray
    statics: StaticFeatures

    def __post_init__(self):
        self.glucose = np.asarray(self.glucose, dtype=float)
        self.cho = np.asarray(self.cho, dtype=float)
        self.observed_mask = np.asarray(self.observed_mask, dtype=bool)
        n = self.grid.n_steps
        for name, arr in (
            ("glucose", self.glucose),
            ("cho", self.cho),
            ("bolus", self.doses.bolus),
            ("basal", self.doses.basal),
            ("observed_mask", self.observed_mask),
        ):
            if len(arr) != n:
                raise ValidationError(f"{name} length {len(arr)} != grid n_steps {n}")
        if n and not np.all(np.isfinite(self.glucose)):
            raise ValidationError("glucose must be finite after forward-fill")
        if np.any(self.cho < 0):
            raise ValidationError("cho must be non-negative")

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    def copy(self) -> "PatientRecord":
        return PatientRecord(
            patient_id=self.patient_id,
            grid=self.grid,
            glucose=self.glucose.copy(),
            cho=self.cho.copy(),
            doses=self.doses.copy(),
            observed_mask=self.observed_mask.copy(),
            statics=self.statics,
        )


@dataclass
class WindowSample:
    """A view onto one (history, horizon) pair of a record.

    The history covers steps [history_start, history_start + L) and the
    horizon the following H steps. All array properties are numpy views,
    never copies.
    """

    record: PatientRecord
    patient_index: int
    history_start: int
    L: int
    H: int

    def __post_init__(self):
        if self.history_start < 0 or self.history_start + self.L + self.H > self.record.n_steps:
            raise ValidationError("window exceeds record bounds")

    @property
    def _hist(self) -> slice:
        return slice(self.history_start, self.history_start + self.L)

    @property
    def _future(self) -> slice:
        s = self.history_start + self.L
        return slice(s, s + self.H)

    @property
    def glucose_hist(self) -> np.ndarray:
        return self.record.glucose[self._hist]

    @property
    def glucose_future(self) -> np.ndarray:
        return self.record.glucose[self._future]

    @property
    def cho_hist(self) -> np.ndarray:
        return self.record.cho[self._hist]

    @property
    def bolus_hist(self) -> np.ndarray:
        return self.record.doses.bolus[self._hist]

    @property
    def basal_hist(self) -> np.ndarray:
        return self.record.doses.basal[self._hist]

    @property
    def mask_hist(self) -> np.ndarray:
        return self.record.observed_mask[self._hist]

    @property
    def mask_future(self) -> np.ndarray:
        return self.record.observed_mask[self._future]

    @property
    def origin(self) -> int:
        """Step index the forecast is issued at (first horizon step)."""
        return self.history_start + self.L


@dataclass
class Dataset:
    """A multi-patient collection on a shared grid."""

    grid: TimeGrid
    records: list[PatientRecord]
    meta: dict = field(default_factory=dict)

    @property
    def n_patients(self) -> int:
        return len(self.records)

    def patient_ids(self) -> list[str]:
        return [r.patient_id for r in self.records]


@dataclass
class PreprocessConfig:
    """Knobs for event ingestion. Defaults follow the dose-handling rules."""

    forward_fill_glucose: bool = True
    statics: StaticFeatures | None = None


def forward_fill(series: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Replace NaN gaps with the last observed value.

    Returns (filled, mask) where mask is False exactly at filled positions.
    A leading gap has no fill source and raises ValidationError.
    """
    series = np.asarray(series, dtype=float)
    if series.size == 0:
        raise ValidationError("cannot forward-fill an empty series")
    mask = ~np.isnan(series)
    if not mask[0]:
        raise ValidationError("leading gap: first element must be present")
    idx = np.where(mask, np.arange(len(series)), 0)
    np.maximum.accumulate(idx, out=idx)
    return series[idx], mask


def _parse_float(raw: str, what: str, line: int) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise ParseError(f"bad {what} value {raw!r}", line) from None


def ingest_events_csv(
    path: str | Path,
    grid: TimeGrid,
    rules: PreprocessConfig | None = None,
    patient_id: str | None = None,
) -> PatientRecord:
    """Read a sparse event CSV and materialize it onto ``grid``.

    Expected columns: timestamp, kind, value, and end_timestamp (required
    for square-dual boluses, optional for basal rates). Timestamps are epoch
    minutes and snap to the nearest grid step.

    Dose handling:

    * square-dual boluses are divided evenly across the steps of their
      administration window;
    * boluses snapping to the same step are summed;
    * basal rates (units/hour) become one dose per clock hour, equal to the
      rate integrated over the steps of that hour, placed at the hour's
      first in-grid step -- so partial trailing hours dispense
      rate x fraction-of-hour;
    * overlapping basal rates resolve last-wins, and temporary basal rates
      supersede regular ones;
    * missing glucose is forward-filled, with observed_mask False at filled
      steps.
    """
    rules = rules or PreprocessConfig()
    path = Path(path)
    n = grid.n_steps
    glucose = np.full(n, np.nan)
    cho = np.zeros(n)
    bolus = np.zeros(n)
    basal_rate = np.zeros(n)  # units/hour active at each step
    # (start, end, rate) intervals; regular rates apply first, temps after
    basal_rows: list[tuple[int, int, float]] = []
    temp_rows: list[tuple[int, int, float]] = []

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"timestamp", "kind", "value"} <= set(reader.fieldnames):
            raise ParseError(f"{path}: header must include timestamp, kind, value", 1)
        for row in reader:
            line = reader.line_num
            kind = (row.get("kind") or "").strip()
            if kind not in EVENT_KINDS:
                raise ParseError(f"unknown kind {kind!r}", line)
            ts = _parse_float(row.get("timestamp"), "timestamp", line)
            value = _parse_float(row.get("value"), "value", line)
            end_raw = (row.get("end_timestamp") or "").strip()

            if kind == "glucose":
                glucose[grid.snap(ts)] = value
            elif kind == "cho":
                if value < 0:
                    raise ValidationError(f"line {line}: negative cho {value}")
                cho[grid.snap(ts)] += value
            elif kind == "bolus_normal":
                if value < 0:
                    raise ValidationError(f"line {line}: negative dose {value}")
                # same-step administrations accumulate
                bolus[grid.snap(ts)] += value
            elif kind == "bolus_square_dual":
                if value < 0:
                    raise ValidationError(f"line {line}: negative dose {value}")
                if not end_raw:
                    raise ParseError("square-dual bolus requires end_timestamp", line)
                end = _parse_float(end_raw, "end_timestamp", line)
                i0 = grid.snap(ts)
                i1 = grid.snap(end, allow_end=True)
                span = max(i1 - i0, 1)
                bolus[i0 : i0 + span] += value / span
            else:  # basal_rate / temp_basal_rate
                if value < 0:
                    raise ValidationError(f"line {line}: negative basal rate {value}")
                i0 = grid.snap(ts)
                i1 = grid.snap(_parse_float(end_raw, "end_timestamp", line), allow_end=True) if end_raw else n
                target = temp_rows if kind == "temp_basal_rate" else basal_rows
                target.append((i0, i1, value))

    for i0, i1, rate in basal_rows + temp_rows:  # later rows win; temps last
        basal_rate[i0:i1] = rate

    basal = _materialize_hourly(basal_rate, grid)

    if rules.forward_fill_glucose:
        if not np.any(~np.isnan(glucose)):
            raise ValidationError(f"{path}: no glucose observations")
        glucose, observed = forward_fill(glucose)
    else:
        observed = ~np.isnan(glucose)

    statics = rules.statics or StaticFeatures(one_hot_patient=np.array([1.0]))
    return PatientRecord(
        patient_id=patient_id or path.stem,
        grid=grid,
        glucose=glucose,
        cho=cho,
        doses=DoseSeries(bolus=bolus, basal=basal),
        observed_mask=observed,
        statics=statics,
    )


def _materialize_hourly(rate: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Integrate a per-step basal rate (units/hour) into hourly doses.

    The dose for clock hour h is sum(rate[step] * step_minutes / 60) over the
    grid steps inside [h*60, (h+1)*60), placed at the hour's first in-grid
    step.
    """
    n = grid.n_steps
    doses = np.zeros(n)
    if n == 0:
        return doses
    minutes = grid.start_timestamp + np.arange(n) * grid.step_minutes
    hours = minutes // 60
    frac = grid.step_minutes / 60.0
    for h in np.unique(hours):
        in_hour = np.flatnonzero(hours == h)
        amount = rate[in_hour].sum() * frac
        if amount > 0:
            doses[in_hour[0]] += amount
    return doses


def make_windows(
    record: PatientRecord, L: int, H: int, stride: int = 1, patient_index: int = 0
) -> list[WindowSample]:
    """All (history, horizon) windows, ordered by history start."""
    if L <= 0 or H <= 0 or stride <= 0:
        raise ValidationError("L, H, and stride must be positive")
    if L + H > record.n_steps:
        raise ValidationError(f"L + H = {L + H} exceeds record length {record.n_steps}")
    starts = range(0, record.n_steps - L - H + 1, stride)
    return [WindowSample(record, patient_index, s, L, H) for s in starts]


def make_dataset_windows(dataset: Dataset, L: int, H: int, stride: int = 1) -> list[WindowSample]:
    windows: list[WindowSample] = []
    for i, record in enumerate(dataset.records):
        windows.extend(make_windows(record, L, H, stride, patient_index=i))
    return windows


def _slice_record(record: PatientRecord, start: int, stop: int) -> PatientRecord:
    grid = TimeGrid(
        start_timestamp=record.grid.minutes_at(start),
        step_minutes=record.grid.step_minutes,
        n_steps=stop - start,
    )
    return PatientRecord(
        patient_id=record.patient_id,
        grid=grid,
        glucose=record.glucose[start:stop].copy(),
        cho=record.cho[start:stop].copy(),
        doses=DoseSeries(
            bolus=record.doses.bolus[start:stop].copy(),
            basal=record.doses.basal[start:stop].copy(),
        ),
        observed_mask=record.observed_mask[start:stop].copy(),
        statics=record.statics,
    )


def split_train_test(record: PatientRecord, test_steps: int) -> tuple[PatientRecord, PatientRecord]:
    """Chronological split; the test partition is the trailing ``test_steps``.

    Windows are built per partition afterwards, so none straddles the cut.
    """
    if test_steps < 0:
        raise ValidationError("test_steps must be non-negative")
    if test_steps >= record.n_steps:
        raise ValidationError(f"test_steps {test_steps} must be < n_steps {record.n_steps}")
    cut = record.n_steps - test_steps
    return _slice_record(record, 0, cut), _slice_record(record, cut, record.n_steps)


# ---------------------------------------------------------------------------
# Aligned CSV (the canonical on-disk form) and dataset directories
# ---------------------------------------------------------------------------


def write_aligned_csv(record: PatientRecord, path: str | Path) -> None:
    """Write the aligned form: timestamp, glucose, cho, bolus, basal, observed.

    Floats are written with repr so a round trip reproduces them exactly.
    """
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ALIGNED_COLUMNS)
        for i in range(record.n_steps):
            writer.writerow(
                [
                    record.grid.minutes_at(i),
                    repr(float(record.glucose[i])),
                    repr(float(record.cho[i])),
                    repr(float(record.doses.bolus[i])),
                    repr(float(record.doses.basal[i])),
                    int(record.observed_mask[i]),
                ]
            )


def read_aligned_csv(
    path: str | Path,
    patient_id: str | None = None,
    statics: StaticFeatures | None = None,
) -> PatientRecord:
    """Read a file produced by write_aligned_csv back into a record."""
    path = Path(path)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != ALIGNED_COLUMNS:
            raise ParseError(f"{path}: expected columns {ALIGNED_COLUMNS}", 1)
        for row in reader:
            line = reader.line_num
            rows.append(
                (
                    int(_parse_float(row["timestamp"], "timestamp", line)),
                    _parse_float(row["glucose"], "glucose", line),
                    _parse_float(row["cho"], "cho", line),
                    _parse_float(row["bolus"], "bolus", line),
                    _parse_float(row["basal"], "basal", line),
                    int(_parse_float(row["observed"], "observed", line)),
                )
            )
    if not rows:
        raise ParseError(f"{path}: no data rows", 1)
    timestamps = np.array([r[0] for r in rows])
    if len(rows) > 1:
        steps = np.diff(timestamps)
        if np.any(steps != steps[0]):
            raise ValidationError(f"{path}: timestamps are not uniformly spaced")
        step = int(steps[0])
    else:
        step = 5
    grid = TimeGrid(start_timestamp=int(timestamps[0]), step_minutes=step, n_steps=len(rows))
    return PatientRecord(
        patient_id=patient_id or path.stem,
        grid=grid,
        glucose=np.array([r[1] for r in rows]),
        cho=np.array([r[2] for r in rows]),
        doses=DoseSeries(
            bolus=np.array([r[3] for r in rows]),
            basal=np.array([r[4] for r in rows]),
        ),
        observed_mask=np.array([bool(r[5]) for r in rows]),
        statics=statics or StaticFeatures(one_hot_patient=np.array([1.0])),
    )


def save_dataset(dataset: Dataset, directory: str | Path) -> None:
    """Write one aligned CSV per patient plus a manifest with grid/statics."""
    directory = Path(directory)
    patients_dir = directory / "patients"
    patients_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "grid": {
            "start_timestamp": dataset.grid.start_timestamp,
            "step_minutes": dataset.grid.step_minutes,
            "n_steps": dataset.grid.n_steps,
        },
        "patients": [
            {"patient_id": r.patient_id, "statics": r.statics.to_dict()} for r in dataset.records
        ],
        **dataset.meta,
    }
    for record in dataset.records:
        write_aligned_csv(record, patients_dir / f"{record.patient_id}.csv")
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"{directory}: missing manifest.json")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    grid = TimeGrid(**manifest["grid"])
    records = []
    for entry in manifest["patients"]:
        pid = entry["patient_id"]
        statics = StaticFeatures.from_dict(entry["statics"])
        record = read_aligned_csv(directory / "patients" / f"{pid}.csv", pid, statics)
        if record.grid != grid:
            raise ValidationError(f"{pid}: grid does not match manifest")
        records.append(record)
    meta = {k: v for k, v in manifest.items() if k not in ("grid", "patients")}
    return Dataset(grid=grid, records=records, meta=meta)
