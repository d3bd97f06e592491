import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pkforecast.data import (
    DoseSeries,
    ParseError,
    PatientRecord,
    StaticFeatures,
    TimeGrid,
    ValidationError,
    forward_fill,
    ingest_events_csv,
    make_windows,
    read_aligned_csv,
    split_train_test,
    write_aligned_csv,
)

from conftest import make_record


def write_events(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "kind", "value", "end_timestamp"])
        writer.writerows(rows)
    return path


class TestTimeGrid:
    def test_validation(self):
        with pytest.raises(ValidationError):
            TimeGrid(0, 0, 10)
        with pytest.raises(ValidationError):
            TimeGrid(0, 5, -1)

    def test_snap_nearest(self):
        grid = TimeGrid(600, 5, 24)
        assert grid.snap(600) == 0
        assert grid.snap(612) == 2  # 612 -> 610
        assert grid.snap(613) == 3  # 613 -> 615
        with pytest.raises(ValidationError):
            grid.snap(720)  # one past the last step
        assert grid.snap(720, allow_end=True) == 24
        with pytest.raises(ValidationError):
            grid.snap(595)


class TestForwardFill:
    def test_gap_example(self):
        filled, mask = forward_fill(np.array([100.0, np.nan, np.nan, 90.0]))
        assert filled.tolist() == [100.0, 100.0, 100.0, 90.0]
        assert mask.tolist() == [True, False, False, True]

    def test_no_gaps_identity(self):
        x = np.array([1.0, 2.0, 3.0])
        filled, mask = forward_fill(x)
        assert np.array_equal(filled, x)
        assert mask.all()

    def test_leading_gap_errors(self):
        with pytest.raises(ValidationError):
            forward_fill(np.array([np.nan, 100.0]))

    @given(st.lists(st.one_of(st.floats(50, 300), st.none()), min_size=1, max_size=60))
    @settings(max_examples=100, deadline=None)
    def test_idempotent_and_mask_counts_gaps(self, values):
        if values[0] is None:
            values[0] = 120.0
        series = np.array([np.nan if v is None else v for v in values])
        filled, mask = forward_fill(series)
        assert np.all(np.isfinite(filled))
        assert (~mask).sum() == np.isnan(series).sum()
        again, mask2 = forward_fill(filled)
        assert np.array_equal(again, filled)
        assert mask2.all()


class TestIngestEvents:
    def test_square_dual_even_split(self, tmp_path):
        grid = TimeGrid(600, 5, 24)
        path = write_events(tmp_path / "p.csv", [
            [600, "glucose", 120, ""],
            [600, "bolus_square_dual", 6.0, 630],
        ])
        rec = ingest_events_csv(path, grid)
        assert rec.doses.bolus[:6].tolist() == [1.0] * 6
        assert rec.doses.bolus[6:].sum() == 0.0

    def test_same_minute_boluses_summed(self, tmp_path):
        grid = TimeGrid(600, 5, 12)
        path = write_events(tmp_path / "p.csv", [
            [600, "glucose", 120, ""],
            [605, "bolus_normal", 2.0, ""],
            [605, "bolus_normal", 3.0, ""],
        ])
        rec = ingest_events_csv(path, grid)
        assert rec.doses.bolus[1] == 5.0
        assert np.count_nonzero(rec.doses.bolus) == 1

    def test_temp_basal_supersedes(self, tmp_path):
        # basal 1.2 u/h over 10:00-12:00, temp 0.6 u/h over 11:00-12:00
        grid = TimeGrid(600, 5, 24)
        path = write_events(tmp_path / "p.csv", [
            [600, "glucose", 120, ""],
            [600, "basal_rate", 1.2, 720],
            [660, "temp_basal_rate", 0.6, 720],
        ])
        rec = ingest_events_csv(path, grid)
        expected = np.zeros(24)
        expected[0] = 1.2   # 10:00 hour at 1.2 u/h
        expected[12] = 0.6  # 11:00 hour at 0.6 u/h
        np.testing.assert_allclose(rec.doses.basal, expected, atol=1e-12)

    def test_overlapping_basal_last_wins(self, tmp_path):
        grid = TimeGrid(600, 5, 12)
        path = write_events(tmp_path / "p.csv", [
            [600, "glucose", 120, ""],
            [600, "basal_rate", 1.0, ""],
            [600, "basal_rate", 2.0, ""],
        ])
        rec = ingest_events_csv(path, grid)
        assert rec.doses.basal[0] == pytest.approx(2.0)

    def test_partial_trailing_hour(self, tmp_path):
        # rate active over only 30 minutes of grid -> half the hourly dose
        grid = TimeGrid(600, 5, 6)
        path = write_events(tmp_path / "p.csv", [
            [600, "glucose", 120, ""],
            [600, "basal_rate", 1.2, ""],
        ])
        rec = ingest_events_csv(path, grid)
        assert rec.doses.basal[0] == pytest.approx(0.6)

    def test_glucose_forward_filled_with_mask(self, tmp_path):
        grid = TimeGrid(0, 5, 4)
        path = write_events(tmp_path / "p.csv", [
            [0, "glucose", 100, ""],
            [15, "glucose", 90, ""],
        ])
        rec = ingest_events_csv(path, grid)
        assert rec.glucose.tolist() == [100.0, 100.0, 100.0, 90.0]
        assert rec.observed_mask.tolist() == [True, False, False, True]

    def test_malformed_row_reports_line(self, tmp_path):
        grid = TimeGrid(0, 5, 4)
        path = write_events(tmp_path / "p.csv", [
            [0, "glucose", 100, ""],
            [5, "glucose", "oops", ""],
        ])
        with pytest.raises(ParseError) as err:
            ingest_events_csv(path, grid)
        assert err.value.line_number == 3

    def test_negative_dose_rejected(self, tmp_path):
        grid = TimeGrid(0, 5, 4)
        path = write_events(tmp_path / "p.csv", [
            [0, "glucose", 100, ""],
            [5, "bolus_normal", -1.0, ""],
        ])
        with pytest.raises(ValidationError):
            ingest_events_csv(path, grid)

    def test_timestamp_outside_grid_rejected(self, tmp_path):
        grid = TimeGrid(0, 5, 4)
        path = write_events(tmp_path / "p.csv", [
            [0, "glucose", 100, ""],
            [500, "bolus_normal", 1.0, ""],
        ])
        with pytest.raises(ValidationError):
            ingest_events_csv(path, grid)

    def test_unknown_kind_rejected(self, tmp_path):
        grid = TimeGrid(0, 5, 4)
        path = write_events(tmp_path / "p.csv", [[0, "gluten", 100, ""]])
        with pytest.raises(ParseError):
            ingest_events_csv(path, grid)

    @given(
        st.lists(
            st.tuples(st.integers(0, 23), st.floats(0.1, 20.0)),
            min_size=1,
            max_size=8,
        ),
        st.tuples(st.integers(0, 18), st.integers(1, 6), st.floats(0.5, 12.0)),
    )
    @settings(max_examples=60, deadline=None)
    def test_insulin_conserved(self, tmp_path_factory, normals, square):
        # splitting and summation never change the dispensed total
        tmp = tmp_path_factory.mktemp("events")
        grid = TimeGrid(0, 5, 24)
        rows = [[0, "glucose", 120, ""]]
        total = 0.0
        for step, units in normals:
            rows.append([step * 5, "bolus_normal", units, ""])
            total += units
        start, span, units = square
        rows.append([start * 5, "bolus_square_dual", units, (start + span) * 5])
        total += units
        rec = ingest_events_csv(write_events(tmp / "p.csv", rows), grid)
        assert rec.doses.bolus.sum() == pytest.approx(total, rel=1e-12)


class TestAlignedRoundTrip:
    def test_write_read_identical(self, tmp_path):
        rec = make_record(n_steps=50, seed=3)
        rec.observed_mask[7:12] = False
        path = tmp_path / "p0.csv"
        write_aligned_csv(rec, path)
        back = read_aligned_csv(path)
        assert back.grid == rec.grid
        assert np.array_equal(back.glucose, rec.glucose)
        assert np.array_equal(back.cho, rec.cho)
        assert np.array_equal(back.doses.bolus, rec.doses.bolus)
        assert np.array_equal(back.doses.basal, rec.doses.basal)
        assert np.array_equal(back.observed_mask, rec.observed_mask)


class TestMakeWindows:
    def test_count_formula(self):
        rec = make_record(n_steps=130)
        assert len(make_windows(rec, 120, 6, 1)) == 5

    def test_full_stride_single_window(self):
        rec = make_record(n_steps=130)
        assert len(make_windows(rec, 120, 6, stride=130)) == 1

    def test_too_long_errors(self):
        rec = make_record(n_steps=130)
        with pytest.raises(ValidationError):
            make_windows(rec, 194, 6, 1)

    def test_stride_one_contiguous(self):
        rec = make_record(n_steps=60)
        starts = [w.history_start for w in make_windows(rec, 20, 4, 1)]
        assert starts == list(range(len(starts)))

    def test_windows_are_views(self):
        rec = make_record(n_steps=60)
        w = make_windows(rec, 20, 4, 1)[0]
        assert np.shares_memory(w.glucose_hist, rec.glucose)
        assert np.shares_memory(w.bolus_hist, rec.doses.bolus)


class TestSplitTrainTest:
    def test_paper_shape(self):
        rec = make_record(n_steps=10000)
        train, test = split_train_test(rec, 2691)
        assert train.n_steps == 7309
        assert test.n_steps == 2691
        assert test.grid.start_timestamp == rec.grid.minutes_at(7309)
        assert np.array_equal(
            np.concatenate([train.glucose, test.glucose]), rec.glucose
        )

    def test_zero_test_steps(self):
        rec = make_record(n_steps=100)
        train, test = split_train_test(rec, 0)
        assert test.n_steps == 0
        assert train.n_steps == rec.n_steps
        assert np.array_equal(train.glucose, rec.glucose)

    def test_full_test_errors(self):
        rec = make_record(n_steps=100)
        with pytest.raises(ValidationError):
            split_train_test(rec, 100)


class TestDoseSeries:
    def test_negative_rejected(self):
        with pytest.raises(ValidationError):
            DoseSeries(bolus=np.array([-0.1]), basal=np.array([0.0]))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            DoseSeries(bolus=np.zeros(3), basal=np.zeros(4))


class TestStaticFeatures:
    def test_one_hot_must_sum_to_one(self):
        with pytest.raises(ValidationError):
            StaticFeatures(one_hot_patient=np.array([0.5, 0.2]))

    def test_vector_encodes_missing_as_zero(self):
        s = StaticFeatures(one_hot_patient=np.array([0.0, 1.0]))
        v = s.vector()
        assert v.tolist() == [0.0, 1.0, 0.0, 0.0, 0.0]
