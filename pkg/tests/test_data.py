import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qatts.data import (
    Scaler,
    SeriesFrame,
    apply_scaler,
    build_windows,
    chronological_split,
    fit_scaler,
    load_ett_csv,
    parse_synthetic_spec,
    prepare,
    synthetic_sine,
    window_count,
)
from qatts.errors import DataError


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_simple(tmp_path):
    frame = load_ett_csv(write(tmp_path, "date,OT\na,1.0\nb,2.0\n"), "OT")
    np.testing.assert_array_equal(frame.values, [1.0, 2.0])
    assert frame.timestamps == ["a", "b"]


def test_load_full_ett_header_takes_last_field(tmp_path):
    rows = [
        "2016-07-01 00:00:00,5.827,2.009,1.599,0.462,4.203,1.340,30.531",
        "2016-07-01 01:00:00,5.693,2.076,1.492,0.426,4.142,1.371,27.787",
        "2016-07-01 02:00:00,5.157,1.741,1.279,0.355,3.777,1.218,27.787",
    ]
    path = write(tmp_path, "date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n" + "\n".join(rows) + "\n")
    expected = [float(r.split(",")[-1]) for r in rows]
    np.testing.assert_allclose(load_ett_csv(path, "OT").values, np.float32(expected))


def test_load_missing_column(tmp_path):
    with pytest.raises(DataError, match="XX"):
        load_ett_csv(write(tmp_path, "date,OT\na,1\n"), "XX")


def test_load_non_numeric_reports_row(tmp_path):
    with pytest.raises(DataError, match="row 3"):
        load_ett_csv(write(tmp_path, "date,OT\na,1\nb,oops\n"), "OT")


def test_load_empty_and_missing(tmp_path):
    with pytest.raises(DataError):
        load_ett_csv(write(tmp_path, ""), "OT")
    with pytest.raises(DataError):
        load_ett_csv(write(tmp_path, "date,OT\n"), "OT")
    with pytest.raises(DataError):
        load_ett_csv(tmp_path / "nope.csv", "OT")


@pytest.mark.parametrize("n, sizes", [(10, (6, 2, 2)), (1000, (600, 200, 200)), (5, (3, 1, 1))])
def test_split_sizes(n, sizes):
    parts = chronological_split(np.arange(n))
    assert tuple(len(p) for p in parts) == sizes


def test_split_too_short():
    with pytest.raises(DataError):
        chronological_split(np.arange(4))


@given(st.integers(5, 3000))
def test_split_roundtrip(n):
    x = np.arange(n)
    tr, va, te = chronological_split(x)
    assert len(tr) == n * 3 // 5 and len(va) == n // 5
    np.testing.assert_array_equal(np.concatenate([tr, va, te]), x)


def test_scaler_fit_examples():
    s = fit_scaler(np.array([1.0, 2.0, 3.0]))
    assert s.mean == pytest.approx(2.0)
    assert s.std == pytest.approx(np.sqrt(2 / 3))
    assert apply_scaler(s, np.array([2.0]))[0] == 0.0


def test_scaler_constant_series_warns(caplog):
    s = fit_scaler(np.array([5.0, 5.0, 5.0]))
    assert s.std == 1.0
    np.testing.assert_array_equal(s.apply(np.array([5.0, 5.0])), [0, 0])
    assert "zero variance" in caplog.text


def test_scaler_center_mode_and_errors():
    s = fit_scaler(np.array([1.0, 5.0]), mode="center")
    assert (s.mean, s.std) == (3.0, 1.0)
    with pytest.raises(DataError):
        fit_scaler(np.array([]))
    with pytest.raises(DataError):
        fit_scaler(np.array([1.0]), mode="minmax")


def test_same_scaler_for_all_splits():
    frame = synthetic_sine(500, 0.1)
    ds = prepare(frame)
    tr, va, te = chronological_split(frame.values)
    ref = fit_scaler(tr)
    np.testing.assert_array_equal(ds.val, ref.apply(va))
    np.testing.assert_array_equal(ds.test, ref.apply(te))
    assert abs(float(ds.train.mean())) < 1e-5


def test_scaler_invert_roundtrip():
    s = Scaler(10.0, 2.5)
    x = np.array([3.0, 11.0, 20.0], np.float32)
    np.testing.assert_allclose(s.invert(s.apply(x)), x, rtol=1e-6)


@pytest.mark.parametrize("length, count", [(72, 1), (100, 29)])
def test_window_counts(length, count):
    assert len(build_windows(np.arange(length), 48, 24)) == count


def test_window_too_short_names_minimum():
    with pytest.raises(DataError, match="72"):
        build_windows(np.arange(71))


def test_window_count_sweep_and_positions():
    for length in range(72, 273):
        series = np.arange(length, dtype=np.float32)
        windows = build_windows(series)
        assert len(windows) == length - 72 + 1 == window_count(length)
        for i in (0, len(windows) - 1):
            np.testing.assert_array_equal(windows[i].input, series[i : i + 48])
            np.testing.assert_array_equal(windows[i].target, series[i + 48 : i + 72])


def test_consecutive_windows_overlap():
    series = np.arange(80, dtype=np.float32)
    w = build_windows(series)
    a = set(np.concatenate([w[3].input, w[3].target]).tolist())
    b = set(np.concatenate([w[4].input, w[4].target]).tolist())
    assert len(a & b) == 48 + 24 - 1


@settings(max_examples=30)
@given(st.floats(-100, 100), st.floats(0.01, 50))
def test_standardized_train_mean_zero(offset, spread):
    x = offset + spread * np.random.default_rng(0).standard_normal(300)
    ds = prepare(SeriesFrame([str(i) for i in range(300)], x.astype(np.float32)))
    assert abs(float(ds.train.astype(np.float64).mean())) < 1e-5


def test_synthetic_spec():
    f = parse_synthetic_spec("sine:100,0.05")
    assert len(f) == 100
    np.testing.assert_array_equal(f.values, synthetic_sine(100, 0.05).values)
    with pytest.raises(DataError):
        parse_synthetic_spec("cosine:10")
