import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trafficattack import dataset as ds
from trafficattack.errors import (ConfigurationError, DegenerateDataError, IngestionError,
                                  InsufficientDataError, SchemaError)


def _write(tmp_path, flows: str, sensors: str = "sensor_id,x_km,y_km\na,0,0\nb,3,4\n"):
    (tmp_path / "sensors.csv").write_text(sensors)
    path = tmp_path / "flows.csv"
    path.write_text(flows)
    return path


def _flow_text(rows: int, bad: tuple[int, str] | None = None) -> str:
    lines = ["time,a,b"]
    for i in range(rows):
        ts = np.datetime64("2018-01-01T00", "h") + i
        b = bad[1] if bad and bad[0] == i else "20.5"
        lines.append(f"{str(ts.astype('datetime64[s]'))},{10 + i},{b}")
    return "\n".join(lines) + "\n"


def test_load_csv_shapes_and_distance(tmp_path):
    series, net = ds.load_csv(_write(tmp_path, _flow_text(25)))
    assert series.values.shape == (25, 2)
    assert series.sensor_ids == ("a", "b")
    assert net.pairwise_distances[0, 1] == 5.0
    assert series.start_time == np.datetime64("2018-01-01T00", "h")


def test_negative_flow_names_the_cell(tmp_path):
    with pytest.raises(IngestionError, match=r"row 7, sensor b: negative flow -3"):
        ds.load_csv(_write(tmp_path, _flow_text(25, bad=(7, "-3"))))


def test_missing_value_names_the_row(tmp_path):
    with pytest.raises(IngestionError, match=r"row 3, sensor b"):
        ds.load_csv(_write(tmp_path, _flow_text(25, bad=(3, ""))))


def test_bad_header(tmp_path):
    with pytest.raises(SchemaError):
        ds.load_csv(_write(tmp_path, "when,a,b\n2018-01-01T00:00:00,1,2\n"))
    with pytest.raises(SchemaError):
        ds.load_csv(_write(tmp_path, _flow_text(3), sensors="id,x,y\na,0,0\nb,1,1\n"))


def test_time_gap_rejected(tmp_path):
    text = "time,a,b\n2018-01-01T00:00:00,1,2\n2018-01-01T02:00:00,1,2\n"
    with pytest.raises(IngestionError, match="one hour"):
        ds.load_csv(_write(tmp_path, text))


def test_sensor_file_order_is_aligned_to_header(tmp_path):
    path = _write(tmp_path, _flow_text(3), sensors="sensor_id,x_km,y_km\nb,3,4\na,0,0\n")
    _, net = ds.load_csv(path)
    assert net.sensor_ids == ("a", "b")
    np.testing.assert_array_equal(net.positions, [[0, 0], [3, 4]])


def test_csv_round_trip_is_exact(tmp_path):
    series, net = ds.generate_synthetic(4, 8, seed=3)
    ds.write_csv(series, net, tmp_path / "flows.csv")
    back, back_net = ds.load_csv(tmp_path / "flows.csv")
    np.testing.assert_array_equal(back.values, series.values)
    np.testing.assert_array_equal(back_net.positions, net.positions)
    assert back.start_time == series.start_time


def test_synthetic_shape_and_determinism():
    a, na = ds.generate_synthetic(10, 14, seed=7)
    b, nb = ds.generate_synthetic(10, 14, seed=7)
    assert a.values.shape == (336, 10)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(na.positions, nb.positions)
    c, _ = ds.generate_synthetic(10, 14, seed=8)
    assert not np.array_equal(a.values, c.values)


def test_synthetic_without_noise_is_weekly_periodic():
    series, _ = ds.generate_synthetic(5, 21, seed=1, noise_scale=0.0)
    v = series.values
    np.testing.assert_array_equal(v[168:], v[:-168])
    assert not np.array_equal(v[24:48], v[:24]) or not np.array_equal(v[120:144], v[:24])


@pytest.mark.parametrize("persistence", [0.0, 0.9])
def test_synthetic_flows_non_negative(persistence):
    series, net = ds.generate_synthetic(6, 10, seed=2, noise_scale=0.8, noise_persistence=persistence)
    assert (series.values >= 0).all()
    assert (net.positions >= 0).all() and (net.positions <= 20).all()


def test_synthetic_preconditions():
    with pytest.raises(ConfigurationError):
        ds.generate_synthetic(1, 10, 0)
    with pytest.raises(ConfigurationError):
        ds.generate_synthetic(3, 7, 0)


def test_distance_matrix_properties():
    _, net = ds.generate_synthetic(8, 8, seed=5)
    d = net.pairwise_distances
    np.testing.assert_array_equal(d, d.T)
    assert (np.diag(d) == 0).all() and (d >= 0).all()


def _series(values):
    values = np.asarray(values, dtype=np.float64)
    return ds.FlowSeries(values, np.datetime64("2018-01-01T00", "h"),
                         tuple(f"s{i}" for i in range(values.shape[1])))


def test_window_counts():
    assert len(ds.make_windows(_series(np.ones((25, 2))))) == 2
    with pytest.raises(InsufficientDataError):
        ds.make_windows(_series(np.ones((23, 2))))
    assert len(ds.make_windows(_series(np.zeros((546 * 24, 1))))) == 13081


def test_window_alignment_and_overlap():
    values = np.arange(40 * 3, dtype=np.float64).reshape(40, 3)
    w = ds.make_windows(_series(values))
    assert len(w) == 40 - 23
    for i in range(len(w)):
        np.testing.assert_array_equal(w.inputs[i], values[i:i + 12])
        np.testing.assert_array_equal(w.targets[i][0], values[i + 12])
        assert w.sample_times[i] == np.datetime64("2018-01-01T00", "h") + i
    np.testing.assert_array_equal(w.inputs[1][:-1], w.inputs[0][1:])


def test_drop_warmup():
    w = ds.make_windows(_series(np.ones((200, 1))))
    start = np.datetime64("2018-01-01T00", "h")
    kept = ds.drop_warmup(w, start, 24)
    # first target hour of window i is i + 12
    assert kept.sample_times[0] == start + 12
    assert len(kept) == len(w) - 12


def test_normalizer_hand_example():
    n = ds.fit_normalizer(np.array([2.0, 4.0, 6.0]))
    assert n.mu == 4.0
    assert n.sigma == pytest.approx(np.sqrt(8 / 3), abs=1e-12)
    assert n.sigma == pytest.approx(1.63299, abs=1e-5)


def test_normalizer_constant_data():
    with pytest.raises(DegenerateDataError):
        ds.fit_normalizer(np.full((4, 12, 2), 5.0))


@given(arrays(np.float64, (5, 12, 3), elements=st.floats(0, 5000)))
@settings(max_examples=50, deadline=None)
def test_normalizer_round_trip_and_standardisation(x):
    if np.ptp(x) < 1e-3:
        return
    n = ds.fit_normalizer(x)
    z = n.apply(x)
    np.testing.assert_allclose(n.invert(z), x, atol=1e-9, rtol=0)
    assert abs(z.mean()) < 1e-9
    assert abs(z.std() - 1.0) < 1e-9


def test_split_sizes_published_counts():
    assert ds.split_sizes(13081) == (9157, 2616, 1308)


@given(n=st.integers(30, 5000), seed=st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_split_is_a_seeded_partition(n, seed):
    parts = ds.split_indices(n, seed=seed)
    union = np.concatenate(parts)
    assert len(union) == n and len(np.unique(union)) == n
    again = ds.split_indices(n, seed=seed)
    for a, b in zip(parts, again):
        np.testing.assert_array_equal(a, b)


def test_split_partial_fractions_and_errors():
    sizes = ds.split_sizes(1000, (0.5, 0.2, 0.1))
    assert sizes == (500, 200, 100)
    with pytest.raises(ConfigurationError):
        ds.split_sizes(5, (0.7, 0.2, 0.1))  # holdout would be empty
    with pytest.raises(ConfigurationError):
        ds.split_sizes(100, (0.7, 0.4, 0.1))


def test_chronological_split():
    w = ds.make_windows(_series(np.arange(200.0).reshape(100, 2)))
    oracle, attack, hold = ds.split(w, chronological=True)
    assert oracle.sample_times.max() < attack.sample_times.min()
    assert attack.sample_times.max() < hold.sample_times.min()
