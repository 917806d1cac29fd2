import numpy as np
import pandas as pd
import pytest

from wsn_anomaly.data_classes import AlignedSeries, PreprocessConfig, SampleWindow
from wsn_anomaly.errors import BoundaryError, ConfigError, DataError, GapError, LengthError
from wsn_anomaly.preprocessing import (
    IBRL_COLUMN_MAP,
    align_timestamps,
    build_adjacency,
    build_samples,
    downsample_windows,
    read_records_csv,
    split_dataset,
    zscore_normalize,
)
from wsn_anomaly.preprocessing.windows import split_counts


def index_series(num_steps: int, interval: float = 30.0) -> AlignedSeries:
    grid = interval * np.arange(num_steps, dtype=np.float64)
    data = np.broadcast_to(np.arange(num_steps, dtype=np.float64), (2, 1, num_steps)).copy()
    return AlignedSeries(interval=interval, grid=grid, data=data, fill_mask=np.zeros_like(data, dtype=bool))


# ---------------------------------
# Alignment
# ---------------------------------

def test_align_averages_duplicates_and_interpolates_gaps():
    frame = pd.DataFrame(
        {
            "timestamp": [0.0, 0.0, 30.0, 90.0],
            "node_id": [0, 0, 0, 0],
            "temperature": [1.0, 3.0, 3.0, 9.0],
        }
    )
    series = align_timestamps(frame, 30.0, modalities=["temperature"], num_nodes=1)

    np.testing.assert_allclose(series.grid, [0.0, 30.0, 60.0, 90.0])
    np.testing.assert_allclose(series.data[0, 0], [2.0, 3.0, 6.0, 9.0])
    assert series.fill_mask[0, 0].tolist() == [False, False, True, False]


def test_align_missing_node_is_a_gap():
    frame = pd.DataFrame({"timestamp": [0.0, 30.0], "node_id": [0, 0], "temperature": [1.0, 2.0]})
    with pytest.raises(GapError):
        align_timestamps(frame, 30.0, modalities=["temperature"], num_nodes=2)


def test_align_empty_interval_without_right_neighbour():
    frame = pd.DataFrame({"timestamp": [0.0, 90.0], "node_id": [0, 0], "temperature": [1.0, 2.0]})
    with pytest.raises(BoundaryError):
        align_timestamps(frame, 30.0, span=(0.0, 120.0), modalities=["temperature"], num_nodes=1)


def test_align_rejects_bad_interval():
    frame = pd.DataFrame({"timestamp": [0.0], "node_id": [0], "temperature": [1.0]})
    with pytest.raises(ConfigError):
        align_timestamps(frame, 0.0, modalities=["temperature"])


def test_malformed_csv_row_reports_line_number(tmp_path):
    path = tmp_path / "records.csv"
    path.write_text("timestamp,node_id,temperature\n0,0,1.0\n30,0,abc\n", encoding="utf-8")
    with pytest.raises(DataError, match="line 3"):
        read_records_csv(path, ["temperature"])


def test_ragged_csv_row_reports_line_number(tmp_path):
    path = tmp_path / "records.csv"
    path.write_text("timestamp,node_id,temperature\n0,0,1.0\n30,0,2.0,9\n", encoding="utf-8")
    with pytest.raises(DataError, match="line 3"):
        read_records_csv(path, ["temperature"])


def test_missing_csv_is_file_not_found(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_records_csv(tmp_path / "absent.csv", ["temperature"])


def test_ibrl_layout_is_mapped(tmp_path):
    path = tmp_path / "ibrl.csv"
    path.write_text(
        "date,time,epoch,moteid,temperature,humidity,light,voltage\n"
        "2004-02-28,00:00:00,1,1,19.0,38.0,45.0,2.68\n"
        "2004-02-28,00:00:30,2,1,19.1,38.1,45.0,2.68\n"
        "2004-02-28,00:00:00,1,3,20.0,37.0,45.0,2.69\n"
        "2004-02-28,00:00:31,2,3,20.1,37.1,45.0,2.69\n",
        encoding="utf-8",
    )
    frame = read_records_csv(path, ["temperature", "humidity", "voltage"], IBRL_COLUMN_MAP)

    # motes 1 and 3 are re-indexed to 0 and 1
    assert sorted(frame["node_id"].unique().tolist()) == [0, 1]
    stamps = frame.loc[frame["node_id"] == 0, "timestamp"].to_numpy()
    np.testing.assert_allclose(np.diff(stamps), [30.0])


def test_ibrl_excluded_nodes_are_dropped(tmp_path):
    path = tmp_path / "ibrl.csv"
    path.write_text(
        "date,time,epoch,moteid,temperature\n"
        "2004-02-28,00:00:00,1,1,19.0\n"
        "2004-02-28,00:00:00,1,2,18.0\n"
        "2004-02-28,00:00:00,1,3,20.0\n",
        encoding="utf-8",
    )
    frame = read_records_csv(path, ["temperature"], IBRL_COLUMN_MAP, exclude_nodes=[1])
    assert frame["node_id"].tolist() == [0, 1]
    assert frame["temperature"].tolist() == [19.0, 20.0]


# ---------------------------------
# Downsampling, normalization, split
# ---------------------------------

def test_downsampling_partitions_the_segment(rng):
    for _ in range(1000):
        k = int(rng.integers(1, 6))
        W = int(rng.integers(1, 12))
        start = int(rng.integers(0, 5))
        series = index_series(start + k * W + int(rng.integers(0, 4)))

        windows = downsample_windows(series, k, W, start)

        assert len(windows) == k
        taken = np.sort(np.concatenate([w.X[0, 0] for w in windows]))
        np.testing.assert_array_equal(taken, np.arange(start, start + k * W))
        for phase, window in enumerate(windows):
            assert window.phase == phase
            np.testing.assert_array_equal(window.X[0, 0], start + phase + k * np.arange(W))


def test_downsampling_example_k2_w3():
    windows = downsample_windows(index_series(6), 2, 3)
    assert windows[0].X[0, 0].tolist() == [0, 2, 4]
    assert windows[1].X[0, 0].tolist() == [1, 3, 5]


def test_downsampling_too_short_series():
    with pytest.raises(LengthError):
        downsample_windows(index_series(5), 2, 3)


def test_zscore_statistics(rng):
    X = rng.normal(5.0, 3.0, size=(4, 3, 32))
    out = zscore_normalize(SampleWindow(X=X, origin_time=0.0, phase=0)).X
    assert np.abs(out.mean(axis=-1)).max() <= 1e-6
    assert np.abs(out.std(axis=-1) - 1.0).max() <= 1e-6


def test_zscore_constant_sequence_maps_to_zero():
    X = np.full((1, 1, 8), 4.0)
    out = zscore_normalize(SampleWindow(X=X, origin_time=0.0, phase=0)).X
    np.testing.assert_array_equal(out, np.zeros_like(X))


def test_zscore_rejects_non_finite_values():
    X = np.zeros((2, 2, 4))
    X[1, 0, 2] = np.nan
    with pytest.raises(DataError, match="node 1, modality 0, step 2"):
        zscore_normalize(SampleWindow(X=X, origin_time=0.0, phase=0))


def test_split_counts_seven_two_one():
    assert split_counts(100, (0.7, 0.2, 0.1)) == (70, 20, 10)
    assert sum(split_counts(37, (0.7, 0.2, 0.1))) == 37


def test_split_rejects_bad_ratios():
    with pytest.raises(ConfigError):
        split_counts(10, (0.5, 0.2, 0.1))


def test_split_is_chronological(clean_split):
    split, _, _ = clean_split
    ordered = [s.origin_time for s in split.train + split.validation + split.test]
    assert ordered == sorted(ordered)
    assert max(s.origin_time for s in split.train) < min(s.origin_time for s in split.test)


def test_built_samples_are_normalized_graphs(clean_split):
    split, adjacency, _ = clean_split
    sample = split.train[0]
    assert sample.X.shape == (6, 3, 16)
    np.testing.assert_array_equal(sample.A, adjacency)
    assert np.abs(sample.X.mean(axis=-1)).max() <= 1e-6
    assert [s.phase for s in split.train[:4]] == [0, 1, 0, 1]


def test_build_samples_with_overlapping_segments():
    series = index_series(40)
    config = PreprocessConfig(downsample_step=2, window=4, segment_stride=4, modalities=["m"])
    samples = build_samples(series, np.ones((2, 2), dtype=np.int8), config)
    # starts 0, 4, ..., 32 -> 9 segments of 2 phases
    assert len(samples) == 18


def test_split_dataset_keeps_order():
    series = index_series(64)
    config = PreprocessConfig(downsample_step=1, window=4, modalities=["m"])
    samples = build_samples(series, np.ones((2, 2), dtype=np.int8), config)
    split = split_dataset(samples, (0.5, 0.25, 0.25))
    assert [len(p) for p in split.partitions().values()] == [8, 4, 4]
    assert split.validation[0].origin_time == samples[8].origin_time


# ---------------------------------
# Adjacency
# ---------------------------------

def test_knn_adjacency_is_symmetric_with_self_loops(rng):
    positions = rng.uniform(0, 10, size=(7, 2))
    A = build_adjacency(positions, "knn", k=2)
    np.testing.assert_array_equal(A, A.T)
    assert np.all(np.diag(A) == 1)
    assert np.all(A.sum(axis=1) >= 3)


def test_radius_adjacency_and_isolated_warning():
    positions = np.array([[0.0, 0.0], [1.0, 0.0], [50.0, 50.0]])
    with pytest.warns(UserWarning):
        A = build_adjacency(positions, "radius", radius=2.0)
    np.testing.assert_array_equal(A, [[1, 1, 0], [1, 1, 0], [0, 0, 1]])


def test_adjacency_rejects_unknown_rule():
    with pytest.raises(ConfigError):
        build_adjacency(np.zeros((2, 2)), "delaunay")
