import logging

import numpy as np
import pytest

from fedload.config import ExperimentConfig
from fedload.data import (APPLIANCES, CSV_COLUMNS, MeterData, NormStats, PartitionSpec, RowError,
                          SchemaError, fit_norm_stats, generate_synthetic, ingest_csv, make_windows,
                          normalize_and_window, off_state_scores, partition, write_csv)
from fedload.experiment import prepare


def year(seed=0, households=1, days=365):
    return generate_synthetic(households, days, seed)


# -- reusable checks ----------------------------------------------------------------

def partition_problems(mode, seed=0, days=365, households=2):
    """Return a list of violated partition properties (empty when all hold)."""
    windows = make_windows(year(seed, households, days))
    spec = PartitionSpec(mode=mode, seed=seed)
    shards = partition(windows, spec)
    problems = []
    seen = np.concatenate([s.indices for s in shards])
    if len(np.unique(seen)) != len(seen):
        problems.append("shards overlap")
    for s in shards:
        if np.intersect1d(s.train, s.test).size:
            problems.append(f"client {s.client_id} train/test overlap")
    quota = int(np.floor(len(windows) * spec.client_fraction))
    n_train = int(round(quota * spec.train_fraction))
    for s in shards:
        if (len(s.train), len(s.test)) != (n_train, quota - n_train):
            problems.append(f"client {s.client_id} sized {len(s.train)}/{len(s.test)}")
    if mode == "heterogeneous":
        scores = off_state_scores(windows)
        last = scores[shards[-1].indices]
        others = np.concatenate([scores[s.indices] for s in shards[:-1]])
        if last.min() < others.max():
            problems.append("client 5 does not hold the most off-state windows")
    return problems


def sizing_for(n_windows):
    windows = make_windows(year(days=n_windows))
    shards = partition(windows, PartitionSpec(seed=0))
    return len(windows), [(len(s.train), len(s.test)) for s in shards]


def normalization_uses_train_only(seed=0):
    cfg = ExperimentConfig(seed=seed, households=1, days=200)
    data = prepare(cfg)
    train = np.concatenate([s.train for s in data.shards])
    expected = fit_norm_stats(data.windows.subset(train))
    everything = fit_norm_stats(data.windows)
    same = all(np.array_equal(getattr(data.stats, f), getattr(expected, f))
               for f in ("input_min", "input_max", "target_min", "target_max"))
    differs = not all(np.array_equal(getattr(data.stats, f), getattr(everything, f))
                      for f in ("input_min", "input_max", "target_min", "target_max"))
    return same and differs


def csv_round_trip_equal(tmp_path, seed=0):
    series = year(seed, days=30)[0]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_csv(series, a)
    back = ingest_csv(a)
    write_csv(back.data, b)
    return a.read_bytes() == b.read_bytes() and back.dropped == 0 and not back.gaps


# -- synthetic generator ------------------------------------------------------------------

def test_generator_is_deterministic_and_consistent():
    a, b = year(3, 2, 60), year(3, 2, 60)
    for x, y in zip(a, b):
        assert np.array_equal(x.loads, y.loads) and np.array_equal(x.temp, y.temp)
    assert not np.array_equal(a[0].loads, year(4, 2, 60)[0].loads)
    for h in a:
        assert (h.loads >= 0).all()
        assert (h.total >= h.loads.sum(axis=1)).all()
        assert h.loads.shape == (60 * 24, len(APPLIANCES))


def test_ac_tracks_temperature_in_summer():
    h = year(0)[0]
    july = (h.timestamps >= np.datetime64("2018-07-01T00", "h")) & (h.timestamps < np.datetime64("2018-08-01T00", "h"))
    ac = h.loads[july, APPLIANCES.index("ac")]
    assert np.corrcoef(ac, h.temp[july])[0, 1] > 0.3


def test_generator_rejects_bad_sizes():
    with pytest.raises(ValueError):
        generate_synthetic(0, 10, 0)
    with pytest.raises(ValueError):
        generate_synthetic(1, 1, 0)


# -- ingestion ---------------------------------------------------------------------------

def _write(path, rows):
    path.write_text("\n".join([",".join(CSV_COLUMNS)] + rows) + "\n")


def _row(stamp, humidity="60.0"):
    return ",".join([stamp, "1.5", "20.0", humidity] + ["0.1"] * len(APPLIANCES))


def test_header_only_csv_gives_zero_rows(tmp_path):
    _write(tmp_path / "e.csv", [])
    res = ingest_csv(tmp_path / "e.csv")
    assert len(res.data) == 0 and res.dropped == 0


def test_missing_value_drops_row_and_reports_gap(tmp_path):
    _write(tmp_path / "m.csv", [_row("2018-01-01T00:00:00"), _row("2018-01-01T01:00:00", ""),
                                _row("2018-01-01T02:00:00")])
    res = ingest_csv(tmp_path / "m.csv")
    assert res.dropped == 1 and len(res.data) == 2
    assert res.gaps == [("2018-01-01T00", "2018-01-01T02")]


def test_schema_and_row_errors(tmp_path):
    (tmp_path / "bad.csv").write_text("timestamp,total\n")
    with pytest.raises(SchemaError, match="temp"):
        ingest_csv(tmp_path / "bad.csv")
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(SchemaError):
        ingest_csv(tmp_path / "empty.csv")
    _write(tmp_path / "row.csv", [_row("2018-01-01T00:00:00"), _row("yesterday")])
    with pytest.raises(RowError, match="line 3"):
        ingest_csv(tmp_path / "row.csv")


def test_schema_map_renames_columns(tmp_path):
    series = year(days=2)[0]
    write_csv(series, tmp_path / "s.csv")
    text = (tmp_path / "s.csv").read_text().replace("humidity", "rh", 1)
    (tmp_path / "s.csv").write_text(text)
    res = ingest_csv(tmp_path / "s.csv", schema_map={"humidity": "rh"})
    assert np.array_equal(res.data.humidity, series.humidity)


def test_csv_round_trip_is_byte_equal(tmp_path):
    assert csv_round_trip_equal(tmp_path)


# -- windows and normalization -------------------------------------------------------------

def test_window_counts():
    assert len(make_windows(year(days=2))) == 2
    assert len(make_windows(year(days=10))) == 10
    w = make_windows(year(days=3), window_len=6)
    assert len(w) == 12 and w.inputs.shape == (12, 6, 3) and w.targets.shape == (12, 6, 12)


def test_windows_skip_gaps_and_start_at_midnight():
    h = year(days=4)[0]
    keep = np.ones(len(h), dtype=bool)
    keep[30] = False            # hole in day 2
    cut = MeterData(h.timestamps[keep], h.total[keep], h.temp[keep], h.humidity[keep], h.loads[keep])
    w = make_windows([cut])
    assert len(w) == 3
    assert all(s.astype(np.int64) % 24 == 0 for s in w.starts)


def test_constant_feature_normalizes_to_zero_with_warning(caplog):
    h = year(days=4)[0]
    h.humidity[:] = 55.0
    with caplog.at_level(logging.WARNING):
        norm, stats = normalize_and_window(h)
    assert "humidity" in caplog.text
    assert not norm.x[..., 2].any()
    assert norm.x.min() >= 0.0 and norm.x.max() <= 1.0


def test_min_max_round_trip():
    norm, stats = normalize_and_window(year(days=20))
    back = stats.denormalize_targets(norm.y)
    np.testing.assert_allclose(back, norm.raw.targets, atol=1e-12)
    np.testing.assert_allclose(stats.denormalize_inputs(norm.x), norm.raw.inputs, atol=1e-12)
    assert NormStats.from_dict(stats.to_dict()).to_json() == stats.to_json()


def test_normalization_statistics_come_from_training_windows_only():
    assert normalization_uses_train_only()


# -- partitioning ---------------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["homogeneous", "heterogeneous"])
@pytest.mark.parametrize("seed", [0, 1])
def test_partition_properties(mode, seed):
    assert partition_problems(mode, seed) == []


def test_sizing_arithmetic_for_100_windows():
    n, sizes = sizing_for(100)
    assert n == 100
    assert sizes == [(14, 6)] * 5


def test_partition_is_deterministic():
    w = make_windows(year(days=60))
    a = partition(w, PartitionSpec(mode="heterogeneous", seed=2))
    b = partition(w, PartitionSpec(mode="heterogeneous", seed=2))
    assert all(np.array_equal(x.train, y.train) and np.array_equal(x.test, y.test) for x, y in zip(a, b))


def test_partition_validation():
    with pytest.raises(ValueError, match="exceeds"):
        PartitionSpec(num_clients=6, client_fraction=0.2)
    with pytest.raises(ValueError):
        PartitionSpec(mode="random")
    with pytest.raises(ValueError, match=">= 2"):
        partition(make_windows(year(days=5)), PartitionSpec())
