import math

import numpy as np
import pytest

from lirl.env import EpisodeRecord, OperationRecord
from lirl.metrics import (METRICS_HEADER, MetricsRow, convergence_episode, coverage, post_convergence_mean,
                          read_metrics, reward_std, smooth, summarise_rewards, utilization, write_metrics)


def test_header_order():
    assert METRICS_HEADER == ("run_id", "method", "seed", "episode", "reward", "makespan", "energy",
                              "violations", "qp_iterations_mean", "wallclock_ms")


def test_csv_round_trip(tmp_path):
    rows = [MetricsRow("r", "lirl", 0, i, 0.1 * i + 1e-13, 100.0 / 3, 2000.5, 0, 1.25, None if i else 3.5)
            for i in range(4)]
    path = tmp_path / "m.csv"
    write_metrics(path, rows[:2])
    write_metrics(path, rows[2:])
    assert read_metrics(path) == rows
    assert path.read_text().count("run_id") == 1


def test_read_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_metrics(p)


def test_smooth_trailing_average():
    assert np.allclose(smooth([2, 4, 6, 8], 2), [2, 3, 5, 7])
    assert np.allclose(smooth([1, 2, 3], 5), [1, 1.5, 2])


def test_convergence_constant_series_is_zero():
    assert convergence_episode(np.full(100, 3.0)) == 0


def test_convergence_step_series():
    # step at episode 50: smoothed curve is within 5% of the span once the
    # trailing window holds at least 19 post-step points -> episode 69
    x = np.r_[np.zeros(50), np.ones(150)]
    s = smooth(x, 20)
    expected = int(np.flatnonzero(np.abs(s - 1.0) > 0.05)[-1]) + 1
    assert expected == 69
    assert convergence_episode(x) == expected


def test_convergence_ramp_never_stabilises():
    x = np.arange(200, dtype=float)
    assert convergence_episode(x) == 200


def test_convergence_needs_more_than_window():
    with pytest.raises(ValueError):
        convergence_episode(np.ones(20))


def test_post_convergence_mean():
    x = np.r_[np.zeros(50), np.ones(150)]
    assert post_convergence_mean(x) == 1.0
    ramp = np.arange(100, dtype=float)
    assert post_convergence_mean(ramp) == pytest.approx(np.mean(ramp[-20:]))


def test_reward_std_matches_sample_std():
    assert reward_std([1.0, 2.0, 3.0]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        reward_std([1.0])


def test_coverage_counts_inside_range():
    e = coverage([0.0, 1.0, 2.0], [0.5, 1.5, 2.5, -1.0])
    assert e.coverage == 0.5 and e.train_range == (0.0, 2.0)
    assert e.mean_gap == pytest.approx(abs(0.875 - 1.0))
    with pytest.raises(ValueError):
        coverage([], [1.0])


def _record():
    rec = EpisodeRecord(scale="J2R2", alpha=0.5, makespan=10.0, energy=1.0)
    rec.operations = [OperationRecord(0, 0, 0, 0.0, 4.0, 1.0), OperationRecord(1, 0, 1, 0.0, 5.0, 1.0),
                      OperationRecord(0, 1, 0, 4.0, 6.0, 0.0, kind="repair"),
                      OperationRecord(0, 1, 0, 6.0, 10.0, 1.0)]
    return rec


def test_utilization_excludes_repairs():
    assert utilization(_record()) == pytest.approx([0.8, 0.5])
    with pytest.raises(ValueError):
        utilization(EpisodeRecord(scale="J1R1", alpha=0.5))


def test_summarise_rewards_per_seed():
    rows = []
    for seed, level in ((0, 1.0), (1, 3.0)):
        for ep in range(40):
            rows.append(MetricsRow("r", "lirl", seed, ep, level if ep >= 10 else 0.0, 10.0, 5.0, 0, 0.0, None))
    out = summarise_rewards(rows)["lirl"]
    assert out["seeds"]["0"]["episodes"] == 40
    assert out["seeds"]["1"]["post_convergence_mean"] == 3.0
    assert out["post_convergence_mean"] == 2.0
    assert out["reward_std"] == pytest.approx(math.sqrt(2.0))
    assert out["mean_reward"] == pytest.approx((0.75 + 2.25) / 2)
