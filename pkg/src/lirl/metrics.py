"""Per-episode metric rows and the statistics computed from them."""

from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .constraints import ConfigError, ProblemScale
from .env import EpisodeRecord

CONVERGENCE_WINDOW = 20
CONVERGENCE_BAND = 0.05


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    method: str
    seed: int
    episode: int
    reward: float
    makespan: float
    energy: float
    violations: int
    qp_iterations_mean: float
    wallclock_ms: Optional[float]

    @classmethod
    def from_record(cls, run_id: str, method: str, seed: int, episode: int, record: EpisodeRecord,
                    wallclock_ms: Optional[float] = None) -> "MetricsRow":
        return cls(run_id, method, int(seed), int(episode), record.reward, float(record.makespan),
                   float(record.energy), record.violations, record.qp_iterations_mean, wallclock_ms)

    def to_csv(self) -> list[str]:
        out = []
        for value in astuple(self):
            if value is None:
                out.append("")
            elif isinstance(value, float):
                out.append(repr(value))  # shortest round-tripping form
            else:
                out.append(str(value))
        return out

    @classmethod
    def from_csv(cls, row: Sequence[str]) -> "MetricsRow":
        (run_id, method, seed, episode, reward, makespan, energy, violations, qp, wall) = row
        return cls(run_id, method, int(seed), int(episode), float(reward), float(makespan),
                   float(energy), int(violations), float(qp), float(wall) if wall else None)


METRICS_HEADER = tuple(f.name for f in fields(MetricsRow))


def write_metrics(path, rows: Iterable[MetricsRow], append: bool = True) -> None:
    """Append rows, writing the header first if the file is new or empty."""
    path = Path(path)
    fresh = not append or not path.exists() or path.stat().st_size == 0
    with path.open("w" if not append else "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow(row.to_csv())


def read_metrics(path) -> list[MetricsRow]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        return [MetricsRow.from_csv(r) for r in reader]


# ------------------------------------------------------------------ statistics

def smooth(series, window: int = CONVERGENCE_WINDOW) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` points use what exists."""
    x = np.asarray(series, dtype=float)
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(len(x))
    lo = np.maximum(idx - window + 1, 0)
    return (csum[idx + 1] - csum[lo]) / (idx + 1 - lo)


def convergence_episode(series, window: int = CONVERGENCE_WINDOW, band: float = CONVERGENCE_BAND) -> int:
    """First episode after which the smoothed reward stays near its final level.

    The band is ``band * (max - min)`` of the smoothed curve around the final
    value.  A stable tail shorter than ``window`` episodes does not count,
    in which case the series length is returned.
    """
    x = np.asarray(series, dtype=float)
    if len(x) <= window:
        raise ValueError(f"need more than {window} points, got {len(x)}")
    s = smooth(x, window)
    final = float(np.mean(x[-window:]))
    span = float(s.max() - s.min())
    outside = np.abs(s - final) > band * span
    if not outside.any():
        return 0
    first = int(np.flatnonzero(outside)[-1]) + 1
    if len(x) - first < window:
        return len(x)
    return first


def reward_std(values) -> float:
    """Sample standard deviation of per-seed post-convergence means."""
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise ValueError("reward_std needs at least two seeds")
    return float(np.std(x, ddof=1))


def post_convergence_mean(series, window: int = CONVERGENCE_WINDOW) -> float:
    """Mean reward from the convergence episode on (the last window if never stable)."""
    x = np.asarray(series, dtype=float)
    start = min(convergence_episode(x, window), len(x) - window)
    return float(np.mean(x[start:]))


@dataclass(frozen=True)
class CoverageEntry:
    metric: str
    train_range: tuple[float, float]
    generalization_range: tuple[float, float]
    coverage: float
    mean_gap: float

    def as_dict(self) -> dict:
        return {"metric": self.metric, "train_range": list(self.train_range),
                "generalization_range": list(self.generalization_range),
                "coverage": self.coverage, "mean_gap": self.mean_gap}


def coverage(train, generalization, metric: str = "weighted") -> CoverageEntry:
    """Share of generalisation outcomes inside the training min-max, and the mean gap."""
    t = np.asarray(train, dtype=float)
    g = np.asarray(generalization, dtype=float)
    if t.size == 0 or g.size == 0:
        raise ValueError("coverage needs non-empty training and generalisation samples")
    lo, hi = float(t.min()), float(t.max())
    inside = int(np.count_nonzero((g >= lo) & (g <= hi)))
    return CoverageEntry(metric, (lo, hi), (float(g.min()), float(g.max())), inside / g.size,
                         abs(float(g.mean()) - float(t.mean())))


@dataclass(frozen=True)
class RobustnessSummary:
    """Coverage entries per perturbation level and metric."""

    levels: dict

    def as_dict(self) -> dict:
        return {str(level): {e.metric: e.as_dict() for e in entries} for level, entries in self.levels.items()}


def utilization(record: EpisodeRecord) -> list[float]:
    """Busy time over makespan for each robot; repairs do not count as busy."""
    if record.makespan <= 0:
        raise ValueError("utilization is undefined for a zero-makespan schedule")
    try:
        n_robots = ProblemScale.parse(record.scale).robots
    except ConfigError:
        n_robots = 0
    n_robots = max(n_robots, 1 + max((op.robot for op in record.operations), default=-1))
    busy = [0.0] * n_robots
    for op in record.operations:
        if op.kind == "op":
            busy[op.robot] += min(op.end, record.makespan) - op.start
    return [min(b / record.makespan, 1.0) for b in busy]


def summarise_rewards(rows: Sequence[MetricsRow], window: int = CONVERGENCE_WINDOW) -> dict:
    """Convergence and reward statistics for every (method, seed) series in ``rows``."""
    series: dict = {}
    for r in rows:
        series.setdefault(r.method, {}).setdefault(r.seed, []).append((r.episode, r))
    out = {}
    for method, by_seed in sorted(series.items()):
        per_seed = {}
        for seed, items in sorted(by_seed.items()):
            items.sort(key=lambda t: t[0])
            rewards = [r.reward for _, r in items]
            entry = {
                "run_id": items[0][1].run_id,
                "episodes": len(rewards),
                "mean_reward": math.fsum(rewards) / len(rewards),
                "violations": sum(r.violations for _, r in items),
                "last_reward": rewards[-1],
                "mean_makespan": math.fsum(r.makespan for _, r in items) / len(items),
                "mean_energy": math.fsum(r.energy for _, r in items) / len(items),
            }
            if len(rewards) > window:
                entry["convergence_episode"] = convergence_episode(rewards, window)
                entry["post_convergence_mean"] = post_convergence_mean(rewards, window)
            per_seed[str(seed)] = entry
        summary = {"seeds": per_seed,
                   "mean_reward": float(np.mean([e["mean_reward"] for e in per_seed.values()]))}
        if len(per_seed) >= 2:
            summary["mean_reward_std"] = reward_std([e["mean_reward"] for e in per_seed.values()])
        conv = [e["convergence_episode"] for e in per_seed.values() if "convergence_episode" in e]
        if conv:
            post = [e["post_convergence_mean"] for e in per_seed.values()]
            summary["convergence_episode_mean"] = float(np.mean(conv))
            summary["post_convergence_mean"] = float(np.mean(post))
            if len(post) >= 2:
                summary["reward_std"] = reward_std(post)
        out[method] = summary
    return out
