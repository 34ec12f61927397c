"""SVG figures: schedule Gantt charts and learning curves.

Figures are rendered with the Agg-free SVG backend and a fixed hash salt so
repeated renders of the same schedule produce identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402

import io  # noqa: E402

from .constraints import STAGE_NAMES, ConfigError, ProblemScale  # noqa: E402
from .env import EpisodeRecord  # noqa: E402
from .metrics import smooth, utilization  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "lirl"
matplotlib.rcParams["svg.fonttype"] = "none"


def _svg_text(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return buf.getvalue()


def _robot_count(record: EpisodeRecord) -> int:
    try:
        n = ProblemScale.parse(record.scale).robots
    except ConfigError:
        n = 0
    return max(n, 1 + max((op.robot for op in record.operations), default=-1))


def gantt_table(record: EpisodeRecord) -> str:
    """Plain-text listing of every bar, ordered by robot then start time."""
    lines = [f"{'robot':>5} {'job':>4} {'stage':<24} {'start':>10} {'end':>10} {'energy':>10} kind"]
    for row in record.schedule_rows():
        lines.append(f"{row['robot']:>5} {row['job']:>4} {STAGE_NAMES[row['stage']]:<24} "
                     f"{row['start']:>10.3f} {row['end']:>10.3f} {row['energy']:>10.3f} {row['kind']}")
    util = utilization(record) if record.makespan > 0 else []
    lines.append(f"makespan {record.makespan:.3f} s, energy {record.energy:.3f} J, "
                 f"utilization " + ", ".join(f"R{k}={u:.3f}" for k, u in enumerate(util)))
    return "\n".join(lines) + "\n"


def gantt_svg(record: EpisodeRecord, title: Optional[str] = None) -> str:
    """One lane per robot, bars coloured by job, repair intervals hatched.

    Every operation bar carries an SVG id ``op_j{job}_s{stage}``; repairs use
    ``repair_r{robot}_{n}`` so the bars can be counted from the file.
    """
    if not record.operations:
        raise ValueError("cannot draw a Gantt chart of an empty schedule")
    n_robots = _robot_count(record)
    n_jobs = 1 + max(op.job for op in record.operations)
    cmap = plt.get_cmap("tab20" if n_jobs > 10 else "tab10")
    fig, ax = plt.subplots(figsize=(10, 1.0 + 0.6 * n_robots))
    repairs = 0
    for op in sorted(record.operations, key=lambda o: (o.robot, o.start, o.job)):
        if op.kind == "repair":
            bars = ax.barh(op.robot, op.end - op.start, left=op.start, height=0.6,
                           color="white", edgecolor="dimgray", hatch="///")
            bars[0].set_gid(f"repair_r{op.robot}_{repairs}")
            repairs += 1
        else:
            bars = ax.barh(op.robot, op.end - op.start, left=op.start, height=0.6,
                           color=cmap(op.job % cmap.N), edgecolor="black", linewidth=0.4)
            bars[0].set_gid(f"op_j{op.job}_s{op.stage}")
            ax.text(op.start + 0.5 * (op.end - op.start), op.robot, f"{op.job}.{op.stage}",
                    ha="center", va="center", fontsize=6)
    ax.set_yticks(range(n_robots))
    ax.set_yticklabels([f"robot {k}" for k in range(n_robots)])
    ax.set_ylim(-0.6, n_robots - 0.4)
    ax.invert_yaxis()
    ax.set_xlim(0, max(record.makespan, max(op.end for op in record.operations)) * 1.02)
    ax.set_xlabel("time (s)")
    ax.set_title(title or f"{record.method} {record.scale}: makespan {record.makespan:.1f} s, "
                          f"energy {record.energy:.0f} J")
    if repairs:
        ax.legend(handles=[Patch(facecolor="white", edgecolor="dimgray", hatch="///", label="repair")],
                  loc="upper right", fontsize=7)
    fig.tight_layout()
    return _svg_text(fig)


def learning_curve_svg(curves: Mapping[str, Sequence[Sequence[float]]], window: int = 20,
                       title: str = "training reward") -> str:
    """Smoothed mean curve per method with a min-max band across seeds."""
    import numpy as np

    fig, ax = plt.subplots(figsize=(7, 4))
    for method, per_seed in sorted(curves.items()):
        length = min(len(s) for s in per_seed)
        arr = np.array([smooth(s[:length], window) for s in per_seed])
        x = np.arange(length)
        line, = ax.plot(x, arr.mean(axis=0), label=method, linewidth=1.2)
        ax.fill_between(x, arr.min(axis=0), arr.max(axis=0), color=line.get_color(), alpha=0.2)
    ax.set_xlabel("episode")
    ax.set_ylabel("reward (moving average)")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _svg_text(fig)


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path
