"""CMDP data model: plant state, hybrid actions and the constraint set.

The discrete part of an action is a list of ``Assignment`` triples
(job, stage, robot).  The continuous part carries one knot vector per
assignment.  Feasibility is the conjunction of

* capacity   - a robot takes at most one operation and must be idle,
* precedence - a job runs only its next stage and has nothing in flight,
* kinematic  - knots inside the per-stage box,
* collision  - knots satisfy the per-stage coupling rows ``A x <= b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import linprog

STAGE_COUNT = 5
STAGE_NAMES = (
    "place bottom shell",
    "small gear assembling",
    "large gear assembling",
    "top bottom shell",
    "move reducer to buffer",
)
LINEAR_TOL = 1e-8

IDLE = "idle"
BUSY = "busy"
BROKEN = "broken"


class ConfigError(ValueError):
    """Raised when constraint templates or scales are malformed."""


class Assignment(NamedTuple):
    job: int
    stage: int
    robot: int


@dataclass(frozen=True)
class ProblemScale:
    jobs: int
    robots: int
    label: str = ""
    stage_count: int = STAGE_COUNT

    def __post_init__(self):
        if self.jobs < 1 or self.robots < 1:
            raise ConfigError(f"scale needs jobs >= 1 and robots >= 1, got J={self.jobs} K={self.robots}")
        if self.stage_count != STAGE_COUNT:
            raise ConfigError("stage_count is fixed at 5")
        if not self.label:
            object.__setattr__(self, "label", f"J{self.jobs}R{self.robots}")

    @classmethod
    def parse(cls, label: str) -> "ProblemScale":
        """Build a scale from a label such as ``"J10R3"``."""
        text = label.strip().upper()
        try:
            j_part, r_part = text[1:].split("R")
            if text[0] != "J":
                raise ValueError
            return cls(int(j_part), int(r_part), label=f"J{int(j_part)}R{int(r_part)}")
        except ValueError:
            raise ConfigError(f"cannot parse scale label {label!r}") from None


@dataclass(frozen=True)
class Region:
    """Polytope ``{x : lower <= x <= upper, A x <= b}`` for one stage's knots."""

    lower: np.ndarray
    upper: np.ndarray
    A: np.ndarray
    b: np.ndarray
    G: np.ndarray = field(init=False, repr=False, compare=False)
    h: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).ravel()
        upper = np.asarray(self.upper, dtype=float).ravel()
        dim = lower.size
        A = np.asarray(self.A, dtype=float).reshape(-1, dim)
        b = np.asarray(self.b, dtype=float).ravel()
        if upper.size != dim or b.size != A.shape[0]:
            raise ConfigError("region arrays have inconsistent shapes")
        if np.any(lower > upper):
            raise ConfigError(f"empty knot box: lower {lower} exceeds upper {upper}")
        eye = np.eye(dim)
        G = np.vstack([eye, -eye, A])
        h = np.concatenate([upper, -lower, b])
        for name, value in (("lower", lower), ("upper", upper), ("A", A), ("b", b), ("G", G), ("h", h)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x, tol: float = LINEAR_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,) or not np.all(np.isfinite(x)):
            return False
        return bool(np.all(self.G @ x <= self.h + tol))

    def max_violation(self, x) -> float:
        return float(max(0.0, np.max(self.G @ np.asarray(x, dtype=float) - self.h)))

    def interior_point(self) -> tuple[np.ndarray, float]:
        """Chebyshev centre of the polytope and its inscribed radius.

        A degenerate box (``lower == upper`` in every coordinate) returns the
        single point with radius 0.
        """
        if np.all(self.lower == self.upper):
            return self.lower.copy(), 0.0
        norms = np.linalg.norm(self.G, axis=1)
        # variables (x, r): maximise r s.t. G x + r |g| <= h
        c = np.zeros(self.dim + 1)
        c[-1] = -1.0
        A_ub = np.hstack([self.G, norms[:, None]])
        res = linprog(c, A_ub=A_ub, b_ub=self.h, bounds=[(None, None)] * self.dim + [(0, None)],
                      method="highs")
        if res.status != 0:
            raise ConfigError("could not locate an interior point of the knot region")
        return res.x[: self.dim], float(res.x[-1])


@dataclass(frozen=True)
class StageTemplate:
    """One assembly stage: segment base durations, energy curve and knot region."""

    name: str
    base_seg: tuple[float, ...]
    energy_a: float
    energy_b: float
    energy_c: float
    region: Region

    def __post_init__(self):
        if self.energy_a <= 0 or self.energy_b <= 0 or self.energy_c < 0:
            raise ConfigError(f"stage {self.name!r}: need a > 0, b > 0, c >= 0")
        if len(self.base_seg) != self.region.dim:
            raise ConfigError(f"stage {self.name!r}: base_seg length must match knot dimension")
        if any(s <= 0 for s in self.base_seg):
            raise ConfigError(f"stage {self.name!r}: base segment durations must be positive")
        if np.any(self.region.lower <= 0):
            raise ConfigError(f"stage {self.name!r}: knot lower bounds must be positive")

    @property
    def t_min(self) -> float:
        return float(np.sum(np.asarray(self.base_seg) / self.region.upper))

    @property
    def t_max(self) -> float:
        return float(np.sum(np.asarray(self.base_seg) / self.region.lower))

    @property
    def t_mean(self) -> float:
        """Mid-range duration used as the noise reference."""
        return self.t_min + 0.5 * (self.t_max - self.t_min)

    @property
    def t_energy_opt(self) -> float:
        return float(np.sqrt(self.energy_a / self.energy_b))


@dataclass(frozen=True)
class State:
    """Joint cyber-physical status of the workcell line.

    ``robot_until[k]`` is meaningful only when ``robot_mode[k]`` is busy or
    broken.  ``in_flight[i]`` holds ``(robot, finish_time)`` for a running
    operation of job ``i``.
    """

    clock: float
    robot_mode: tuple[str, ...]
    robot_until: tuple[float, ...]
    job_stage: tuple[int, ...]
    in_flight: tuple[Optional[tuple[int, float]], ...]
    makespan_acc: float = 0.0
    energy_acc: float = 0.0
    failure_count: int = 0

    @classmethod
    def fresh(cls, scale: ProblemScale) -> "State":
        return cls(
            clock=0.0,
            robot_mode=(IDLE,) * scale.robots,
            robot_until=(0.0,) * scale.robots,
            job_stage=(0,) * scale.jobs,
            in_flight=(None,) * scale.jobs,
        )

    @property
    def n_jobs(self) -> int:
        return len(self.job_stage)

    @property
    def n_robots(self) -> int:
        return len(self.robot_mode)

    def idle_robots(self) -> list[int]:
        return [k for k, mode in enumerate(self.robot_mode) if mode == IDLE]

    def ready_jobs(self) -> list[int]:
        return [i for i, st in enumerate(self.job_stage)
                if st < STAGE_COUNT and self.in_flight[i] is None]

    @property
    def all_complete(self) -> bool:
        return all(st >= STAGE_COUNT for st in self.job_stage)

    def evolve(self, **changes) -> "State":
        return replace(self, **changes)


@dataclass(frozen=True)
class HybridAction:
    discrete: tuple[Assignment, ...]
    continuous: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.discrete) != len(self.continuous):
            raise ValueError("one knot vector is required per assignment")


def feasible_discrete(state: State) -> list[Assignment]:
    """All (operation, workcell) pairs admissible in ``state``, ordered by (job, robot)."""
    idle = state.idle_robots()
    if not idle:
        return []
    return [Assignment(i, state.job_stage[i], k) for i in state.ready_jobs() for k in idle]


def is_decision_point(state: State) -> bool:
    if state.all_complete:
        return False
    return bool(state.ready_jobs()) and bool(state.idle_robots())


def phi_capacity(state: State, discrete: Sequence[Assignment]) -> bool:
    robots = [a.robot for a in discrete]
    if len(set(robots)) != len(robots):
        return False
    return all(0 <= k < state.n_robots and state.robot_mode[k] == IDLE for k in robots)


def phi_precedence(state: State, discrete: Sequence[Assignment]) -> bool:
    jobs = [a.job for a in discrete]
    if len(set(jobs)) != len(jobs):
        return False
    for a in discrete:
        if not 0 <= a.job < state.n_jobs:
            return False
        if state.job_stage[a.job] != a.stage or a.stage >= STAGE_COUNT:
            return False
        if state.in_flight[a.job] is not None:
            return False
    return True


class ConstraintSystem:
    """Stage templates plus the predicates that make up the feasible set."""

    def __init__(self, templates: Sequence[StageTemplate]):
        if len(templates) != STAGE_COUNT:
            raise ConfigError(f"expected {STAGE_COUNT} stage templates, got {len(templates)}")
        dims = {t.region.dim for t in templates}
        if len(dims) != 1:
            raise ConfigError("all stages must share the knot dimension")
        self.templates = tuple(templates)
        self.knot_dim = dims.pop()
        self.interior = []
        for tmpl in self.templates:
            point, radius = tmpl.region.interior_point()
            degenerate = bool(np.all(tmpl.region.lower == tmpl.region.upper))
            if not degenerate and radius <= 1e-9:
                raise ConfigError(f"stage {tmpl.name!r}: knot region has no strictly interior point")
            if degenerate and not tmpl.region.contains(point):
                raise ConfigError(f"stage {tmpl.name!r}: knot region is empty")
            self.interior.append(point)

    def continuous_region(self, stage) -> Region:
        """Linear system for a stage given by index or name."""
        if isinstance(stage, str):
            for tmpl in self.templates:
                if tmpl.name == stage:
                    return tmpl.region
            raise ConfigError(f"unknown stage template {stage!r}")
        if not isinstance(stage, (int, np.integer)) or not 0 <= stage < STAGE_COUNT:
            raise ConfigError(f"unknown stage template {stage!r}")
        return self.templates[int(stage)].region

    def template(self, stage: int) -> StageTemplate:
        return self.templates[stage]

    def evaluate_phi(self, state: State, action: HybridAction) -> bool:
        if not phi_capacity(state, action.discrete) or not phi_precedence(state, action.discrete):
            return False
        for a, x in zip(action.discrete, action.continuous):
            if not self.templates[a.stage].region.contains(x):
                return False
        return True

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.min([t.region.lower for t in self.templates], axis=0)
        hi = np.max([t.region.upper for t in self.templates], axis=0)
        return lo, hi
