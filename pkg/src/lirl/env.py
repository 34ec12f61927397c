"""Discrete-event simulator of the robotic reducer-assembly line.

Each job runs five stages in order on any of ``K`` identical workcells.  An
operation's duration follows from its velocity-scaling knots, its energy from
a U-shaped curve ``E(t) = a/t + b t + c``.  Time advances only between
decision points, i.e. instants with at least one idle robot and one ready
operation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .constraints import (
    BROKEN,
    BUSY,
    IDLE,
    STAGE_COUNT,
    Assignment,
    ConfigError,
    ConstraintSystem,
    HybridAction,
    ProblemScale,
    State,
    StageTemplate,
    is_decision_point,
)

MAX_STEPS = 500
NOISE_LEVELS = (0.0, 0.1, 0.3, 0.5)
FAILURE_LEVELS = (0.0, 0.01, 0.03, 0.05)
ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))


def duration_of(knots, tmpl: StageTemplate) -> float:
    knots = np.asarray(knots, dtype=float)
    if np.any(knots <= 0):
        raise ValueError(f"knots must be positive, got {knots}")
    return float(np.sum(np.asarray(tmpl.base_seg) / knots))


def energy_of(t: float, tmpl: StageTemplate) -> float:
    if t <= 0:
        raise ValueError(f"duration must be positive, got {t}")
    return tmpl.energy_a / t + tmpl.energy_b * t + tmpl.energy_c


@dataclass(frozen=True)
class DisturbanceConfig:
    noise_sigma_factor: float = 0.0
    failure_prob: float = 0.0
    repair_factor: tuple[float, float] = (1.5, 3.0)
    max_failures: int = 10

    def __post_init__(self):
        if not 0.0 <= self.failure_prob <= 1.0:
            raise ConfigError(f"failure_prob must lie in [0, 1], got {self.failure_prob}")
        if self.noise_sigma_factor < 0:
            raise ConfigError("noise_sigma_factor must be non-negative")
        lo, hi = self.repair_factor
        if not 0 < lo <= hi:
            raise ConfigError(f"bad repair_factor range {self.repair_factor}")
        if self.max_failures < 0:
            raise ConfigError("max_failures must be non-negative")

    @property
    def clean(self) -> bool:
        return self.noise_sigma_factor == 0.0 and self.failure_prob == 0.0


@dataclass(frozen=True)
class RewardWeights:
    alpha: float
    makespan_norm: tuple[float, float]
    energy_norm: tuple[float, float]

    def __post_init__(self):
        if self.makespan_norm[1] <= 0 or self.energy_norm[1] <= 0:
            raise ConfigError("normalisation standard deviations must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")

    def normalized(self, makespan: float, energy: float) -> tuple[float, float]:
        (mc, sc), (me, se) = self.makespan_norm, self.energy_norm
        return (makespan - mc) / sc, (energy - me) / se

    def weighted(self, makespan: float, energy: float) -> float:
        """Weighted cost ``alpha * C + (1 - alpha) * E`` in normalised units."""
        c, e = self.normalized(makespan, energy)
        return self.alpha * c + (1.0 - self.alpha) * e

    def episode_reward(self, makespan: float, energy: float) -> float:
        return -self.weighted(makespan, energy)

    @property
    def offset(self) -> float:
        (mc, sc), (me, se) = self.makespan_norm, self.energy_norm
        return self.alpha * mc / sc + (1.0 - self.alpha) * me / se

    def increment_reward(self, d_makespan: float, d_energy: float) -> float:
        return -(self.alpha * d_makespan / self.makespan_norm[1]
                 + (1.0 - self.alpha) * d_energy / self.energy_norm[1])


@dataclass
class OperationRecord:
    """One bar of the schedule: an operation or a repair interval."""

    job: int
    stage: int
    robot: int
    start: float
    end: float
    energy: float
    kind: str = "op"  # "op" or "repair"
    nominal: float = 0.0
    knots: tuple[float, ...] = ()


@dataclass
class StepRecord:
    step: int
    clock: float
    reward: float
    d_makespan: float
    d_energy: float
    dispatched: int
    failures: int
    violation: bool = False
    near_miss: int = 0
    qp_iterations: int = 0


@dataclass
class EpisodeRecord:
    scale: str
    alpha: float
    method: str = ""
    seed: Optional[int] = None
    steps: list[StepRecord] = field(default_factory=list)
    operations: list[OperationRecord] = field(default_factory=list)
    makespan: float = 0.0
    energy: float = 0.0
    done: bool = False
    truncated: bool = False
    aborted: bool = False

    @property
    def reward(self) -> float:
        return float(math.fsum(s.reward for s in self.steps))

    @property
    def violations(self) -> int:
        return sum(1 for s in self.steps if s.violation)

    @property
    def failures(self) -> int:
        return sum(1 for op in self.operations if op.kind == "repair")

    @property
    def near_misses(self) -> int:
        return sum(s.near_miss for s in self.steps)

    @property
    def qp_iterations_mean(self) -> float:
        if not self.steps:
            return 0.0
        return float(np.mean([s.qp_iterations for s in self.steps]))

    def completed_operations(self) -> list[OperationRecord]:
        return [op for op in self.operations if op.kind == "op" and op.end <= self.makespan + 1e-9]

    def schedule_rows(self) -> list[dict]:
        """Gantt-ready event list."""
        return [
            {"job": op.job, "stage": op.stage, "robot": op.robot, "start": op.start,
             "end": op.end, "energy": op.energy, "kind": op.kind}
            for op in sorted(self.operations, key=lambda o: (o.robot, o.start))
        ]


class AssemblyEnv:
    """Reducer-assembly line with ``scale.robots`` workcells and ``scale.jobs`` jobs.

    The environment owns an episode RNG; ``transition`` is the pure kernel
    used by both ``step`` and tree searches over clean instances.
    """

    def __init__(self, system: ConstraintSystem, scale: ProblemScale, weights: RewardWeights,
                 disturb: DisturbanceConfig = DisturbanceConfig(), max_steps: int = MAX_STEPS):
        self.system = system
        self.scale = scale
        self.weights = weights
        self.disturb = disturb
        self.max_steps = max_steps
        self.state: Optional[State] = None
        self.record: Optional[EpisodeRecord] = None
        self.rng = np.random.default_rng(0)
        self.step_count = 0

    @property
    def horizon(self) -> float:
        return 2.0 * self.weights.makespan_norm[0]

    @property
    def t_scale(self) -> float:
        return max(t.t_max for t in self.system.templates)

    def reset(self, seed=None, method: str = "") -> State:
        self.rng = np.random.default_rng(seed)
        self.state = State.fresh(self.scale)
        self.step_count = 0
        self.record = EpisodeRecord(self.scale.label, self.weights.alpha, method=method,
                                    seed=seed if isinstance(seed, (int, np.integer)) else None)
        return self.state

    # ------------------------------------------------------------ kernel
    def _dispatch(self, state: State, action: HybridAction, rng, ops: list[OperationRecord]):
        mode = list(state.robot_mode)
        until = list(state.robot_until)
        flight = list(state.in_flight)
        energy = state.energy_acc
        failures = state.failure_count
        new_failures = 0
        d = self.disturb
        for a, knots in zip(action.discrete, action.continuous):
            tmpl = self.system.template(a.stage)
            t_cmd = duration_of(knots, tmpl)
            if d.failure_prob > 0 and failures < d.max_failures and rng.random() < d.failure_prob:
                factor = float(rng.uniform(*d.repair_factor))
                failures += 1
                new_failures += 1
                mode[a.robot] = BROKEN
                until[a.robot] = state.clock + factor * t_cmd
                ops.append(OperationRecord(a.job, a.stage, a.robot, state.clock, until[a.robot],
                                           0.0, kind="repair", nominal=t_cmd))
                continue
            t_real = t_cmd
            if d.noise_sigma_factor > 0:
                sigma = d.noise_sigma_factor * tmpl.t_mean
                t_real = max(t_cmd + sigma * float(rng.standard_normal()), 0.1 * tmpl.t_min)
            e = energy_of(t_cmd, tmpl)
            energy += e
            mode[a.robot] = BUSY
            until[a.robot] = state.clock + t_real
            flight[a.job] = (a.robot, until[a.robot])
            ops.append(OperationRecord(a.job, a.stage, a.robot, state.clock, until[a.robot], e,
                                       nominal=t_cmd, knots=tuple(float(k) for k in knots)))
        return state.evolve(robot_mode=tuple(mode), robot_until=tuple(until), in_flight=tuple(flight),
                            energy_acc=energy, failure_count=failures), new_failures

    @staticmethod
    def advance(state: State) -> State:
        """Run the event clock until the next decision point or completion."""
        while not state.all_complete and not is_decision_point(state):
            pending = [t for m, t in zip(state.robot_mode, state.robot_until) if m != IDLE]
            if not pending:  # cannot happen for a well-formed state
                raise RuntimeError("deadlock: no running operation and no decision available")
            t_next = min(pending)
            mode = list(state.robot_mode)
            stage = list(state.job_stage)
            flight = list(state.in_flight)
            for k, (m, t) in enumerate(zip(state.robot_mode, state.robot_until)):
                if m != IDLE and t <= t_next:
                    mode[k] = IDLE
            for i, fl in enumerate(state.in_flight):
                if fl is not None and fl[1] <= t_next:
                    stage[i] += 1
                    flight[i] = None
            state = state.evolve(clock=t_next, robot_mode=tuple(mode), job_stage=tuple(stage),
                                 in_flight=tuple(flight), makespan_acc=t_next)
        return state

    def transition(self, state: State, action: HybridAction, rng=None):
        """Dispatch ``action`` and advance; returns (state, d_makespan, d_energy, failures, ops)."""
        ops: list[OperationRecord] = []
        mid, fails = self._dispatch(state, action, rng if rng is not None else self.rng, ops)
        nxt = self.advance(mid)
        return nxt, nxt.clock - state.clock, nxt.energy_acc - state.energy_acc, fails, ops

    # ------------------------------------------------------------ episode API
    def step(self, action: HybridAction, *, near_miss: int = 0, qp_iterations: int = 0):
        """Apply a hybrid action; returns ``(state, reward, done, StepRecord)``."""
        if self.state is None or self.record is None:
            raise RuntimeError("call reset() first")
        s = self.state
        rec = self.record
        if not self.system.evaluate_phi(s, action) or not action.discrete:
            info = StepRecord(self.step_count, s.clock, 0.0, 0.0, 0.0, 0, 0, violation=True,
                              near_miss=near_miss, qp_iterations=qp_iterations)
            rec.steps.append(info)
            rec.aborted = rec.done = True
            rec.makespan, rec.energy = s.makespan_acc, s.energy_acc
            return s, 0.0, True, info
        nxt, d_c, d_e, fails, ops = self.transition(s, action)
        reward = self.weights.increment_reward(d_c, d_e)
        if self.step_count == 0:
            reward += self.weights.offset
        self.step_count += 1
        done = nxt.all_complete
        if not done and self.step_count >= self.max_steps:
            done = True
            rec.truncated = True
        info = StepRecord(self.step_count - 1, nxt.clock, reward, d_c, d_e, len(action.discrete), fails,
                          near_miss=near_miss, qp_iterations=qp_iterations)
        rec.steps.append(info)
        rec.operations.extend(ops)
        rec.makespan, rec.energy, rec.done = nxt.makespan_acc, nxt.energy_acc, done
        self.state = nxt
        return nxt, reward, done, info


def random_latent(system: ConstraintSystem, scale: ProblemScale, rng) -> np.ndarray:
    """Latent vector of the uniformly random reference policy."""
    lo, hi = system.bounding_box()
    return np.concatenate([rng.standard_normal(scale.jobs * scale.robots), rng.uniform(lo, hi)])


def run_random_episode(env: AssemblyEnv, seed, method: str = "random", mode: str = "single") -> EpisodeRecord:
    from .projection import project

    env.reset(seed, method=method)
    policy_rng = np.random.default_rng([0 if seed is None else int(seed), 7])
    done = False
    while not done:
        z = random_latent(env.system, env.scale, policy_rng)
        proj = project(env.system, env.state, z, env.scale, mode)
        _, _, done, _ = env.step(proj.action, qp_iterations=proj.qp_iterations)
    return env.record


def compute_norm_stats(system: ConstraintSystem, scale: ProblemScale, n_rollouts: int = 100,
                       seed: int = 0, disturb: DisturbanceConfig = DisturbanceConfig()):
    """Mean/std of makespan and energy under the random feasible policy."""
    if n_rollouts < 2:
        raise ValueError("n_rollouts must be >= 2")
    placeholder = RewardWeights(0.5, (0.0, 1.0), (0.0, 1.0))
    env = AssemblyEnv(system, scale, placeholder, disturb)
    seeds = np.random.SeedSequence(seed).generate_state(n_rollouts)
    makespans, energies = [], []
    for s in seeds:
        rec = run_random_episode(env, int(s))
        makespans.append(rec.makespan)
        energies.append(rec.energy)
    return {
        "makespan": [float(np.mean(makespans)), float(np.std(makespans, ddof=1))],
        "energy": [float(np.mean(energies)), float(np.std(energies, ddof=1))],
        "n_rollouts": n_rollouts,
        "seed": seed,
    }
