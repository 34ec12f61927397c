"""Hierarchical schedulers: fix velocities first, then assign operations.

``energy_opt_plan`` and ``time_opt_plan`` pick one knot vector per stage.
``dispatch_schedule`` then runs the line with those knots, either with a
greedy Hungarian matching at every decision epoch or, for tiny instances,
with an exhaustive search over dispatch sequences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constraints import Assignment, ConstraintSystem, HybridAction, ProblemScale, State, StageTemplate
from .env import AssemblyEnv, DisturbanceConfig, EpisodeRecord, RewardWeights, duration_of
from .projection import hungarian, project_continuous

EXACT_MAX_JOBS = 6
EXACT_MAX_ROBOTS = 3


@dataclass(frozen=True)
class FixedVelocityPlan:
    name: str
    knots: tuple[np.ndarray, ...]
    durations: tuple[float, ...]

    def action_for(self, pairs) -> HybridAction:
        return HybridAction(tuple(pairs), tuple(self.knots[a.stage].copy() for a in pairs))


def _stage_energy_opt(tmpl: StageTemplate) -> np.ndarray:
    target = float(np.clip(tmpl.t_energy_opt, tmpl.t_min, tmpl.t_max))
    kappa = np.full(tmpl.region.dim, sum(tmpl.base_seg) / target)
    return project_continuous(kappa, tmpl.region).x


def _stage_time_opt(tmpl: StageTemplate) -> np.ndarray:
    return project_continuous(tmpl.region.upper.copy(), tmpl.region).x


def energy_opt_plan(system: ConstraintSystem) -> FixedVelocityPlan:
    """Uniform knots hitting ``sqrt(a/b)`` (clamped to the duration range), then projected."""
    knots = tuple(_stage_energy_opt(t) for t in system.templates)
    return FixedVelocityPlan("energy-opt", knots,
                             tuple(duration_of(k, t) for k, t in zip(knots, system.templates)))


def time_opt_plan(system: ConstraintSystem) -> FixedVelocityPlan:
    """Upper knot bounds projected into each stage region."""
    knots = tuple(_stage_time_opt(t) for t in system.templates)
    return FixedVelocityPlan("time-opt", knots,
                             tuple(duration_of(k, t) for k, t in zip(knots, system.templates)))


def greedy_pairs(state: State, plan: FixedVelocityPlan) -> list[Assignment]:
    """Match idle robots to ready operations minimising summed completion times."""
    jobs = state.ready_jobs()
    robots = state.idle_robots()
    cost = np.array([[state.clock + plan.durations[state.job_stage[i]] for _ in robots] for i in jobs])
    pairs, _ = hungarian(cost)
    return [Assignment(jobs[r], state.job_stage[jobs[r]], robots[c]) for r, c in pairs]


def _exact_sequence(env: AssemblyEnv, plan: FixedVelocityPlan) -> list[Assignment]:
    """Makespan-optimal sequence of single dispatches on a clean instance.

    Robots are interchangeable in a clean run, so only the lowest idle robot
    is branched on.  Sub-problems are memoised on the clock-relative state.
    """
    def key(s: State):
        jobs = tuple(sorted((st, round(fl[1] - s.clock, 9) if fl is not None else -1.0)
                            for st, fl in zip(s.job_stage, s.in_flight)))
        robots = tuple(sorted(round(t - s.clock, 9) if m != "idle" else 0.0
                              for m, t in zip(s.robot_mode, s.robot_until)))
        return jobs, robots

    memo: dict = {}

    def children(s: State):
        robot = s.idle_robots()[0]
        seen = set()
        for i in s.ready_jobs():
            # ready jobs at the same stage are interchangeable
            if s.job_stage[i] in seen:
                continue
            seen.add(s.job_stage[i])
            a = Assignment(i, s.job_stage[i], robot)
            nxt, d_c, _, _, _ = env.transition(s, plan.action_for([a]))
            yield a, nxt, d_c

    def cost_to_go(s: State) -> float:
        if s.all_complete:
            return 0.0
        k = key(s)
        if k not in memo:
            memo[k] = min(d_c + cost_to_go(nxt) for _, nxt, d_c in children(s))
        return memo[k]

    s = env.state
    sequence = []
    while not s.all_complete:
        target = cost_to_go(s)
        for a, nxt, d_c in children(s):
            if d_c + cost_to_go(nxt) <= target + 1e-9:
                sequence.append(a)
                s = nxt
                break
    return sequence


def dispatch_schedule(system: ConstraintSystem, scale: ProblemScale, weights: RewardWeights,
                      plan: FixedVelocityPlan, mode: str = "greedy",
                      disturb: DisturbanceConfig = DisturbanceConfig(), seed=0,
                      max_steps: int = 500) -> EpisodeRecord:
    """Execute ``plan`` through the environment and return the episode log."""
    if mode not in ("greedy", "exact"):
        raise ValueError(f"unknown dispatch mode {mode!r}")
    if mode == "exact" and (scale.jobs > EXACT_MAX_JOBS or scale.robots > EXACT_MAX_ROBOTS):
        raise ValueError(f"exact dispatch is limited to J<={EXACT_MAX_JOBS}, K<={EXACT_MAX_ROBOTS}")
    if mode == "exact" and not disturb.clean:
        raise ValueError("exact dispatch needs a disturbance-free environment")
    env = AssemblyEnv(system, scale, weights, disturb, max_steps=max_steps)
    env.reset(seed, method=f"{plan.name}/{mode}")
    if mode == "exact":
        for a in _exact_sequence(env, plan):
            env.step(plan.action_for([a]))
        return env.record
    done = False
    while not done:
        _, _, done, _ = env.step(plan.action_for(greedy_pairs(env.state, plan)))
    return env.record
