"""Experiment pipelines behind the command line.

Each pipeline fans seeds out to worker processes, collects their metric
rows and writes them from the parent in seed order, so ``metrics.csv`` is
byte-identical for identical configs regardless of worker scheduling.
"""

from __future__ import annotations

import json
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .agent import LIRL, MASK, AgentConfig, LatentAgent, episode_seed, run_episode, train
from .baselines import dispatch_schedule, energy_opt_plan, time_opt_plan, EXACT_MAX_JOBS, EXACT_MAX_ROBOTS
from .config import Config
from .constraints import ConfigError
from .env import AssemblyEnv, DisturbanceConfig, EpisodeRecord
from .metrics import MetricsRow, RobustnessSummary, coverage, read_metrics, summarise_rewards, write_metrics
from .neural import Mlp
from .plots import gantt_svg, gantt_table, learning_curve_svg, write_text

COMMANDS = ("train", "evaluate", "baseline", "ablation", "robustness", "report", "gantt")
EVAL_SUFFIX = "-eval"


def run_id(method: str, scale: str, alpha: float, seed: int) -> str:
    return f"{method}_{scale}_a{alpha:.1f}_s{seed}"


@dataclass
class RunResult:
    """Everything one seed's pipeline hands back to the parent."""

    run_id: str
    seed: int
    rows: list[MetricsRow] = field(default_factory=list)
    records: list[EpisodeRecord] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------- workers

def _setup(data: dict, alpha: Optional[float] = None):
    cfg = Config(data)
    weights = cfg.weights(alpha)
    return cfg, weights


def _wall(cfg: Config, ms: float) -> Optional[float]:
    return ms if cfg.experiment.get("record_wallclock", False) else None


def _agent(cfg: Config, seed: int, variant: str) -> LatentAgent:
    return LatentAgent(cfg.system, cfg.scale, AgentConfig.from_dict(cfg.agent), seed=seed,
                       variant=variant, mode=cfg.experiment.get("mode", "single"))


def _eval_rows(cfg, weights, agent, rid, method, seed, n, disturb, stream=1):
    env = AssemblyEnv(cfg.system, cfg.scale, weights, disturb,
                      max_steps=cfg.experiment.get("max_steps", 500))
    rows, recs = [], []
    for ep in range(n):
        res = run_episode(env, agent, episode_seed(seed, ep, stream=stream), method=method)
        rows.append(MetricsRow.from_record(rid, method, seed, ep, res.record, _wall(cfg, res.wallclock_ms)))
        recs.append(res.record)
    return rows, recs


def train_worker(data: dict, seed: int, variant: str, out_dir: str, alpha: Optional[float] = None) -> RunResult:
    """Train one seed, checkpointing the actor, then evaluate it noise-free."""
    cfg, weights = _setup(data, alpha)
    exp = cfg.experiment
    rid = run_id(variant, cfg.scale.label, weights.alpha, seed)
    env = AssemblyEnv(cfg.system, cfg.scale, weights, cfg.disturbance, max_steps=exp.get("max_steps", 500))
    agent = _agent(cfg, seed, variant)
    ckpt_dir = Path(out_dir) / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    result = RunResult(rid, seed)

    def on_episode(ep, res):
        result.rows.append(MetricsRow.from_record(rid, variant, seed, ep, res.record,
                                                  _wall(cfg, res.wallclock_ms)))

    def on_checkpoint(ep, ag):
        ag.actor.save(ckpt_dir / f"{rid}_ep{ep}.mlp")

    train(env, agent, exp["episodes"], seed, on_episode=on_episode, on_checkpoint=on_checkpoint,
          max_env_steps=exp.get("max_env_steps"))
    rows, recs = _eval_rows(cfg, weights, agent, rid, variant + EVAL_SUFFIX, seed,
                            exp.get("eval_episodes", 5), cfg.disturbance)
    result.rows += rows
    result.records = recs[:1]
    agent.actor.save(ckpt_dir / f"{rid}_final.mlp")
    return result


def latest_checkpoint(out_dir, rid: str) -> Path:
    ckpt_dir = Path(out_dir) / "checkpoints"
    final = ckpt_dir / f"{rid}_final.mlp"
    if final.exists():
        return final
    found = []
    for p in ckpt_dir.glob(f"{rid}_ep*.mlp"):
        m = re.fullmatch(rf"{re.escape(rid)}_ep(\d+)\.mlp", p.name)
        if m:
            found.append((int(m.group(1)), p))
    if not found:
        raise ConfigError(f"no checkpoint for run {rid} under {ckpt_dir}")
    return max(found)[1]


def load_agent(cfg: Config, seed: int, variant: str, path) -> LatentAgent:
    agent = _agent(cfg, seed, variant)
    actor = Mlp.load(path)
    if actor.sizes != agent.actor.sizes:
        raise ConfigError(f"checkpoint {path} has layer sizes {actor.sizes}, "
                          f"scale {cfg.scale.label} needs {agent.actor.sizes}")
    agent.actor.flat[...] = actor.flat
    return agent


def evaluate_worker(data: dict, seed: int, variant: str, out_dir: str, n_episodes: int,
                    disturb: Optional[DisturbanceConfig] = None, method: Optional[str] = None,
                    stream: int = 1) -> RunResult:
    cfg, weights = _setup(data)
    rid = run_id(variant, cfg.scale.label, weights.alpha, seed)
    agent = load_agent(cfg, seed, variant, latest_checkpoint(out_dir, rid))
    rows, recs = _eval_rows(cfg, weights, agent, rid, method or variant + EVAL_SUFFIX, seed, n_episodes,
                            cfg.disturbance if disturb is None else disturb, stream=stream)
    return RunResult(rid, seed, rows, recs)


def baseline_worker(data: dict, seed: int, alpha: Optional[float] = None) -> RunResult:
    cfg, weights = _setup(data, alpha)
    exp = cfg.experiment
    result = RunResult(f"baselines_{cfg.scale.label}_s{seed}", seed)
    small = cfg.scale.jobs <= EXACT_MAX_JOBS and cfg.scale.robots <= EXACT_MAX_ROBOTS
    modes = ["greedy"] + (["exact"] if small and cfg.disturbance.clean else [])
    for plan in (energy_opt_plan(cfg.system), time_opt_plan(cfg.system)):
        for mode in modes:
            method = plan.name if mode == "greedy" else f"{plan.name}-exact"
            rid = run_id(method, cfg.scale.label, weights.alpha, seed)
            t0 = time.perf_counter()
            rec = dispatch_schedule(cfg.system, cfg.scale, weights, plan, mode, cfg.disturbance,
                                    seed=episode_seed(seed, 0, stream=2), max_steps=exp.get("max_steps", 500))
            rec.method = method
            result.rows.append(MetricsRow.from_record(rid, method, seed, 0, rec,
                                                      _wall(cfg, (time.perf_counter() - t0) * 1e3)))
            result.records.append(rec)
    return result


# ---------------------------------------------------------------- orchestration

def _workers(cfg: Config, n_jobs: int) -> int:
    requested = int(cfg.experiment.get("workers", 0))
    if requested <= 0:
        requested = os.cpu_count() or 1
    return max(1, min(requested, n_jobs))


def fan_out(cfg: Config, fn: Callable, arg_list: list[tuple]) -> list[RunResult]:
    """Run ``fn(*args)`` for every entry, in parallel when more than one worker is allowed."""
    n = _workers(cfg, len(arg_list))
    if n == 1:
        return [fn(*args) for args in arg_list]
    with ProcessPoolExecutor(max_workers=n) as pool:
        futures = [pool.submit(fn, *args) for args in arg_list]
        return [f.result() for f in futures]


class Pipeline:
    """Command implementations sharing one config and output directory."""

    def __init__(self, cfg: Config, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        cfg.weights()  # fill norm stats once so workers do not recompute them
        self.data = cfg.data

    @property
    def metrics_path(self) -> Path:
        return self.out / "metrics.csv"

    def _emit(self, results: list[RunResult]) -> None:
        write_metrics(self.metrics_path, (row for r in results for row in r.rows))

    def _section(self, name: str, payload: dict) -> None:
        sections = self.out / "sections"
        sections.mkdir(exist_ok=True)
        (sections / f"{name}.json").write_text(json.dumps(payload, indent=2, sort_keys=True))

    # ------------------------------------------------------------ commands
    def train(self, variant: str = LIRL) -> list[RunResult]:
        results = fan_out(self.cfg, train_worker,
                          [(self.data, s, variant, str(self.out)) for s in self.cfg.seeds])
        self._emit(results)
        self.report()
        return results

    def evaluate(self, variant: str = LIRL) -> list[RunResult]:
        n = self.cfg.experiment.get("eval_episodes", 5)
        results = fan_out(self.cfg, evaluate_worker,
                          [(self.data, s, variant, str(self.out), n) for s in self.cfg.seeds])
        self._emit(results)
        self.report()
        return results

    def baseline(self) -> list[RunResult]:
        results = fan_out(self.cfg, baseline_worker, [(self.data, s) for s in self.cfg.seeds])
        self._emit(results)
        readings = {}
        for res in results:
            for row in res.rows:
                readings.setdefault(row.method, []).append(
                    {"seed": row.seed, "weighted_reward": row.reward, "makespan": row.makespan,
                     "energy": row.energy})
        self._section("baseline", {"objectives": readings})
        self.report()
        return results

    def ablation(self) -> dict:
        lirl = fan_out(self.cfg, train_worker, [(self.data, s, LIRL, str(self.out)) for s in self.cfg.seeds])
        mask = fan_out(self.cfg, train_worker, [(self.data, s, MASK, str(self.out)) for s in self.cfg.seeds])
        self._emit(lirl + mask)
        summary = self.report()
        a, b = summary["methods"].get(LIRL, {}), summary["methods"].get(MASK, {})
        section = {
            "lirl_convergence_episode": a.get("convergence_episode_mean"),
            "mask_convergence_episode": b.get("convergence_episode_mean"),
            "lirl_reward_std": a.get("reward_std"),
            "mask_reward_std": b.get("reward_std"),
            "mask_near_misses": sum(r.records[0].near_misses for r in mask if r.records),
        }
        self._section("ablation", section)
        self.report()
        return section

    def robustness(self) -> dict:
        """Train clean (unless checkpoints exist), then evaluate under disturbances."""
        cfg = self.cfg
        rob = cfg.experiment.get("robustness", {})
        n = int(rob.get("episodes", 30))
        tail = int(rob.get("train_tail", 30))
        clean = cfg.with_overrides(disturbance={"noise_sigma_factor": 0.0, "failure_prob": 0.0})
        try:
            for s in cfg.seeds:
                latest_checkpoint(self.out, run_id(LIRL, cfg.scale.label, cfg.alpha, s))
            train_rows = [r for r in read_metrics(self.metrics_path) if r.method == LIRL]
        except (ConfigError, FileNotFoundError):
            train_rows = [row for res in Pipeline(clean, self.out).train() for row in res.rows
                          if row.method == LIRL]
        weights = cfg.weights()
        levels, breakdown = {}, {}
        base = cfg.disturbance
        for noise in rob.get("noise_levels", [0.1]):
            dist = DisturbanceConfig(float(noise), 0.0, base.repair_factor, base.max_failures)
            levels[f"noise={noise}"] = self._robust_level(weights, train_rows, tail, n, dist, f"noise{noise}")
        for fail in rob.get("failure_levels", [0.03]):
            dist = DisturbanceConfig(0.0, float(fail), base.repair_factor, base.max_failures)
            entries, recs = self._robust_level(weights, train_rows, tail, n, dist, f"fail{fail}", keep=True)
            levels[f"failure={fail}"] = entries
            factors = [(op.end - op.start) / op.nominal for r in recs for op in r.operations
                       if op.kind == "repair"]
            breakdown[str(fail)] = {
                "episodes": len(recs),
                "max_failures_per_episode": max((r.failures for r in recs), default=0),
                "failure_cap": base.max_failures,
                "repair_factor_min": min(factors) if factors else None,
                "repair_factor_max": max(factors) if factors else None,
                "repair_factor_bounds": list(base.repair_factor),
                "total_failures": sum(r.failures for r in recs),
            }
        summary = RobustnessSummary(levels)
        section = {"coverage": summary.as_dict(), "breakdown": breakdown}
        self._section("robustness", section)
        self.report()
        return section

    def _robust_level(self, weights, train_rows, tail, n, dist, tag, keep=False):
        cfg = self.cfg
        results = fan_out(cfg, evaluate_worker,
                          [(self.data, s, LIRL, str(self.out), n, dist, f"{LIRL}-{tag}", 3)
                           for s in cfg.seeds])
        self._emit(results)
        (mc, sc), (me, se) = weights.makespan_norm, weights.energy_norm
        train_sel = []
        for s in cfg.seeds:
            rows = sorted((r for r in train_rows if r.seed == s), key=lambda r: r.episode)
            train_sel += rows[-tail:]
        gen = [row for res in results for row in res.rows]
        entries = [
            coverage([r.reward for r in train_sel], [r.reward for r in gen], "weighted"),
            coverage([(r.makespan - mc) / sc for r in train_sel], [(r.makespan - mc) / sc for r in gen], "makespan"),
            coverage([(r.energy - me) / se for r in train_sel], [(r.energy - me) / se for r in gen], "energy"),
        ]
        if keep:
            return entries, [rec for res in results for rec in res.records]
        return entries

    def report(self) -> dict:
        """Recompute summary.json (and learning curves) from metrics.csv."""
        rows = read_metrics(self.metrics_path) if self.metrics_path.exists() else []
        methods = summarise_rewards(rows)
        summary = {"config": {"scale": self.cfg.scale.label, "alpha": self.cfg.alpha,
                              "seeds": self.cfg.seeds, "episodes": self.cfg.experiment["episodes"]},
                   "methods": methods}
        sections = self.out / "sections"
        if sections.exists():
            for p in sorted(sections.glob("*.json")):
                summary[p.stem] = json.loads(p.read_text())
        (self.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        curves = {}
        for r in rows:
            if r.method in (LIRL, MASK):
                curves.setdefault(r.method, {}).setdefault(r.seed, []).append(r.reward)
        if curves:
            svg = learning_curve_svg({m: list(v.values()) for m, v in curves.items()})
            write_text(self.out / "learning_curves.svg", svg)
        return summary

    def gantt(self) -> list[Path]:
        """Gantt SVG and text table for the first seed's policy and both baselines."""
        cfg = self.cfg
        seed = cfg.seeds[0]
        weights = cfg.weights()
        written = []
        schedules = []
        rid = run_id(LIRL, cfg.scale.label, cfg.alpha, seed)
        try:
            res = evaluate_worker(self.data, seed, LIRL, str(self.out), 1)
            schedules.append((rid, res.records[0]))
        except ConfigError:
            pass
        for plan in (energy_opt_plan(cfg.system), time_opt_plan(cfg.system)):
            rec = dispatch_schedule(cfg.system, cfg.scale, weights, plan, "greedy", cfg.disturbance,
                                    seed=episode_seed(seed, 0, stream=2),
                                    max_steps=cfg.experiment.get("max_steps", 500))
            schedules.append((run_id(plan.name, cfg.scale.label, weights.alpha, seed), rec))
        for name, rec in schedules:
            written.append(write_text(self.out / f"gantt_{name}.svg", gantt_svg(rec)))
            write_text(self.out / f"gantt_{name}.txt", gantt_table(rec))
        return written

    def run(self, command: str):
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
        return getattr(self, command)()
