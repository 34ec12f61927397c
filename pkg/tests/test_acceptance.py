"""Acceptance checks, one printed PASS/FAIL line per criterion.

The training-based criteria (6 to 11) share one campaign: LIRL on J10R3 at
three reward weights and five seeds, the masked ablation, both baselines,
the robustness sweep and a repeated run for determinism.  The campaign is
expensive on a single core.  Set ``LIRL_ACCEPTANCE_DIR`` to keep its outputs
between sessions; results are keyed by a hash of the package sources, so
any code or config change triggers a fresh campaign.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

import lirl
from lirl import cli
from lirl.agent import LIRL, MASK
from lirl.baselines import dispatch_schedule, energy_opt_plan, time_opt_plan
from lirl.config import Config
from lirl.constraints import ProblemScale, Region
from lirl.env import AssemblyEnv, DisturbanceConfig, RewardWeights, run_random_episode
from lirl.metrics import read_metrics, summarise_rewards
from lirl.neural import Mlp
from lirl.projection import hungarian, latent_size, project, project_continuous
from lirl.runner import EVAL_SUFFIX, Pipeline

ALPHAS = (0.1, 0.5, 0.9)
SEEDS = [0, 1, 2, 3, 4]
EPISODES = 300
ROBUST_ALPHA = 0.5
ABLATION_ALPHA = 0.5
RUNTIME_BUDGET_S = 30 * 60


def report(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nCRITERION {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


# ---------------------------------------------------------------- fast criteria

def test_criterion_01_feasibility(capsys):
    cfg = Config.reference()
    system, scale = cfg.system, ProblemScale.parse("J10R3")
    env = AssemblyEnv(system, scale, cfg.weights(), DisturbanceConfig(0.1, 0.03))
    rng = np.random.default_rng(2024)
    n_latent = latent_size(scale, system.knot_dim)
    lo, hi = system.bounding_box()
    t0 = time.perf_counter()
    checked = bad = 0
    worst = 0.0
    while checked < 100_000:
        state = env.reset(int(rng.integers(1 << 31)))
        for _ in range(int(rng.integers(0, 50))):
            state, _, done, _ = env.step(project(system, state, rng.normal(size=n_latent) * 2, scale).action)
            if done:
                break
        if state.all_complete:
            continue
        for _ in range(50):
            z = rng.normal(size=n_latent) * rng.uniform(0.1, 5.0)
            z[-system.knot_dim:] = rng.uniform(lo - 2.0, hi + 2.0)
            proj = project(system, state, z, scale)
            act = proj.action
            worst = max([worst, proj.kkt_residual] +
                        [system.continuous_region(a.stage).max_violation(x)
                         for a, x in zip(act.discrete, act.continuous)])
            if not system.evaluate_phi(state, act):
                bad += 1
            checked += 1
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and worst <= 1e-6 and elapsed < 60
    report(capsys, 1, ok, f"{checked} pairs, {bad} infeasible, worst residual {worst:.2e}, {elapsed:.1f} s")
    assert ok


def _brute_force(cost):
    n = cost.shape[0]
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def test_criterion_02_assignment_oracle(capsys):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    mismatches = 0
    for trial in range(1000):
        n = 2 + trial % 6
        cost = rng.integers(0, 100, size=(n, n)).astype(float)  # exact sums in floating point
        _, total = hungarian(cost)
        mismatches += total != _brute_force(cost)
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 10
    report(capsys, 2, ok, f"1000 matrices 2x2..7x7, {mismatches} mismatches, {elapsed:.2f} s")
    assert ok


def _random_region(rng, dim=3, rows=None):
    lo = rng.uniform(0.2, 1.0, size=dim)
    hi = lo + rng.uniform(0.5, 2.0, size=dim)
    m = int(rng.integers(0, 4)) if rows is None else rows
    A = rng.normal(size=(m, dim))
    b = A @ (0.5 * (lo + hi)) + rng.uniform(0.05, 1.0, size=m)
    return Region(lo, hi, A, b)


def _half_space_closed_form(v, a, b):
    gap = a @ v - b
    return v if gap <= 0 else v - gap / (a @ a) * a


def test_criterion_03_qp_oracle(capsys):
    rng = np.random.default_rng(11)
    worst_kkt = 0.0
    for _ in range(1000):
        r = _random_region(rng)
        worst_kkt = max(worst_kkt, project_continuous(rng.uniform(-1, 4, size=3), r).kkt_residual)
    worst_box = worst_half = 0.0
    for _ in range(500):
        r = _random_region(rng, rows=0)
        v = rng.uniform(-1, 4, size=3)
        worst_box = max(worst_box, float(np.max(np.abs(project_continuous(v, r).x - np.clip(v, r.lower, r.upper)))))
        # a single half-space inside a box too wide to ever bind
        a = rng.normal(size=3)
        b = float(rng.normal())
        hs = Region(np.full(3, -1e6), np.full(3, 1e6), a[None, :], np.array([b]))
        v = rng.normal(size=3) * 3
        worst_half = max(worst_half, float(np.max(np.abs(project_continuous(v, hs).x - _half_space_closed_form(v, a, b)))))
    worst_ratio = 0.0
    for _ in range(10_000):
        r = _random_region(rng)
        v1, v2 = rng.uniform(-1, 4, size=(2, 3))
        d = np.linalg.norm(v1 - v2)
        x1, x2 = project_continuous(v1, r).x, project_continuous(v2, r).x
        worst_ratio = max(worst_ratio, np.linalg.norm(x1 - x2) / d)
    ok = worst_kkt <= 1e-6 and worst_box <= 1e-8 and worst_half <= 1e-8 and worst_ratio <= 1 + 1e-9
    report(capsys, 3, ok, f"max KKT {worst_kkt:.1e}, box err {worst_box:.1e}, half-space err {worst_half:.1e}, "
                          f"max ratio {worst_ratio:.12f}")
    assert ok


def test_criterion_04_gradient_check(capsys):
    rng = np.random.default_rng(3)
    net = Mlp([6, 9, 7, 4], rng=rng, dtype=np.float64)
    worst = 0.0
    layers_seen = set()
    h = 1e-6
    for probe in range(100):
        x = rng.normal(size=(3, 6))
        w = rng.normal(size=(3, 4))
        _, cache = net.trace(x)
        grad, g_in = net.backward(cache, w)
        layer = probe % net.n_layers
        layers_seen.add(layer)
        for which in (2 * layer, 2 * layer + 1):
            view = net.params[which]
            idx = tuple(int(rng.integers(s)) for s in view.shape)
            old = view[idx]
            view[idx] = old + h
            up = float(np.sum(w * net.forward(x)))
            view[idx] = old - h
            down = float(np.sum(w * net.forward(x)))
            view[idx] = old
            fd = (up - down) / (2 * h)
            an = net.grad_views(grad)[which][idx]
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-7))
        i, j = int(rng.integers(3)), int(rng.integers(6))
        xp, xm = x.copy(), x.copy()
        xp[i, j] += h
        xm[i, j] -= h
        fd = (np.sum(w * net.forward(xp)) - np.sum(w * net.forward(xm))) / (2 * h)
        worst = max(worst, abs(g_in[i, j] - fd) / max(abs(g_in[i, j]), abs(fd), 1e-7))
    ok = worst <= 1e-4 and layers_seen == set(range(net.n_layers))
    report(capsys, 4, ok, f"100 probes over {net.n_layers} layers, worst relative error {worst:.2e}")
    assert ok


def _invariants_hold(rec) -> bool:
    ops = [o for o in rec.operations if o.kind == "op"]
    by_job: dict = {}
    for o in ops:
        by_job.setdefault(o.job, []).append(o)
    for job_ops in by_job.values():
        job_ops.sort(key=lambda o: o.stage)
        if [o.stage for o in job_ops] != list(range(5)):
            return False
        if any(b.start < a.end - 1e-12 for a, b in zip(job_ops, job_ops[1:])):
            return False
    lanes: dict = {}
    for o in rec.operations:
        lanes.setdefault(o.robot, []).append((o.start, o.end))
    for iv in lanes.values():
        iv.sort()
        if any(s1 < e0 - 1e-12 for (_, e0), (s1, _) in zip(iv, iv[1:])):
            return False
    return True


def test_criterion_05_conservation(capsys):
    cfg = Config.reference()
    weights = cfg.weights()
    (mc, sc), (me, se) = weights.makespan_norm, weights.energy_norm
    env = AssemblyEnv(cfg.system, ProblemScale.parse("J10R3"), weights, DisturbanceConfig(0.1, 0.03))
    worst = 0.0
    broken = 0
    for seed in range(100):
        rec = run_random_episode(env, seed)
        total = math.fsum(s.reward for s in rec.steps)
        target = -(weights.alpha * (rec.makespan - mc) / sc + (1 - weights.alpha) * (rec.energy - me) / se)
        worst = max(worst, abs(total - target))
        broken += not (rec.done and _invariants_hold(rec))
    ok = worst <= 1e-9 and broken == 0
    report(capsys, 5, ok, f"100 episodes, max |sum r - R| {worst:.1e}, {broken} invariant breaches")
    assert ok


def test_criterion_12_exact_vs_greedy(capsys):
    base = Config.reference()
    scale = ProblemScale.parse("J3R2")
    rng = np.random.default_rng(12)
    worse = 0
    for trial in range(20):
        alpha = float(rng.choice([0.1, 0.3, 0.5, 0.7, 0.9]))
        weights = RewardWeights(alpha, (float(rng.uniform(40, 70)), float(rng.uniform(2, 6))),
                                (float(rng.uniform(900, 1200)), float(rng.uniform(20, 60))))
        for plan in (energy_opt_plan(base.system), time_opt_plan(base.system)):
            greedy = dispatch_schedule(base.system, scale, weights, plan, "greedy")
            exact = dispatch_schedule(base.system, scale, weights, plan, "exact")
            worse += weights.weighted(exact.makespan, exact.energy) > \
                weights.weighted(greedy.makespan, greedy.energy) + 1e-12
    ok = worse == 0
    report(capsys, 12, ok, f"20 configurations x 2 plans, exact worse than greedy in {worse}")
    assert ok


# ---------------------------------------------------------------- training campaign

def _source_key() -> str:
    digest = hashlib.sha256()
    pkg = Path(lirl.__file__).parent
    for p in sorted(pkg.rglob("*")):
        if p.suffix in (".py", ".json"):
            digest.update(p.relative_to(pkg).as_posix().encode())
            digest.update(p.read_bytes())
    digest.update(repr((ALPHAS, SEEDS, EPISODES, ROBUST_ALPHA, ABLATION_ALPHA)).encode())
    return digest.hexdigest()[:16]


def _config(alpha, seeds=SEEDS) -> Config:
    return Config.reference(alpha=alpha, seeds=list(seeds), episodes=EPISODES, workers=0)


def _stage(root: Path, name: str, fn) -> dict:
    """Run ``fn`` once per campaign directory; remember its wall time."""
    marker = root / f"{name}.done.json"
    if marker.exists():
        return json.loads(marker.read_text())
    t0 = time.perf_counter()
    payload = fn() or {}
    payload["seconds"] = time.perf_counter() - t0
    marker.write_text(json.dumps(payload))
    return payload


@pytest.fixture(scope="session")
def campaign(tmp_path_factory):
    env_root = os.environ.get("LIRL_ACCEPTANCE_DIR")
    root = (Path(env_root) if env_root else tmp_path_factory.mktemp("acceptance")) / _source_key()
    root.mkdir(parents=True, exist_ok=True)
    timings = {}
    for alpha in ALPHAS:
        pipe = Pipeline(_config(alpha), root / f"a{alpha}")
        timings[f"train{alpha}"] = _stage(root, f"train{alpha}", lambda: pipe.train(LIRL) and None)["seconds"]
        timings[f"baseline{alpha}"] = _stage(root, f"baseline{alpha}", lambda: pipe.baseline() and None)["seconds"]
    abl = Pipeline(_config(ABLATION_ALPHA), root / f"a{ABLATION_ALPHA}")
    _stage(root, "mask", lambda: abl.train(MASK) and None)
    rob = Pipeline(_config(ROBUST_ALPHA), root / f"a{ROBUST_ALPHA}")
    robustness = _stage(root, "robustness", rob.robustness)

    def determinism():
        cfg_path = root / "determinism.json"
        cfg_path.write_text(json.dumps({"experiment": {"alpha": ROBUST_ALPHA, "seeds": [0], "episodes": EPISODES}}))
        codes = [cli.main(["train", "--config", str(cfg_path), "--out", str(root / d)]) for d in ("det1", "det2")]
        return {"codes": codes}
    det = _stage(root, "determinism", determinism)
    return {"root": root, "timings": timings, "robustness": robustness, "determinism": det}


def _rows(campaign, alpha):
    return read_metrics(campaign["root"] / f"a{alpha}" / "metrics.csv")


def converged_reward(rows, seed) -> float:
    """Noise-free evaluation reward of the trained policy for one seed."""
    vals = [r.reward for r in rows if r.method == LIRL + EVAL_SUFFIX and r.seed == seed]
    return float(np.mean(vals))


def _lirl_levels(campaign):
    out = {}
    for alpha in ALPHAS:
        rows = _rows(campaign, alpha)
        out[alpha] = np.array([converged_reward(rows, s) for s in SEEDS])
    return out


def _baseline_levels(campaign):
    out = {}
    for alpha in ALPHAS:
        rows = _rows(campaign, alpha)
        out[alpha] = {m: float(np.mean([r.reward for r in rows if r.method == m]))
                      for m in ("energy-opt", "time-opt")}
    return out


@pytest.mark.slow
def test_criterion_06_zero_training_violations(campaign, capsys):
    total = episodes = 0
    for alpha in ALPHAS:
        rows = [r for r in _rows(campaign, alpha) if r.method == LIRL]
        total += sum(r.violations for r in rows)
        episodes += len(rows)
    ok = total == 0 and episodes == len(ALPHAS) * len(SEEDS) * EPISODES
    report(capsys, 6, ok, f"{episodes} projection-agent training episodes, {total} violations")
    assert ok


@pytest.mark.slow
def test_criterion_07_cross_opt_dominance(campaign, capsys):
    lirl_levels, base = _lirl_levels(campaign), _baseline_levels(campaign)
    parts, dominance = [], True
    for alpha in ALPHAS:
        mean = float(lirl_levels[alpha].mean())
        best_base = max(base[alpha].values())
        ok_alpha = mean >= best_base
        if alpha == 0.5:
            se = float(lirl_levels[alpha].std(ddof=1) / math.sqrt(len(SEEDS)))
            ok_alpha = ok_alpha and mean - best_base > se
        dominance &= ok_alpha
        parts.append(f"a={alpha}: LIRL {mean:.3f} vs EO {base[alpha]['energy-opt']:.3f} / "
                     f"TO {base[alpha]['time-opt']:.3f}")
    runtime = sum(campaign["timings"].values())
    fast = runtime < RUNTIME_BUDGET_S
    report(capsys, 7, dominance and fast,
           "; ".join(parts) + f"; dominance {'PASS' if dominance else 'FAIL'}; "
           f"runtime {runtime / 60:.1f} min on {os.cpu_count()} CPU(s) "
           f"({'within' if fast else 'over'} the 30 min budget)")
    assert dominance, "LIRL does not dominate both baselines"
    assert fast, f"training and baselines took {runtime / 60:.1f} min"


@pytest.mark.slow
def test_criterion_08_weight_robustness(campaign, capsys):
    lirl_levels, base = _lirl_levels(campaign), _baseline_levels(campaign)
    means = [float(lirl_levels[a].mean()) for a in ALPHAS]
    lirl_range = max(means) - min(means)
    ranges = {m: max(base[a][m] for a in ALPHAS) - min(base[a][m] for a in ALPHAS)
              for m in ("energy-opt", "time-opt")}
    ok = all(lirl_range < r for r in ranges.values())
    report(capsys, 8, ok, f"reward range over alpha: LIRL {lirl_range:.3f}, EO {ranges['energy-opt']:.3f}, "
                          f"TO {ranges['time-opt']:.3f}")
    assert ok


@pytest.mark.slow
def test_criterion_09_ablation_speedup(campaign, capsys):
    rows = [r for r in _rows(campaign, ABLATION_ALPHA) if r.method in (LIRL, MASK)]
    summary = summarise_rewards(rows)
    a, b = summary[LIRL], summary[MASK]
    faster = a["convergence_episode_mean"] <= 0.5 * b["convergence_episode_mean"]
    steadier = a["reward_std"] <= b["reward_std"]
    ok = faster and steadier
    report(capsys, 9, ok, f"convergence episode LIRL {a['convergence_episode_mean']:.1f} vs mask "
                          f"{b['convergence_episode_mean']:.1f}; post-convergence std LIRL {a['reward_std']:.3f} "
                          f"vs mask {b['reward_std']:.3f}")
    assert ok


@pytest.mark.slow
def test_criterion_10_robustness(campaign, capsys):
    section = campaign["robustness"]
    noise = section["coverage"]["noise=0.1"]["weighted"]
    fail = section["breakdown"]["0.03"]
    cover_ok = noise["coverage"] >= 0.8 and noise["mean_gap"] <= 0.15
    cap_ok = (fail["max_failures_per_episode"] <= fail["failure_cap"] and fail["total_failures"] > 0
              and fail["repair_factor_min"] >= fail["repair_factor_bounds"][0]
              and fail["repair_factor_max"] <= fail["repair_factor_bounds"][1])
    ok = cover_ok and cap_ok
    report(capsys, 10, ok, f"noise 0.1: coverage {noise['coverage']:.3f}, gap {noise['mean_gap']:.3f}; "
                           f"failures 3%: max {fail['max_failures_per_episode']}/episode (cap "
                           f"{fail['failure_cap']}), repair factor [{fail['repair_factor_min']:.3f}, "
                           f"{fail['repair_factor_max']:.3f}]")
    assert ok


@pytest.mark.slow
def test_criterion_11_determinism(campaign, capsys):
    root = campaign["root"]
    a, b = (root / d / "metrics.csv" for d in ("det1", "det2"))
    same = campaign["determinism"]["codes"] == [0, 0] and a.read_bytes() == b.read_bytes()
    n = len(read_metrics(a))
    report(capsys, 11, same, f"two {EPISODES}-episode runs, {n} rows each, metrics.csv "
                             f"{'bit-identical' if same else 'differs'}")
    assert same
