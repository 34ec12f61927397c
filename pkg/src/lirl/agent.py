"""Latent-action DDPG agent and its invalid-action-masking ablation.

The actor emits a latent ``z``; a state-conditioned map turns it into an
executable hybrid action.  For the LIRL agent that map is the projection;
for the ablation it is a masked argmax plus componentwise clamping.  The
critic always scores the pre-projection latent, so both variants learn in
the same space with the same features.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .constraints import STAGE_COUNT, Assignment, BROKEN, ConstraintSystem, HybridAction, IDLE, \
    ProblemScale, State, feasible_discrete
from .env import AssemblyEnv, EpisodeRecord
from .neural import Adam, Mlp, TrainingDivergence, clip_by_global_norm, soft_update
from .projection import SINGLE, decode, latent_size, project

LIRL = "lirl"
MASK = "mask"
ONE_HOT_MAX_JOBS = 20
LOGIT_SCALE = 3.0


def feature_size(scale: ProblemScale) -> int:
    per_job = STAGE_COUNT + 2 if scale.jobs <= ONE_HOT_MAX_JOBS else 2
    return 2 * scale.robots + per_job * scale.jobs + 2


def encode(state: State, scale: ProblemScale, t_scale: float, horizon: float) -> np.ndarray:
    """State features in [-1, 1]: robots, jobs, completion fraction, clock."""
    K, J = scale.robots, scale.jobs
    out = np.zeros(feature_size(scale))
    for k in range(K):
        if state.robot_mode[k] != IDLE:
            out[k] = min(max(state.robot_until[k] - state.clock, 0.0) / t_scale, 1.0)
        out[K + k] = 1.0 if state.robot_mode[k] == BROKEN else 0.0
    pos = 2 * K
    one_hot = J <= ONE_HOT_MAX_JOBS
    for i in range(J):
        st = state.job_stage[i]
        if one_hot:
            out[pos + st] = 1.0
            out[pos + STAGE_COUNT + 1] = 1.0 if state.in_flight[i] is not None else 0.0
            pos += STAGE_COUNT + 2
        else:
            out[pos] = st / STAGE_COUNT
            out[pos + 1] = 1.0 if state.in_flight[i] is not None else 0.0
            pos += 2
    out[pos] = sum(1 for st in state.job_stage if st >= STAGE_COUNT) / J
    out[pos + 1] = min(state.clock / horizon, 1.0)
    return out


class ReplayBuffer:
    """Fixed-capacity ring buffer of (s, z, r, s', done) with uniform sampling."""

    def __init__(self, capacity: int, feat_dim: int, latent_dim: int, dtype=np.float32):
        self.capacity = capacity
        self.s = np.zeros((capacity, feat_dim), dtype=dtype)
        self.z = np.zeros((capacity, latent_dim), dtype=dtype)
        self.r = np.zeros((capacity, 1), dtype=dtype)
        self.s2 = np.zeros((capacity, feat_dim), dtype=dtype)
        self.d = np.zeros((capacity, 1), dtype=dtype)
        self.size = 0
        self._next = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, z, r, s2, done) -> None:
        i = self._next
        self.s[i], self.z[i], self.r[i, 0], self.s2[i], self.d[i, 0] = s, z, r, s2, float(done)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng):
        idx = rng.integers(0, self.size, size=batch)
        return self.s[idx], self.z[idx], self.r[idx], self.s2[idx], self.d[idx]


@dataclass
class AgentConfig:
    hidden: tuple[int, ...] = (128, 128)
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 64
    buffer_capacity: int = 100_000
    warmup: int = 500
    updates_per_step: int = 20
    noise_start: float = 0.3
    noise_end: float = 0.05
    noise_decay_episodes: int = 200
    grad_clip: float = 10.0
    checkpoint_every: int = 10
    strip_offset: bool = True
    twin_critic: bool = False
    target_noise: float = 0.0
    target_noise_clip: float = 0.5
    dtype: str = "float32"

    @classmethod
    def from_dict(cls, data: dict) -> "AgentConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if "hidden" in known:
            known["hidden"] = tuple(known["hidden"])
        return cls(**known)

    def noise_at(self, episode: int) -> float:
        frac = min(episode / max(self.noise_decay_episodes, 1), 1.0)
        return self.noise_start + (self.noise_end - self.noise_start) * frac


class LatentAgent:
    """Deterministic actor over the latent space with a Q(s, z) critic."""

    def __init__(self, system: ConstraintSystem, scale: ProblemScale, cfg: AgentConfig,
                 seed: int = 0, variant: str = LIRL, mode: str = SINGLE):
        if variant not in (LIRL, MASK):
            raise ValueError(f"unknown agent variant {variant!r}")
        self.system, self.scale, self.cfg = system, scale, cfg
        self.variant, self.mode = variant, mode
        self.rng = np.random.default_rng([seed, 1])
        init_rng = np.random.default_rng([seed, 2])
        dtype = np.dtype(cfg.dtype)
        self.feat_dim = feature_size(scale)
        self.latent_dim = latent_size(scale, system.knot_dim)
        self.actor = Mlp([self.feat_dim, *cfg.hidden, self.latent_dim], rng=init_rng, dtype=dtype,
                         out_scale=0.1)
        self.critic = Mlp([self.feat_dim + self.latent_dim, *cfg.hidden, 1], rng=init_rng, dtype=dtype)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(self.actor.flat, lr=cfg.actor_lr)
        self.critic_opt = Adam(self.critic.flat, lr=cfg.critic_lr)
        # optional second critic; the target takes the smaller of the two estimates
        self.critic2 = self.critic2_target = self.critic2_opt = None
        if cfg.twin_critic:
            self.critic2 = Mlp(self.critic.sizes, rng=init_rng, dtype=dtype)
            self.critic2_target = self.critic2.copy()
            self.critic2_opt = Adam(self.critic2.flat, lr=cfg.critic_lr)
        self.buffer = ReplayBuffer(cfg.buffer_capacity, self.feat_dim, self.latent_dim, dtype=dtype)
        # latent = offset + spread * tanh(raw): logits around 0, knots around the box centre
        lo, hi = system.bounding_box()
        n_logits = scale.jobs * scale.robots
        self.offset = np.concatenate([np.zeros(n_logits), 0.5 * (lo + hi)]).astype(dtype)
        self.spread = np.concatenate([np.full(n_logits, LOGIT_SCALE), 0.6 * (hi - lo)]).astype(dtype)
        self.gradient_steps = 0
        self._repair_centres = [self._repair_centre(t.region, i) for i, t in enumerate(system.templates)]

    def _repair_centre(self, region, stage):
        c = region.center
        if region.contains(c) and np.all(region.A @ c < region.b):
            return c
        return self.system.interior[stage]

    # ---------------------------------------------------------- acting
    def latent(self, features, noise_sigma: float = 0.0, rng=None) -> np.ndarray:
        raw = self.actor.forward(features)
        z = self.offset + self.spread * np.tanh(raw)
        if noise_sigma > 0:
            rng = self.rng if rng is None else rng
            z = z + noise_sigma * rng.standard_normal(z.shape)
        return z.astype(np.float64)

    def to_action(self, state: State, z) -> tuple[HybridAction, int, int]:
        """Executable action for ``z``; returns (action, qp_iterations, near_misses)."""
        if self.variant == LIRL:
            proj = project(self.system, state, z, self.scale, self.mode)
            return proj.action, proj.qp_iterations, 0
        return act_masked(self.system, state, z, self.scale, self._repair_centres)

    # ---------------------------------------------------------- learning
    def _critic_input(self, s, z):
        return np.concatenate([s, (z - self.offset) / self.spread], axis=1)

    def _fit_critic(self, critic: Mlp, opt: Adam, x, y) -> float:
        q, cache = critic.trace(x)
        err = q - y
        loss = float(np.dot(err[:, 0], err[:, 0])) / x.shape[0]
        if not math.isfinite(loss):
            raise TrainingDivergence(f"critic loss became {loss}")
        grads, _ = critic.backward(cache, err * (2.0 / x.shape[0]), input_grad=False)
        grads, _ = clip_by_global_norm(grads, self.cfg.grad_clip)
        opt.step(grads)
        return loss

    def update(self) -> tuple[float, float]:
        """One critic step then one actor step on a uniform minibatch.

        Returns (critic loss, actor objective).
        """
        cfg = self.cfg
        s, z, r, s2, d = self.buffer.sample(cfg.batch_size, self.rng)
        n = s.shape[0]
        # critic: y = r + gamma (1 - done) Q'(s', mu'(s'))
        u2 = np.tanh(self.actor_target.forward(s2))
        if cfg.target_noise > 0:
            eps = cfg.target_noise * self.rng.standard_normal(u2.shape)
            u2 = u2 + np.clip(eps, -cfg.target_noise_clip, cfg.target_noise_clip).astype(u2.dtype)
        x2 = np.concatenate([s2, u2], axis=1)
        q2 = self.critic_target.forward(x2)
        if self.critic2 is not None:
            q2 = np.minimum(q2, self.critic2_target.forward(x2))
        y = r + cfg.gamma * (1.0 - d) * q2
        x = self._critic_input(s, z)
        critic_loss = self._fit_critic(self.critic, self.critic_opt, x, y)
        if self.critic2 is not None:
            self._fit_critic(self.critic2, self.critic2_opt, x, y)

        # actor: ascend Q(s, mu(s))
        raw, a_cache = self.actor.trace(s)
        squash = np.tanh(raw)
        z_mu = self.offset + self.spread * squash
        q_mu, c_cache = self.critic.trace(self._critic_input(s, z_mu))
        _, g_in = self.critic.backward(c_cache, np.full_like(q_mu, -1.0 / n), param_grads=False)
        g_z = g_in[:, self.feat_dim:]  # d/d(normalised z); the spread cancels
        g_raw = g_z * (1.0 - squash * squash)
        a_grads, _ = self.actor.backward(a_cache, g_raw, input_grad=False)
        a_grads, _ = clip_by_global_norm(a_grads, cfg.grad_clip)
        self.actor_opt.step(a_grads)

        soft_update(self.actor_target, self.actor, cfg.tau)
        soft_update(self.critic_target, self.critic, cfg.tau)
        if self.critic2 is not None:
            soft_update(self.critic2_target, self.critic2, cfg.tau)
        self.gradient_steps += 1
        return critic_loss, -float(q_mu.sum()) / n


def act_masked(system: ConstraintSystem, state: State, z, scale: ProblemScale,
               centres=None) -> tuple[HybridAction, int, int]:
    """Masked-argmax assignment with clamped knots (no QP).

    Coupling rows left violated by clamping are repaired by shrinking the
    knots toward the stage centre; each repair counts as a near-miss.
    """
    u, v = decode(z, scale, system.knot_dim)
    masked = np.full(u.shape, -np.inf)
    for a in feasible_discrete(state):
        masked[a.job, a.robot] = u[a.job, a.robot]
    flat = int(np.argmax(masked))  # first maximum = lowest (job, robot)
    job, robot = divmod(flat, scale.robots)
    if not np.isfinite(masked[job, robot]):
        raise ValueError("no admissible assignment in this state")
    stage = state.job_stage[job]
    region = system.continuous_region(stage)
    x = np.clip(v, region.lower, region.upper)
    near_miss = 0
    if region.A.size and np.any(region.A @ x > region.b):
        c = centres[stage] if centres is not None else region.center
        d = x - c
        slack = region.b - region.A @ c
        growth = region.A @ d
        ratios = [s / g for s, g in zip(slack, growth) if g > 0]
        x = c + min(1.0, min(ratios)) * d
        # guard round-off so the repaired point is inside
        while np.any(region.A @ x > region.b):
            x = c + 0.999999 * (x - c)
        near_miss = 1
    return HybridAction((Assignment(job, stage, robot),), (x,)), 0, near_miss


# -------------------------------------------------------------------- loops

@dataclass
class EpisodeResult:
    record: EpisodeRecord
    gradient_steps: int
    wallclock_ms: float
    noise: float


def run_episode(env: AssemblyEnv, agent: LatentAgent, seed, *, noise_sigma: float = 0.0,
                learn: bool = False, method: Optional[str] = None) -> EpisodeResult:
    """One episode; with ``learn`` transitions are stored and updates run."""
    t0 = time.perf_counter()
    state = env.reset(seed, method=method or agent.variant)
    t_scale, horizon = env.t_scale, env.horizon
    feats = encode(state, env.scale, t_scale, horizon)
    steps_before = agent.gradient_steps
    done = False
    while not done:
        z = agent.latent(feats, noise_sigma)
        action, iters, near = agent.to_action(state, z)
        state, reward, done, info = env.step(action, near_miss=near, qp_iterations=iters)
        feats2 = encode(state, env.scale, t_scale, horizon)
        if learn:
            if agent.cfg.strip_offset and info.step == 0:
                reward -= env.weights.offset
            agent.buffer.add(feats, z, reward, feats2, done)
            if len(agent.buffer) > agent.cfg.warmup:
                for _ in range(agent.cfg.updates_per_step):
                    agent.update()
        feats = feats2
    return EpisodeResult(env.record, agent.gradient_steps - steps_before,
                         (time.perf_counter() - t0) * 1e3, noise_sigma)


def episode_seed(base: int, episode: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([base, stream, episode]).generate_state(1)[0])


def train(env: AssemblyEnv, agent: LatentAgent, episodes: int, seed: int,
          on_episode: Optional[Callable[[int, EpisodeResult], None]] = None,
          on_checkpoint: Optional[Callable[[int, LatentAgent], None]] = None,
          max_env_steps: Optional[int] = None) -> list[EpisodeResult]:
    """Train for ``episodes`` episodes with linearly decaying latent noise.

    ``max_env_steps`` optionally caps the total number of environment steps;
    training stops after the episode that reaches it.
    """
    results = []
    env_steps = 0
    for ep in range(episodes):
        if max_env_steps is not None and env_steps >= max_env_steps:
            break
        res = run_episode(env, agent, episode_seed(seed, ep), noise_sigma=agent.cfg.noise_at(ep),
                          learn=True)
        results.append(res)
        env_steps += len(res.record.steps)
        if on_episode is not None:
            on_episode(ep, res)
        if on_checkpoint is not None and (ep + 1) % agent.cfg.checkpoint_every == 0:
            on_checkpoint(ep + 1, agent)
    return results


def evaluate(env: AssemblyEnv, agent: LatentAgent, n_episodes: int, seed: int) -> dict:
    """Noise-free rollouts; mean/std of reward, makespan, energy and violations."""
    recs = [run_episode(env, agent, episode_seed(seed, ep, stream=1)).record for ep in range(n_episodes)]
    out = {"episodes": n_episodes}
    for key in ("reward", "makespan", "energy", "violations"):
        vals = np.array([getattr(r, key) for r in recs], dtype=float)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if n_episodes > 1 else 0.0}
    out["records"] = recs
    return out
