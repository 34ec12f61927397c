"""JSON experiment configuration: stage templates, scales, norms, hyperparameters.

Configs are merged over the shipped reference file, so a user config only
needs the keys it overrides.  Validation errors carry the line of the
offending key when the source text is available.
"""

from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .constraints import ConfigError, ConstraintSystem, ProblemScale, Region, StageTemplate
from .env import ALPHA_GRID, DisturbanceConfig, RewardWeights

SCHEMA_VERSION = 1


def reference_text() -> str:
    return resources.files("lirl").joinpath("data/reference.json").read_text()


def reference_config() -> dict:
    return json.loads(reference_text())


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _line_of(text: Optional[str], key: str) -> str:
    if not text:
        return ""
    match = re.search(rf'"{re.escape(key)}"\s*:', text)
    if not match:
        return ""
    return f"line {text.count(chr(10), 0, match.start()) + 1}: "


class Config:
    """Validated view over a config dictionary."""

    def __init__(self, data: dict, source: Optional[str] = None, path: Optional[str] = None):
        self.data = data
        self._source = source
        self.path = path
        self._validate()

    # ------------------------------------------------------------ loading
    @classmethod
    def load(cls, path) -> "Config":
        path = Path(path)
        text = path.read_text()
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: line 1: top level must be a JSON object")
        return cls(_merge(reference_config(), user), source=text, path=str(path))

    @classmethod
    def reference(cls, **experiment) -> "Config":
        data = reference_config()
        data["experiment"].update(experiment)
        return cls(data, source=reference_text())

    def with_overrides(self, section: str = "experiment", **values) -> "Config":
        data = copy.deepcopy(self.data)
        data.setdefault(section, {}).update(values)
        return Config(data, source=self._source, path=self.path)

    def fail(self, key: str, message: str):
        where = f"{self.path}: " if self.path else ""
        raise ConfigError(f"{where}{_line_of(self._source, key)}{message}")

    def _validate(self):
        d = self.data
        if d.get("schema_version") != SCHEMA_VERSION:
            self.fail("schema_version", f"unsupported schema_version {d.get('schema_version')!r}")
        try:
            self.system = build_system(d["stages"])
        except ConfigError as exc:
            self.fail("stages", str(exc))
        except (KeyError, TypeError, ValueError) as exc:
            self.fail("stages", f"malformed stage template: {exc}")
        exp = d["experiment"]
        if exp["scale"] not in d["scales"]:
            try:
                ProblemScale.parse(exp["scale"])
            except ConfigError as exc:
                self.fail("scale", str(exc))
        alpha = exp["alpha"]
        if not isinstance(alpha, (int, float)) or round(float(alpha), 1) not in ALPHA_GRID \
                or abs(alpha - round(float(alpha), 1)) > 1e-12:
            self.fail("alpha", f"alpha must be one of {ALPHA_GRID}, got {alpha!r}")
        seeds = exp["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            self.fail("seeds", "seeds must be a non-empty list of integers")
        if not isinstance(exp["episodes"], int) or exp["episodes"] < 1:
            self.fail("episodes", "episodes must be a positive integer")
        cap = exp.get("max_env_steps")
        if cap is not None and (not isinstance(cap, int) or cap < 1):
            self.fail("max_env_steps", "max_env_steps must be a positive integer or null")
        if exp.get("mode", "single") not in ("single", "batch"):
            self.fail("mode", "mode must be 'single' or 'batch'")
        try:
            self.disturbance
        except ConfigError as exc:
            self.fail("disturbance", str(exc))
        agent = d["agent"]
        for key in ("hidden", "actor_lr", "critic_lr", "gamma", "tau", "batch_size"):
            if key not in agent:
                self.fail("agent", f"agent section lacks {key!r}")

    # ------------------------------------------------------------ accessors
    @property
    def experiment(self) -> dict:
        return self.data["experiment"]

    @property
    def agent(self) -> dict:
        return self.data["agent"]

    @property
    def scale(self) -> ProblemScale:
        label = self.experiment["scale"]
        spec = self.data["scales"].get(label)
        if spec is None:
            return ProblemScale.parse(label)
        return ProblemScale(spec["jobs"], spec["robots"], label=label)

    @property
    def alpha(self) -> float:
        return float(self.experiment["alpha"])

    @property
    def seeds(self) -> list[int]:
        return list(self.experiment["seeds"])

    @property
    def disturbance(self) -> DisturbanceConfig:
        dist = self.experiment.get("disturbance", {})
        return DisturbanceConfig(
            noise_sigma_factor=float(dist.get("noise_sigma_factor", 0.0)),
            failure_prob=float(dist.get("failure_prob", 0.0)),
            repair_factor=tuple(dist.get("repair_factor", (1.5, 3.0))),
            max_failures=int(dist.get("max_failures", 10)),
        )

    def norm_stats(self, label: Optional[str] = None) -> Optional[dict]:
        return self.data.get("norm_stats", {}).get(label or self.scale.label)

    def weights(self, alpha: Optional[float] = None, label: Optional[str] = None) -> RewardWeights:
        stats = self.norm_stats(label)
        if stats is None:
            from .env import compute_norm_stats

            scale = self.scale if label is None else ProblemScale.parse(label)
            stats = compute_norm_stats(self.system, scale, n_rollouts=100, seed=0)
            self.data.setdefault("norm_stats", {})[scale.label] = stats
        return RewardWeights(self.alpha if alpha is None else float(alpha),
                             tuple(stats["makespan"]), tuple(stats["energy"]))

    def dumps(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True)


def build_system(stages: list[dict]) -> ConstraintSystem:
    templates = []
    for entry in stages:
        bounds = entry["knot_bounds"]
        base = [float(s) for s in entry["base_seg"]]
        dim = len(base)
        lower = bounds[0] if isinstance(bounds[0], list) else [bounds[0]] * dim
        upper = bounds[1] if isinstance(bounds[1], list) else [bounds[1]] * dim
        rows = entry.get("coupling", [])
        A = [row["coef"] for row in rows]
        b = [row["rhs"] for row in rows]
        region = Region(np.array(lower, float), np.array(upper, float),
                        np.array(A, float).reshape(len(rows), dim), np.array(b, float))
        energy = entry["energy"]
        templates.append(StageTemplate(entry["name"], tuple(base), float(energy["a"]),
                                       float(energy["b"]), float(energy["c"]), region))
    return ConstraintSystem(templates)
