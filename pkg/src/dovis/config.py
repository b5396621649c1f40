"""TOML run configuration.

A single document drives every command::

    seed = 3

    [world]
    n = 100
    d = 3
    regime = "realistic"
    epochs = 40

    [world.census]
    PbM = 25
    ...

    [world.ranked]
    rho = 0.2
    gamma = 0.4

    [[world.shocks]]
    epoch = 18
    agent = "popular:PbM"
    delta = -0.2

    [hyperparams]   # alpha, beta, p, tol, max_iter
    [weights]       # utility weights; omitted means the regime default
    [experiment]    # seeds, regimes, k, half_lives, ...
    [rank]          # n_agents, tasks (for ranking a report stream)
    [bounds]        # seed, trials, sizes, alpha, families

Every section is optional and unknown keys are rejected.
"""
from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .experiments import ExperimentConfig
from .kernels import UtilityWeights
from .rank import RankHyperparams
from .sim import RoutingParams, Shock, WorldConfig

SECTIONS = {"seed", "world", "hyperparams", "weights", "experiment", "rank", "bounds"}
BOUNDS_KEYS = {"seed", "trials", "sizes", "alpha", "families"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    path: Path | None = None
    text: str = ""
    world: WorldConfig = field(default_factory=WorldConfig)
    hp: RankHyperparams = field(default_factory=RankHyperparams)
    weights: UtilityWeights | None = None
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    rank: dict = field(default_factory=dict)
    bounds: dict = field(default_factory=dict)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    def utility_weights(self, regime: str | None = None) -> UtilityWeights:
        """Explicit weights if configured, else the regime default."""
        if self.weights is not None:
            return self.weights
        regime = regime or self.world.regime
        return UtilityWeights().without_penalties() if regime == "clean" else UtilityWeights()

    def with_seed(self, seed: int) -> "RunConfig":
        exp = replace(self.experiment, seeds=(seed,), world=replace(self.experiment.world, seed=seed))
        return replace(self, world=replace(self.world, seed=seed), experiment=exp)


def _build(cls, data: dict, where: str, convert=None):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(sorted(unknown))}")
    kw = dict(data)
    for k, fn in (convert or {}).items():
        if k in kw:
            kw[k] = fn(kw[k])
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def _shock(d: dict) -> Shock:
    return _build(Shock, d, "world.shocks")


def parse_world(data: dict, seed: int | None) -> WorldConfig:
    conv = {
        "pre_rank": lambda d: _build(RoutingParams, d, "world.pre_rank"),
        "ranked": lambda d: _build(RoutingParams, d, "world.ranked"),
        "shocks": lambda lst: tuple(_shock(s) for s in lst),
        "census": dict,
    }
    data = dict(data)
    if seed is not None:
        data.setdefault("seed", seed)
    if "census" not in data and "n" in data and data["n"] != WorldConfig().n:
        raise ConfigError("[world] a custom n needs an explicit [world.census]")
    return _build(WorldConfig, data, "world", conv)


def loads(text: str, path: Path | None = None) -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path or '<config>'}: {exc}") from None
    unknown = set(doc) - SECTIONS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
    seed = doc.get("seed")
    if seed is not None and not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    world = parse_world(doc.get("world", {}), seed)
    hp = _build(RankHyperparams, doc.get("hyperparams", {}), "hyperparams")
    weights = _build(UtilityWeights, doc["weights"], "weights") if "weights" in doc else None

    exp_data = dict(doc.get("experiment", {}))
    tuples = {k: tuple for k in ("seeds", "regimes", "p_grid", "half_lives")}
    exp_data.setdefault("seeds", (seed,) if seed is not None else ExperimentConfig().seeds)
    exp = _build(ExperimentConfig, {**exp_data, "world": world, "hp": hp,
                                    "weights": weights or UtilityWeights()}, "experiment", tuples)

    rank = dict(doc.get("rank", {}))
    bad = set(rank) - {"n_agents", "tasks"}
    if bad:
        raise ConfigError(f"[rank] unknown keys: {', '.join(sorted(bad))}")
    bounds = dict(doc.get("bounds", {}))
    bad = set(bounds) - BOUNDS_KEYS
    if bad:
        raise ConfigError(f"[bounds] unknown keys: {', '.join(sorted(bad))}")
    return RunConfig(path, text, world, hp, weights, exp, rank, bounds)


def load(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return loads(text, p)
