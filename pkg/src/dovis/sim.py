"""Synthetic agent ecosystem emitting OAT-Lite telemetry.

Agents are drawn from archetypes with latent per-task competence, latency,
cost and risk. Each epoch, callers pick a task and a callee through a
popularity / competence-proxy / published-rank mixture, outcomes are sampled
from the callee's profile, callers fold them into decayed statistics and
submit signed reports. The indexer ingests them, closes the epoch and
recomputes ranks, which feed back into routing from the end of burn-in on.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import special

from .kernels import UtilityWeights, edge_arrays, uniform
from .rank import PipelineResult, RankHyperparams, rank_pipeline
from .telemetry import (
    CallerReport,
    DecayParams,
    HmacScheme,
    TelemetryStore,
    close_epoch,
    derive_key,
    fold_decay,
    ingest_report,
)

ARCHETYPES = ("BS", "PbM", "NbE", "CbR", "SY", "NC")


@dataclass(frozen=True)
class Archetype:
    theta: float
    latency: float
    cost: float
    risk: float
    specialty_theta: float | None = None


# Newcomer centers are not tabulated; they are set "good" and otherwise like BS.
ARCHETYPE_CENTERS = {
    "BS": Archetype(0.80, 300.0, 1.0, 0.05),
    "PbM": Archetype(0.55, 300.0, 1.0, 0.05),
    "NbE": Archetype(0.50, 270.0, 0.9, 0.05, specialty_theta=0.90),
    "CbR": Archetype(0.65, 180.0, 0.6, 0.15),
    "SY": Archetype(0.50, 320.0, 1.0, 0.10),
    "NC": Archetype(0.85, 300.0, 1.0, 0.05),
}

DEFAULT_CENSUS = {"PbM": 25, "NbE": 15, "BS": 20, "CbR": 30, "SY": 8, "NC": 2}

# outcome distribution shapes
QUALITY_SD = 0.1
LATENCY_SIGMA = 0.25
COST_SHAPE = 2.0
RISK_CONCENTRATION = 20.0


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class RoutingParams:
    rho: float = 0.3
    gamma: float = 0.0
    epsilon: float = 0.05
    tau: float = 0.1
    proxy_noise: float = 0.1

    def __post_init__(self):
        if min(self.rho, self.gamma, self.epsilon) < 0 or self.rho + self.gamma + self.epsilon > 1 + 1e-12:
            raise ValueError("routing weights must be >= 0 with rho + gamma + epsilon <= 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class Shock:
    epoch: int
    agent: int | str
    delta: float
    task: int | None = None
    kind: str = "degrade"


@dataclass(frozen=True)
class Interaction:
    caller: int
    callee: int
    task: int
    epoch: int
    timestamp: float
    z: int
    q: float
    latency: float
    cost: float
    risk: float


@dataclass(frozen=True)
class WorldConfig:
    n: int = 100
    d: int = 3
    census: dict = field(default_factory=lambda: dict(DEFAULT_CENSUS))
    seed: int = 0
    epochs: int = 40
    calls_per_epoch: int = 200
    burn_in: int = 5
    regime: str = "clean"
    half_life: float = 8.0
    newcomer_entry: int = 18
    shocks: tuple = ()
    pre_rank: RoutingParams = RoutingParams(rho=0.3, gamma=0.0, epsilon=0.05)
    ranked: RoutingParams = RoutingParams(rho=0.2, gamma=0.4, epsilon=0.05)
    zipf_exponent: float = 1.0
    popularity_by_archetype: bool = True
    theta_jitter: float = 0.05
    scale_jitter: float = 0.10
    # None means "regime default"
    intra_bias: float | None = None
    drop_rate: float | None = None
    caller_noise: float | None = None
    proxy_noise_scale: float | None = None
    report_floor: float = 1e-3
    sign_reports: bool = True

    def __post_init__(self):
        if self.regime not in ("clean", "realistic"):
            raise ValueError(f"regime must be 'clean' or 'realistic', got {self.regime!r}")
        unknown = set(self.census) - set(ARCHETYPES)
        if unknown:
            raise ValueError(f"unknown archetypes in census: {sorted(unknown)}")
        if sum(self.census.values()) != self.n:
            raise ValueError(f"census sums to {sum(self.census.values())}, expected n={self.n}")
        if any(c < 0 for c in self.census.values()):
            raise ValueError("census counts must be >= 0")
        if not 0 <= self.burn_in < self.epochs:
            raise ValueError("burn-in must be shorter than the horizon")
        if self.d < 1 or self.calls_per_epoch < 0:
            raise ValueError("need d >= 1 tasks and calls_per_epoch >= 0")

    @property
    def realistic(self) -> bool:
        return self.regime == "realistic"

    def _pick(self, value, clean, realistic):
        return value if value is not None else (realistic if self.realistic else clean)

    @property
    def effective_intra_bias(self) -> float:
        return self._pick(self.intra_bias, 0.0, 0.8)

    @property
    def effective_drop_rate(self) -> float:
        return self._pick(self.drop_rate, 0.0, 0.05)

    @property
    def effective_caller_noise(self) -> float:
        return self._pick(self.caller_noise, 0.0, 0.05)

    @property
    def effective_proxy_scale(self) -> float:
        return self._pick(self.proxy_noise_scale, 1.0, 2.0)

    @property
    def decay(self) -> DecayParams:
        return DecayParams.from_half_life(self.half_life)


@dataclass
class World:
    config: WorldConfig
    archetype: np.ndarray  # (n,) str
    theta: np.ndarray  # (n, d)
    latency: np.ndarray
    cost: np.ndarray
    risk: np.ndarray
    specialty: np.ndarray  # (n,) task index or -1
    popularity: np.ndarray  # (n,) simplex
    entry_epoch: np.ndarray  # (n,)
    clique: np.ndarray  # Sybil ids that collude (empty when intra bias is 0)
    proxy_z: np.ndarray  # (n, n, d) standard normals: caller's competence-proxy error
    caller_offset: np.ndarray | None  # (n, n, d) caller-dependent competence shift
    intra_bias: float = 0.0

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    @property
    def d(self) -> int:
        return self.theta.shape[1]

    def members(self, archetype: str) -> np.ndarray:
        return np.flatnonzero(self.archetype == archetype)

    def active(self, epoch: int) -> np.ndarray:
        return self.entry_epoch <= epoch

    def most_popular(self, archetype: str) -> int:
        ids = self.members(archetype)
        if ids.size == 0:
            raise ValueError(f"no {archetype} agents in this world")
        return int(ids[np.argmax(self.popularity[ids])])

    def specialist(self, task: int) -> int:
        ids = np.flatnonzero((self.archetype == "NbE") & (self.specialty == task))
        if ids.size == 0:
            raise ValueError(f"no NbE specialist for task {task}")
        return int(ids[0])

    def resolve_agent(self, target) -> int:
        """Agent id from an int or a selector ``popular:<archetype>`` / ``specialist:<task>``."""
        if isinstance(target, (int, np.integer)):
            return int(target)
        kind, _, arg = str(target).partition(":")
        if kind == "popular":
            return self.most_popular(arg)
        if kind == "specialist":
            return self.specialist(int(arg))
        raise ValueError(f"unknown agent selector {target!r}")

    def apply_shock(self, shock: Shock) -> int:
        j = self.resolve_agent(shock.agent)
        if shock.kind == "newcomer_entry":
            self.entry_epoch[j] = shock.epoch
            return j
        tasks = range(self.d) if shock.task is None else [shock.task]
        for k in tasks:
            self.theta[j, k] = float(np.clip(self.theta[j, k] + shock.delta, 0.0, 1.0))
        return j


def _zipf_popularity(world_rng: np.random.Generator, archetype: np.ndarray, exponent: float,
                     order_by_archetype: bool = True) -> np.ndarray:
    """Zipf weights over agents; PbM take the head and NbE / NC / SY the tail when ordered."""
    n = archetype.shape[0]
    weights = 1.0 / np.arange(1, n + 1) ** exponent
    if not order_by_archetype:
        pop = weights[world_rng.permutation(n)]
        return pop / pop.sum()
    head = world_rng.permutation(np.flatnonzero(archetype == "PbM"))
    tail = world_rng.permutation(np.flatnonzero(np.isin(archetype, ("NbE", "NC", "SY"))))
    middle = world_rng.permutation(np.flatnonzero(~np.isin(archetype, ("PbM", "NbE", "NC", "SY"))))
    order = np.concatenate([head, middle, tail])
    pop = np.empty(n)
    pop[order] = weights
    return pop / pop.sum()


def build_world(config: WorldConfig) -> World:
    """Draw a world deterministically from ``config.seed``."""
    world_seed, _ = np.random.SeedSequence(config.seed).spawn(2)
    rng = np.random.default_rng(world_seed)
    n, d = config.n, config.d
    labels = np.array([a for a in ARCHETYPES for _ in range(config.census.get(a, 0))], dtype=object)
    archetype = labels[rng.permutation(n)] if n else labels

    theta = np.empty((n, d))
    latency = np.empty((n, d))
    cost = np.empty((n, d))
    risk = np.empty((n, d))
    specialty = np.full(n, -1)
    nbe_count = 0
    for j in range(n):
        c = ARCHETYPE_CENTERS[archetype[j]]
        base = np.full(d, c.theta)
        if c.specialty_theta is not None:
            specialty[j] = nbe_count % d
            nbe_count += 1
            base[specialty[j]] = c.specialty_theta
        tj = config.theta_jitter
        theta[j] = np.clip(base + rng.uniform(-tj, tj, d), 0.0, 1.0)
        sj = config.scale_jitter
        latency[j] = c.latency * (1 + rng.uniform(-sj, sj, d))
        cost[j] = c.cost * (1 + rng.uniform(-sj, sj, d))
        risk[j] = np.clip(c.risk + rng.uniform(-tj, tj, d) * c.risk, 0.0, 1.0)

    popularity = _zipf_popularity(rng, archetype, config.zipf_exponent, config.popularity_by_archetype)
    entry = np.where(archetype == "NC", config.newcomer_entry, 0)
    bias = config.effective_intra_bias
    clique = np.flatnonzero(archetype == "SY") if bias > 0 else np.zeros(0, dtype=int)
    proxy_z = rng.standard_normal((n, n, d))
    noise = config.effective_caller_noise
    offset = noise * rng.standard_normal((n, n, d)) if noise > 0 else None
    return World(config, archetype, theta, latency, cost, risk, specialty, popularity,
                 entry, clique, proxy_z, offset, bias)


def _simplex(a: np.ndarray) -> np.ndarray:
    s = a.sum()
    return a / s if s > 0 else np.full(a.shape, 1.0 / a.shape[0])


def selection_probabilities(caller: int, task: int, world: World, ranks, rp: RoutingParams,
                            epoch: int = 0, proxy_scale: float = 1.0):
    """Eligible callee ids and their selection probabilities (before Sybil override).

    Popularity, competence proxy and published rank are each normalized over
    the eligible callees and mixed with the exploration mass; the mixture
    scores then go through a softmax at temperature ``tau``.
    """
    eligible = world.active(epoch).copy()
    eligible[caller] = False
    ids = np.flatnonzero(eligible)
    if ids.size == 0:
        return ids, np.zeros(0)
    proxy = world.theta[ids, task] + rp.proxy_noise * proxy_scale * world.proxy_z[caller, ids, task]
    proxy = np.clip(proxy, 0.0, 1.0)
    mix = rp.rho * _simplex(proxy) + rp.epsilon / ids.size
    if ranks is None:
        mix = mix + (1 - rp.rho - rp.epsilon) * _simplex(world.popularity[ids])
    else:
        mix = mix + (1 - rp.rho - rp.gamma - rp.epsilon) * _simplex(world.popularity[ids])
        mix = mix + rp.gamma * _simplex(np.asarray(ranks, dtype=float)[ids])
    logits = mix / rp.tau
    probs = np.exp(logits - logits.max())
    return ids, probs / probs.sum()


def select_callee(caller: int, task: int, world: World, ranks, rp: RoutingParams,
                  rng: np.random.Generator, epoch: int = 0, proxy_scale: float = 1.0) -> int:
    """Sample a callee; consumes exactly two uniforms so paired runs stay aligned."""
    u_bias, u_pick = rng.random(2)
    if world.clique.size and caller in world.clique and u_bias < world.intra_bias:
        mates = world.clique[(world.clique != caller) & world.active(epoch)[world.clique]]
        if mates.size:
            return int(mates[min(int(u_pick * mates.size), mates.size - 1)])
    ids, probs = selection_probabilities(caller, task, world, ranks, rp, epoch, proxy_scale)
    if ids.size == 0:
        raise SimulationError(f"caller {caller} has no eligible callee")
    return int(ids[min(np.searchsorted(np.cumsum(probs), u_pick * probs.sum(), side="right"), ids.size - 1)])


def effective_theta(world: World, caller: int, callee: int, task: int) -> float:
    th = world.theta[callee, task]
    if world.caller_offset is not None:
        th = th + world.caller_offset[caller, callee, task]
    return float(np.clip(th, 0.0, 1.0))


def _truncated_normal(u: float, mean: float, sd: float) -> float:
    """Inverse-CDF draw from Normal(mean, sd) truncated to [0, 1]."""
    lo, hi = special.ndtr(-mean / sd), special.ndtr((1.0 - mean) / sd)
    q = mean + sd * special.ndtri(lo + u * (hi - lo))
    return float(np.clip(q, 0.0, 1.0))


def sample_outcome(callee: int, task: int, world: World, rng: np.random.Generator,
                   caller: int = -1, epoch: int = 0, noise_rng: np.random.Generator | None = None) -> Interaction:
    """Draw one interaction from the callee's latent profile.

    Success and quality come from two uniforms of ``rng`` (monotone in
    competence for a fixed draw); latency, cost and risk use ``noise_rng``,
    which defaults to ``rng``.
    """
    th = effective_theta(world, caller, callee, task) if caller >= 0 else float(world.theta[callee, task])
    u_z, u_q = rng.random(2)
    z = int(u_z < th)
    q = _truncated_normal(u_q, th, QUALITY_SD)
    noise = rng if noise_rng is None else noise_rng
    mean_l = world.latency[callee, task]
    lat = float(noise.lognormal(np.log(mean_l) - LATENCY_SIGMA ** 2 / 2, LATENCY_SIGMA))
    cost = float(noise.gamma(COST_SHAPE, world.cost[callee, task] / COST_SHAPE))
    rmean = float(np.clip(world.risk[callee, task], 1e-3, 1 - 1e-3))
    risk = float(noise.beta(RISK_CONCENTRATION * rmean, RISK_CONCENTRATION * (1 - rmean)))
    return Interaction(caller, callee, task, epoch, float(epoch), z, q, lat, cost, risk)


@dataclass
class EpochRecord:
    epoch: int
    ranks: PipelineResult
    theta: np.ndarray
    oracle_calls: np.ndarray  # cumulative raw calls per (callee, task)
    oracle_success: np.ndarray
    delivered_calls: float
    dropped_calls: float
    n_reports: int
    published: bool  # whether routing in this epoch used published ranks
    interactions: list | None = None

    def oracle(self, task: int) -> np.ndarray:
        """Normalized empirical success rate per callee for ``task``."""
        calls = self.oracle_calls[:, task]
        rate = np.where(calls > 0, self.oracle_success[:, task] / np.maximum(calls, 1), 0.0)
        return _simplex(rate)


@dataclass
class Timeline:
    config: WorldConfig
    world: World
    records: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    keys: HmacScheme | None = None

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]


def agent_keys(config: WorldConfig) -> HmacScheme:
    secret = hashlib.sha256(f"dovis-sim:{config.seed}".encode()).digest()
    return HmacScheme({j: derive_key(secret, j) for j in range(config.n)})


def run_simulation(config: WorldConfig, hp: RankHyperparams | None = None,
                   weights: UtilityWeights | None = None, priors=None,
                   keep_snapshots=(), record_interactions: bool = False,
                   on_reports: Callable[[list], None] | None = None,
                   world: World | None = None) -> Timeline:
    """Run the closed loop for ``config.epochs`` epochs.

    ``keep_snapshots`` lists epochs whose assembled snapshot is kept on the
    timeline (``"all"`` keeps every one); the last snapshot is always kept.
    ``on_reports`` receives each epoch's delivered, signed reports.
    """
    hp = hp or RankHyperparams()
    weights = weights or UtilityWeights()
    world = world or build_world(config)
    n, d = world.n, world.d
    v, w = priors if priors is not None else (uniform(n), uniform(n))
    _, run_seed = np.random.SeedSequence(config.seed).spawn(2)
    # separate streams so runs that differ only in a shock share their random numbers
    traffic, route, outcome, noise, drops = (np.random.default_rng(s) for s in run_seed.spawn(5))
    decay = config.decay
    keys = agent_keys(config) if config.sign_reports else None
    store = TelemetryStore()
    verifier = keys if keys is not None else _Unsigned()
    proxy_scale = config.effective_proxy_scale
    drop_rate = config.effective_drop_rate

    ledger = np.zeros((n, n, d, 6))  # caller-side decayed N, S, q, l, c, r
    oracle_calls = np.zeros((n, d))
    oracle_success = np.zeros((n, d))
    shocks = sorted(config.shocks, key=lambda s: s.epoch)
    timeline = Timeline(config, world, keys=keys)
    published = None

    for t in range(config.epochs):
        for s in shocks:
            if s.epoch == t:
                world.apply_shock(s)
        use_ranks = published if t >= config.burn_in else None
        rp = config.ranked if use_ranks is not None else config.pre_rank
        active_ids = np.flatnonzero(world.active(t))
        raw = np.zeros_like(ledger)
        log = [] if record_interactions else None
        for _ in range(config.calls_per_epoch if active_ids.size > 1 else 0):
            caller = int(active_ids[traffic.integers(active_ids.size)])
            task = int(traffic.integers(d))
            task_ranks = None if use_ranks is None else use_ranks[task]
            callee = select_callee(caller, task, world, task_ranks, rp, route, t, proxy_scale)
            it = sample_outcome(callee, task, world, outcome, caller, t, noise)
            raw[caller, callee, task] += (1.0, it.z, it.q, it.latency, it.cost, it.risk)
            oracle_calls[callee, task] += 1
            oracle_success[callee, task] += it.z
            if log is not None:
                log.append(it)

        ledger = fold_decay(ledger, raw, decay)
        live = np.argwhere(ledger[..., 0] > config.report_floor)
        dropped = drops.random(live.shape[0]) < drop_rate if drop_rate > 0 else np.zeros(live.shape[0], bool)
        delivered_raw = float(raw[..., 0][tuple(live[~dropped].T)].sum()) if live.size else 0.0
        dropped_raw = float(raw[..., 0][tuple(live[dropped].T)].sum()) if live.size else 0.0

        reports = []
        stamp = (t + 1) * 1000
        for (i, j, k) in live[~dropped]:
            N, S, q, l, c, r = (float(x) for x in ledger[i, j, k])
            rep = CallerReport(t, int(i), int(j), int(k), N, min(S, N), min(q, N), l, c, min(r, N))
            if keys is not None:
                rep = keys.sign(rep, stamp)
            res = ingest_report(store, rep, verifier)
            if not res.ok:
                raise SimulationError(f"simulated report rejected: {res.reason} ({rep.key})")
            reports.append(rep)
        if on_reports is not None:
            on_reports(reports)
        snapshot = close_epoch(store)
        if keep_snapshots == "all" or t in keep_snapshots or t == config.epochs - 1:
            timeline.snapshots[t] = snapshot

        ranks = rank_pipeline(edge_arrays(snapshot), weights, (v, w), hp, range(d))
        timeline.records.append(EpochRecord(
            t, ranks, world.theta.copy(), oracle_calls.copy(), oracle_success.copy(),
            delivered_raw, dropped_raw, len(reports), use_ranks is not None, log,
        ))
        published = {k: ranks.per_task[k].fused for k in range(d)}
    return timeline


class _Unsigned:
    def verify(self, record) -> bool:
        return True

    def timestamp(self, record) -> float:
        return 0


def write_truth_csv(timeline: Timeline, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["agent", "task", "theta", "epoch"])
        for rec in timeline.records:
            for j in range(rec.theta.shape[0]):
                for k in range(rec.theta.shape[1]):
                    wr.writerow([j, k, repr(float(rec.theta[j, k])), rec.epoch])


def with_overrides(config: WorldConfig, **kw) -> WorldConfig:
    return replace(config, **kw)
