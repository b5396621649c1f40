"""Scripted scenarios over the simulator, the ranking pipeline and the metrics.

Each experiment runs one simulation per seed (and per regime or half-life
where relevant), evaluates four methods and returns long-format metric rows
plus plot series. Methods:

``UC``
    fused rank ``r``.
``Usage`` / ``Comp``
    ``fuse(x, y, 1)`` and ``fuse(x, y, 0)`` on the same kernels.
``Oracle``
    normalized per-callee empirical success rate over the raw interaction log.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .kernels import UtilityWeights, uniform
from .metrics import (
    EvalInput,
    MetricsWriter,
    ndcg_at_k,
    quality_at_k,
    quality_at_k_excluding,
    standard_metrics,
    sybil_mass,
)
from .rank import RankHyperparams, fuse, ordering
from .guarantees import injection_trajectory
from .sim import EpochRecord, Shock, WorldConfig, build_world, run_simulation

METHODS = ("UC", "Usage", "Comp", "Oracle")
PLOT_HEADER = ("experiment", "regime", "seed", "task", "series", "x", "y")
EXPERIMENTS = ("exp1", "exp2", "exp3", "exp4", "exp5")


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    world: WorldConfig = WorldConfig()
    hp: RankHyperparams = RankHyperparams()
    weights: UtilityWeights = UtilityWeights()
    k: int = 10
    regimes: tuple = ("clean", "realistic")
    # exp2
    frozen_epochs: int = 35
    p_grid: tuple = tuple(i / 8 for i in range(9))
    # exp3
    half_lives: tuple = (4.0, 8.0, 16.0)
    focal_task: int = 0
    shock_epoch: int = 18
    degrade: float = -0.2
    improve: float = 0.07
    # exp4
    injections: int = 10
    prior_boost: float = 3.0
    # exp5
    sybil_epochs: int = 36
    sybil_clique: int = 6

    def regime_weights(self, regime: str) -> UtilityWeights:
        """Clean runs drop the latency, cost and risk penalties."""
        return self.weights.without_penalties() if regime == "clean" else self.weights

    def world_for(self, regime: str, seed: int, **kw) -> WorldConfig:
        return replace(self.world, regime=regime, seed=seed, **kw)


@dataclass
class ExperimentResult:
    name: str
    rows: list = field(default_factory=list)
    series: list = field(default_factory=list)

    def add(self, regime, seed, epoch, task, method, metric, value):
        self.rows.append((self.name, regime, seed, epoch, task, method, metric, value))

    def add_point(self, regime, seed, task, series, x, y):
        self.series.append((self.name, regime, seed, task, series, x, y))

    def values(self, metric: str, method=None, regime=None, task=None, seed=None) -> np.ndarray:
        sel = [
            r[7] for r in self.rows
            if r[6] == metric
            and (method is None or r[5] == method)
            and (regime is None or r[1] == regime)
            and (task is None or r[4] == task)
            and (seed is None or r[2] == seed)
            and r[7] is not None
        ]
        return np.array(sel, dtype=float)

    def mean(self, metric: str, **kw) -> float:
        v = self.values(metric, **kw)
        return float(v.mean()) if v.size else float("nan")

    def summary(self) -> dict:
        """Mean of every (regime, method, metric) over seeds and tasks."""
        keys = sorted({(r[1], r[5], r[6]) for r in self.rows})
        return {k: self.mean(k[2], method=k[1], regime=k[0]) for k in keys}

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with MetricsWriter(out / "metrics.csv") as mw:
            for r in self.rows:
                mw.row(*r)
        return [out / "metrics.csv", self._write_series(out / "plot_data.csv")]

    def _write_series(self, path: Path) -> Path:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(PLOT_HEADER)
            for row in self.series:
                wr.writerow([*row[:5], _num(row[5]), _num(row[6])])
        return path


def _num(x):
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return int(x)
    return repr(float(x))


def method_ranks(record: EpochRecord, task) -> dict:
    tr = record.ranks.per_task[task]
    return {
        "UC": tr.fused,
        "Usage": fuse(tr.usage, tr.competence, 1.0),
        "Comp": fuse(tr.usage, tr.competence, 0.0),
        "Oracle": record.oracle(task),
    }


def position(scores, agent: int) -> int:
    """1-based rank position of ``agent`` (ties by ascending id)."""
    return int(np.flatnonzero(ordering(scores) == agent)[0]) + 1


def exp1_baselines(cfg: ExperimentConfig = ExperimentConfig()) -> ExperimentResult:
    """Last-epoch discovery metrics of all four methods with rank feedback in the loop."""
    res = ExperimentResult("exp1")
    for regime in cfg.regimes:
        for seed in cfg.seeds:
            tl = run_simulation(cfg.world_for(regime, seed, sign_reports=False), cfg.hp,
                                cfg.regime_weights(regime))
            rec = tl.final
            for task in range(tl.world.d):
                truth = rec.theta[:, task]
                for method, r in method_ranks(rec, task).items():
                    for metric, val in standard_metrics(r, truth, cfg.k).items():
                        res.add(regime, seed, rec.epoch, task, method, metric, val)
    return res


def exp2_p_sweep_frozen(cfg: ExperimentConfig = ExperimentConfig()) -> ExperimentResult:
    """Sweep the fusion exponent on telemetry frozen after neutral routing.

    ``x`` and ``y`` come from the final snapshot of a run where routing never
    sees ranks, and only ``fuse(x, y, p)`` varies across the sweep.
    """
    res = ExperimentResult("exp2")
    for regime in cfg.regimes:
        for seed in cfg.seeds:
            world = cfg.world_for(regime, seed, epochs=cfg.frozen_epochs, sign_reports=False,
                                  ranked=cfg.world.pre_rank)
            tl = run_simulation(world, cfg.hp, cfg.regime_weights(regime))
            rec = tl.final
            for task in range(tl.world.d):
                truth = rec.theta[:, task]
                tr = rec.ranks.per_task[task]
                base = {"Usage": fuse(tr.usage, tr.competence, 1.0), "Comp": fuse(tr.usage, tr.competence, 0.0)}
                for method, r in base.items():
                    inp = EvalInput(r, truth, cfg.k)
                    res.add(regime, seed, rec.epoch, task, method, f"quality@{cfg.k}", quality_at_k(inp))
                    res.add(regime, seed, rec.epoch, task, method, f"ndcg@{cfg.k}", ndcg_at_k(inp))
                for p in cfg.p_grid:
                    inp = EvalInput(fuse(tr.usage, tr.competence, p), truth, cfg.k)
                    q, g = quality_at_k(inp), ndcg_at_k(inp)
                    res.add(regime, seed, rec.epoch, task, f"UC(p={p:g})", f"quality@{cfg.k}", q)
                    res.add(regime, seed, rec.epoch, task, f"UC(p={p:g})", f"ndcg@{cfg.k}", g)
                    res.add_point(regime, seed, task, f"quality@{cfg.k}", p, q)
                    res.add_point(regime, seed, task, f"ndcg@{cfg.k}", p, g)
    return res


def shock_schedule(cfg: ExperimentConfig, improve: float | None = None) -> tuple:
    improve = cfg.improve if improve is None else improve
    return (
        Shock(cfg.shock_epoch, "popular:PbM", cfg.degrade, None, "degrade"),
        Shock(cfg.shock_epoch, f"specialist:{cfg.focal_task}", improve, cfg.focal_task, "improve"),
    )


def epochs_to_demotion(timeline, agent: int, task, t_star: int, k: int) -> int:
    """Epochs after ``t_star`` until ``agent`` first drops out of the task top-k.

    Counted on the ranks published at the end of each epoch; 0 means it was
    out at the end of the shock epoch. Runs where it never drops out are
    censored at the remaining horizon.
    """
    for rec in timeline.records[t_star:]:
        if position(rec.ranks.per_task[task].fused, agent) > k:
            return rec.epoch - t_star
    return len(timeline.records) - t_star


def run_shock(cfg: ExperimentConfig, regime: str, seed: int, half_life: float, improve: float | None = None):
    world = cfg.world_for(regime, seed, half_life=half_life, sign_reports=False,
                          shocks=shock_schedule(cfg, improve))
    return run_simulation(world, cfg.hp, cfg.regime_weights(regime))


def exp3_shock_halflife(cfg: ExperimentConfig = ExperimentConfig()) -> ExperimentResult:
    """Rank trajectories of a degraded PbM and an improved NbE agent for each half-life."""
    res = ExperimentResult("exp3")
    task = cfg.focal_task
    regime = cfg.regimes[0]
    for H in cfg.half_lives:
        method = f"UC(H={H:g})"
        for seed in cfg.seeds:
            tl = run_shock(cfg, regime, seed, H)
            bad = tl.world.most_popular("PbM")
            good = tl.world.specialist(task)
            for rec in tl.records:
                r = rec.ranks.per_task[task].fused
                res.add_point(regime, seed, task, f"{method}:degraded", rec.epoch, position(r, bad))
                res.add_point(regime, seed, task, f"{method}:improved", rec.epoch, position(r, good))
            pre = tl.records[cfg.shock_epoch - 1].ranks.per_task[task].fused
            res.add(regime, seed, cfg.shock_epoch - 1, task, method, "pre_shock_position", position(pre, bad))
            res.add(regime, seed, tl.final.epoch, task, method, "epochs_to_demotion",
                    epochs_to_demotion(tl, bad, task, cfg.shock_epoch, cfg.k))
            later = tl.records[min(cfg.shock_epoch + 10, len(tl.records) - 1)]
            res.add(regime, seed, later.epoch, task, method, "improved_position",
                    position(later.ranks.per_task[task].fused, good))
    return res


def informative_prior(n: int, favored, boost: float) -> np.ndarray:
    """Favored agents get ``boost`` times the uniform share; the rest split the remainder."""
    favored = np.asarray(list(favored), dtype=int)
    v = np.empty(n)
    v[favored] = boost / n
    rest = np.setdiff1d(np.arange(n), favored)
    if rest.size:
        v[rest] = (1.0 - v[favored].sum()) / rest.size
    if np.any(v <= 0):
        raise ValueError("boost leaves no prior mass for the other agents")
    return v


def focal_caller(snapshot: dict, callee: int, task, n: int) -> int:
    """Heaviest caller of ``callee`` on ``task``, preferring rows that also route elsewhere.

    A caller whose only edge goes to ``callee`` has a row that injections
    cannot change, which makes the trajectory flat.
    """
    out_edges: dict = {}
    for (i, _, k) in snapshot:
        if k == task:
            out_edges[i] = out_edges.get(i, 0) + 1
    callers = [(out_edges[key[0]] > 1, s.N, key[0]) for key, s in snapshot.items()
               if key[1] == callee and key[2] == task]
    return max(callers)[2] if callers else (callee + 1) % n


def exp4_monotonicity_coldstart(cfg: ExperimentConfig = ExperimentConfig()) -> ExperimentResult:
    """(a) fused rank under injected successes on frozen telemetry; (b) newcomer entry under two priors."""
    res = ExperimentResult("exp4")
    regime = cfg.regimes[0]
    weights = cfg.regime_weights(regime)
    for seed in cfg.seeds:
        # (a) telemetry frozen right after burn-in
        world = cfg.world_for(regime, seed, epochs=cfg.world.burn_in + 1, sign_reports=False)
        tl = run_simulation(world, cfg.hp, weights)
        snap = tl.snapshots[tl.final.epoch]
        n = tl.world.n
        priors = (uniform(n), uniform(n))
        for task in range(tl.world.d):
            j = tl.world.specialist(task) if (tl.world.archetype == "NbE").any() else 0
            i = focal_caller(snap, j, task, n)
            traj = injection_trajectory(snap, (i, j, task), cfg.injections, weights, priors, cfg.hp, task=task)
            for step, val in enumerate(traj):
                res.add_point(regime, seed, task, "injected_rank", step, val)
            steps = np.diff(traj)
            res.add(regime, seed, tl.final.epoch, task, "UC", "min_step", float(steps.min()) if steps.size else 0.0)
            res.add(regime, seed, tl.final.epoch, task, "UC", "total_gain", float(traj[-1] - traj[0]))

        # (b) newcomer trajectories
        world = cfg.world_for(regime, seed, sign_reports=False)
        for label in ("uniform", "informative"):
            pr = None
            if label == "informative":
                v = informative_prior(world.n, build_world(world).members("NC"), cfg.prior_boost)
                pr = (v, v)
            tl = run_simulation(world, cfg.hp, weights, priors=pr)
            nc = tl.world.members("NC")
            entry = world.newcomer_entry
            for rec in tl.records:
                mass = np.mean([rec.ranks.per_task[k].fused[nc].sum() for k in range(tl.world.d)])
                res.add_point(regime, seed, None, f"newcomer_mass:{label}", rec.epoch, mass)
            rec = tl.records[entry]
            res.add(regime, seed, entry, None, f"UC({label})", "newcomer_mass_at_entry",
                    np.mean([rec.ranks.per_task[k].fused[nc].sum() for k in range(tl.world.d)]))
            best = min(position(rec.ranks.per_task[k].fused, a) for k in range(tl.world.d) for a in nc)
            res.add(regime, seed, entry, None, f"UC({label})", "newcomer_best_position_at_entry", best)
    return res


def sybil_census(census: dict, size: int) -> dict:
    """Census with ``size`` Sybils, absorbing the difference in the CbR count."""
    out = dict(census)
    diff = size - out.get("SY", 0)
    out["SY"] = size
    out["CbR"] = out.get("CbR", 0) - diff
    if out["CbR"] < 0:
        raise ValueError(f"clique of {size} does not fit the census")
    return out


def exp5_sybil(cfg: ExperimentConfig = ExperimentConfig()) -> ExperimentResult:
    """Sybil mass and Sybil-free Quality@k with a colluding clique in the realistic regime."""
    res = ExperimentResult("exp5")
    regime = "realistic"
    for seed in cfg.seeds:
        world = cfg.world_for(regime, seed, epochs=cfg.sybil_epochs, sign_reports=False,
                              census=sybil_census(cfg.world.census, cfg.sybil_clique))
        tl = run_simulation(world, cfg.hp, cfg.regime_weights(regime))
        clique = tl.world.clique
        d = tl.world.d
        for rec in tl.records:
            for method in ("UC", "Usage"):
                mass = np.mean([sybil_mass(method_ranks(rec, k)[method], clique) for k in range(d)])
                res.add_point(regime, seed, None, f"sybil_mass:{method}", rec.epoch, mass)
        rec = tl.final
        for task in range(d):
            truth = rec.theta[:, task]
            for method, r in method_ranks(rec, task).items():
                res.add(regime, seed, rec.epoch, task, method, "sybil_mass", sybil_mass(r, clique))
                res.add(regime, seed, rec.epoch, task, method, f"quality@{cfg.k}_exclSY",
                        quality_at_k_excluding(r, truth, cfg.k, clique))
    return res


RUNNERS = {
    "exp1": exp1_baselines,
    "exp2": exp2_p_sweep_frozen,
    "exp3": exp3_shock_halflife,
    "exp4": exp4_monotonicity_coldstart,
    "exp5": exp5_sybil,
}


def run_experiment(name: str, cfg: ExperimentConfig = ExperimentConfig()) -> ExperimentResult:
    if name not in RUNNERS:
        raise KeyError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    return RUNNERS[name](cfg)


def summary_json(result: ExperimentResult) -> str:
    return json.dumps(
        [{"regime": r, "method": m, "metric": k, "mean": v} for (r, m, k), v in result.summary().items()],
        indent=2,
    )
