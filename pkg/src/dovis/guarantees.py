"""Executable checks of the ranking guarantees on concrete instances.

Each check returns :class:`BoundReport` records (``lhs <= rhs + slack``).
Bounds are evaluated against closed-form fixed points so solver tolerance does
not leak into the slack.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .kernels import StochasticKernel, UtilityWeights, build_kernels
from .rank import RankHyperparams, closed_form_rank, fixed_point, fuse
from .telemetry import SufficientStats

SLACK = 1e-10
STEP_SLACK = 1e-12


@dataclass
class BoundReport:
    name: str
    lhs: float
    rhs: float
    slack: float = SLACK
    witness: dict | None = None
    holds: bool = field(init=False)

    def __post_init__(self):
        self.holds = bool(self.lhs <= self.rhs + self.slack)
        if self.holds:
            self.witness = None

    def line(self) -> str:
        return f"{self.name} {self.lhs!r} {self.rhs!r} {'true' if self.holds else 'false'} {self.slack!r}"


@dataclass
class SybilScenario:
    clique: np.ndarray
    x: np.ndarray
    y: np.ndarray
    alpha: float
    p: float
    v: np.ndarray

    def __post_init__(self):
        n = self.x.shape[0]
        self.clique = np.unique(np.asarray(self.clique, dtype=int))
        if self.clique.size == 0 or self.clique.size >= n:
            raise ValueError("clique must be a nonempty proper subset of the agents")
        self._mask = np.zeros(n, dtype=bool)
        self._mask[self.clique] = True

    @property
    def v_S(self) -> float:
        return float(self.v[self._mask].sum())

    @property
    def v_min_out(self) -> float:
        return float(self.v[~self._mask].min())

    @property
    def x_S(self) -> float:
        return float(self.x[self._mask].sum())

    @property
    def y_S(self) -> float:
        return float(self.y[self._mask].sum())

    @property
    def r_S(self) -> float:
        return float(fuse(self.x, self.y, self.p)[self._mask].sum())


def check_usage_sandwich(scn: SybilScenario) -> tuple[BoundReport, BoundReport]:
    a = scn.alpha
    low = BoundReport("sybil_usage_lower", (1 - a) * scn.v_S, scn.x_S)
    high = BoundReport("sybil_usage_upper", scn.x_S, a + (1 - a) * scn.v_S)
    return low, high


def fused_sybil_bound(alpha: float, p: float, v_S: float, v_min_out: float, y_S: float) -> float:
    head = (alpha + (1 - alpha) * v_S) ** p * y_S ** (1 - p)
    floor = (1 - alpha) ** p * v_min_out ** p * (1 - y_S) ** (1 - p)
    return head / (head + floor)


def check_fused_bound(scn: SybilScenario) -> BoundReport:
    if not 0 < scn.p <= 1:
        raise ValueError("fused Sybil bound needs p in (0, 1]")
    if scn.y_S >= 1 - 1e-12:
        raise ValueError("fused Sybil bound undefined when the clique holds all competence mass")
    bound = fused_sybil_bound(scn.alpha, scn.p, scn.v_S, scn.v_min_out, scn.y_S)
    return BoundReport("sybil_fused", scn.r_S, bound)


def check_contraction_trajectory(kernel: StochasticKernel, alpha: float, prior, iterates) -> BoundReport:
    """Worst excess over the per-step and geometric contraction bounds (<= 0 when they hold)."""
    xstar = closed_form_rank(kernel, alpha, prior)
    errs = np.array([np.abs(np.asarray(it) - xstar).sum() for it in iterates])
    worst, where = -math.inf, None
    for t in range(len(errs)):
        geo = errs[t] - (alpha ** t * errs[0] + SLACK)
        step = errs[t + 1] - (alpha * errs[t] + STEP_SLACK) if t + 1 < len(errs) else -math.inf
        excess = max(geo, step)
        if excess > worst:
            worst, where = excess, t
    return BoundReport("contraction", float(worst), 0.0, slack=0.0, witness={"step": where})


def max_row_l1(A, B) -> float:
    """Operator norm used for kernel differences: largest row l1 of ``A - B``."""
    D = np.asarray(A.to_dense() if isinstance(A, StochasticKernel) else A) - np.asarray(
        B.to_dense() if isinstance(B, StochasticKernel) else B)
    return float(np.abs(D).sum(axis=1).max())


def check_perturbation(P: StochasticKernel, P_tilde: StochasticKernel, alpha: float, prior) -> BoundReport:
    if P.n != P_tilde.n:
        raise ValueError("kernels differ in dimension")
    x = closed_form_rank(P, alpha, prior)
    xt = closed_form_rank(P_tilde, alpha, prior)
    lhs = float(np.abs(x - xt).sum())
    return BoundReport("perturbation", lhs, alpha / (1 - alpha) * max_row_l1(P, P_tilde))


def check_coldstart_floor(x, teleport: float, prior) -> BoundReport:
    """Minimum of ``x_j - (1 - teleport) prior_j`` must be >= 0."""
    gap = np.asarray(x) - (1 - teleport) * np.asarray(prior)
    j = int(np.argmin(gap))
    return BoundReport("coldstart_floor", -float(gap[j]), 0.0, slack=STEP_SLACK, witness={"agent": j})


def check_stochastic(kernel: StochasticKernel, name: str = "row_stochastic") -> BoundReport:
    return BoundReport(name, kernel.stochasticity_error(), 0.0, slack=1e-12)


# --------------------------------------------------------------------------
# monotone injection


def inject_success(snapshot: dict, key: tuple, count: float = 1.0) -> dict:
    """Add ``count`` successful calls (quality 1) on ``key`` without moving the other means."""
    s = snapshot.get(key, SufficientStats())
    N = s.N + count

    def keep_mean(total):
        if total is None:
            return None
        return total / s.N * N if s.N > 0 else 0.0

    out = dict(snapshot)
    out[key] = SufficientStats(
        N, s.S + count, (s.sum_q or 0.0) + count if s.sum_q is not None else None,
        keep_mean(s.sum_l), keep_mean(s.sum_c), keep_mean(s.sum_r),
    )
    return out


def injection_trajectory(snapshot: dict, key: tuple, steps: int, weights: UtilityWeights,
                         priors, hp: RankHyperparams, task=None) -> np.ndarray:
    """Fused rank of the callee in ``key`` after 0..steps injected successes."""
    v, w = priors
    j = key[1]
    out = []
    snap = snapshot
    for step in range(steps + 1):
        if step:
            snap = inject_success(snap, key)
        P, Q = build_kernels(snap, weights, v, w, task_filter=task)
        x = closed_form_rank(P, hp.alpha, v)
        y = closed_form_rank(Q, hp.beta, w)
        out.append(fuse(x, y, hp.p)[j])
    return np.array(out)


def check_monotone(trajectory) -> BoundReport:
    t = np.asarray(trajectory)
    drop = float(np.max(t[:-1] - t[1:])) if t.size > 1 else 0.0
    return BoundReport("monotonicity", drop, 0.0, slack=STEP_SLACK)


# --------------------------------------------------------------------------
# random instances


def random_prior(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.dirichlet(np.ones(n)) + 1e-3
    return v / v.sum()


def random_kernel(n: int, rng: np.random.Generator, prior=None, density: float = 0.2,
                  empty_rows: float = 0.1) -> StochasticKernel:
    W = rng.random((n, n)) * (rng.random((n, n)) < density)
    W[rng.random(n) < empty_rows] = 0.0
    prior = np.full(n, 1.0 / n) if prior is None else prior
    return StochasticKernel.from_weights(sp.csr_matrix(W), prior)


def into_set_kernel(n: int, clique, prior=None) -> StochasticKernel:
    """Every row spreads uniformly over ``clique`` (usage pumping ceiling)."""
    W = np.zeros((n, n))
    W[:, list(clique)] = 1.0
    return StochasticKernel.from_weights(sp.csr_matrix(W), np.full(n, 1.0 / n) if prior is None else prior)


def avoiding_set_kernel(n: int, clique, prior=None) -> StochasticKernel:
    """No row puts mass on ``clique`` (isolated clique floor)."""
    W = np.ones((n, n))
    W[:, list(clique)] = 0.0
    return StochasticKernel.from_weights(sp.csr_matrix(W), np.full(n, 1.0 / n) if prior is None else prior)


def pumped_sybil_kernels(n: int, size: int, rng: np.random.Generator, pump: float = 0.9):
    """Random ``(P, Q, clique)`` where clique rows of P send ``pump`` of their mass inside."""
    clique = rng.choice(n, size=size, replace=False)
    mask = np.zeros(n, dtype=bool)
    mask[clique] = True
    W = rng.random((n, n)) * (rng.random((n, n)) < 0.3)
    inside = rng.random((size, size)) + 0.1
    W[np.ix_(clique, clique)] = inside
    for a in clique:
        out = W[a, ~mask].sum()
        W[a, ~mask] *= (1 - pump) / pump * W[a, mask].sum() / out if out > 0 else 0.0
    u = np.full(n, 1.0 / n)
    P = StochasticKernel.from_weights(sp.csr_matrix(W), u)
    Q = random_kernel(n, rng, u, density=0.3)
    return P, Q, clique


# --------------------------------------------------------------------------
# suite for the CLI diagnostic

DEFAULT_SUITE = {
    "seed": 0,
    "trials": 20,
    "sizes": [10, 100],
    "alpha": 0.85,
    "families": ["contraction", "closed_form", "coldstart", "perturbation",
                 "sybil_sandwich", "sybil_fused", "monotonicity"],
}


def run_suite(cfg: dict | None = None, corrupt: bool = False) -> list[BoundReport]:
    """Run the configured bound families; ``corrupt`` plants a kernel with a row summing to 0.9."""
    cfg = {**DEFAULT_SUITE, **(cfg or {})}
    trials = int(cfg["trials"])
    if trials <= 0:
        raise ValueError("trial count must be positive")
    fams = set(cfg["families"])
    unknown = fams - set(DEFAULT_SUITE["families"])
    if unknown:
        raise ValueError(f"unknown bound families: {sorted(unknown)}")
    alpha = float(cfg["alpha"])
    rng = np.random.default_rng(int(cfg["seed"]))
    out: list[BoundReport] = []

    for n in cfg["sizes"]:
        for trial in range(trials):
            wit = {"n": n, "trial": trial, "seed": cfg["seed"]}
            v = random_prior(n, rng)
            K = random_kernel(n, rng, v)
            if corrupt and trial == 0:
                M = K.to_dense()
                M[0] *= 0.9 / M[0].sum()
                K = StochasticKernel.from_dense(M, v)
            sto = check_stochastic(K)
            if not sto.holds:
                sto.witness = {**wit, "row_sums": K.row_sums().tolist()}
                out.append(sto)
                continue
            if {"contraction", "closed_form", "coldstart"} & fams:
                res = fixed_point(K, alpha, v, tol=1e-10, record=True)
                xstar = closed_form_rank(K, alpha, v)
                if "contraction" in fams:
                    out.append(_tag(check_contraction_trajectory(K, alpha, v, res.iterates), wit))
                    out.append(_tag(BoundReport("iterations", res.iterations,
                                                math.ceil(math.log(5e-11) / math.log(alpha)), slack=0), wit))
                if "closed_form" in fams:
                    out.append(_tag(BoundReport("closed_form_agreement",
                                                float(np.abs(res.vector - xstar).sum()), 1e-9, slack=0.0), wit))
                if "coldstart" in fams:
                    out.append(_tag(check_coldstart_floor(xstar, alpha, v), wit))
            if "perturbation" in fams:
                Kt = random_kernel(n, rng, v)
                out.append(_tag(check_perturbation(K, Kt, alpha, v), wit))

    n = max(cfg["sizes"])
    if "sybil_sandwich" in fams:
        size = max(1, n // 10)
        clique = np.arange(size)
        u = np.full(n, 1.0 / n)
        for label, K in (("into", into_set_kernel(n, clique)), ("avoid", avoiding_set_kernel(n, clique))):
            scn = SybilScenario(clique, closed_form_rank(K, alpha, u), u, alpha, 0.5, u)
            lo, hi = check_usage_sandwich(scn)
            tight = hi if label == "into" else lo
            out.extend(_tag(r, {"construction": label}) for r in (lo, hi))
            out.append(_tag(BoundReport(f"sybil_tight_{label}", abs(tight.rhs - tight.lhs), 0.0), {"construction": label}))
        for trial in range(trials):
            P, _, clique = pumped_sybil_kernels(n, int(rng.integers(1, n // 4 + 1)), rng)
            scn = SybilScenario(clique, closed_form_rank(P, alpha, u), u, alpha, 0.5, u)
            out.extend(_tag(r, {"trial": trial}) for r in check_usage_sandwich(scn))
    if "sybil_fused" in fams:
        u = np.full(n, 1.0 / n)
        done = 0
        while done < trials:
            P, Q, clique = pumped_sybil_kernels(n, int(rng.integers(1, n // 4 + 1)), rng)
            y = closed_form_rank(Q, alpha, u)
            if y[clique].sum() > 0.9:
                continue
            x = closed_form_rank(P, alpha, u)
            for p in (0.25, 0.5, 0.75, 1.0):
                out.append(_tag(check_fused_bound(SybilScenario(clique, x, y, alpha, p, u)), {"trial": done, "p": p}))
            done += 1
    if "monotonicity" in fams:
        hp = RankHyperparams(alpha=alpha, beta=alpha)
        m = min(n, 30)
        u = np.full(m, 1.0 / m)
        for trial in range(trials):
            snap = random_snapshot(m, 2, rng)
            key = list(snap)[int(rng.integers(len(snap)))]
            traj = injection_trajectory(snap, key, 5, UtilityWeights(), (u, u), hp, task=key[2])
            out.append(_tag(check_monotone(traj), {"trial": trial, "edge": list(map(int, key))}))
    return out


def random_snapshot(n: int, tasks: int, rng: np.random.Generator, edges: int | None = None) -> dict:
    """Random decayed telemetry over ``n`` agents for property checks."""
    edges = edges or 3 * n
    snap = {}
    for _ in range(edges):
        i, j = (int(a) for a in rng.integers(n, size=2))
        k = int(rng.integers(tasks))
        N = float(rng.uniform(0.5, 20))
        theta = rng.uniform(0.2, 0.95)
        snap[(i, j, k)] = SufficientStats(
            N, N * theta, N * rng.uniform(0.2, 1.0), N * rng.uniform(100, 500),
            N * rng.uniform(0.3, 1.5), N * rng.uniform(0.0, 0.3),
        )
    return snap


def _tag(report: BoundReport, witness: dict) -> BoundReport:
    if not report.holds:
        report.witness = {**witness, **(report.__dict__.get("witness") or {})}
    return report


def dumps_witness(report: BoundReport) -> str:
    return json.dumps({"name": report.name, "lhs": report.lhs, "rhs": report.rhs,
                       "slack": report.slack, "witness": report.witness}, default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)
