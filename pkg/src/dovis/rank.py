"""Teleported fixed points for usage and competence, and their geometric fusion."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable

import numpy as np
import scipy.linalg as la

from .kernels import KernelError, StochasticKernel, UtilityWeights, as_simplex, build_kernels, edge_arrays, EdgeArrays

STOCHASTIC_ATOL = 1e-9
DENSE_LIMIT = 4000
GLOBAL = "GLOBAL"


@dataclass(frozen=True)
class RankHyperparams:
    alpha: float = 0.85
    beta: float = 0.85
    p: float = 0.5
    tol: float = 1e-10
    max_iter: int = 200

    def __post_init__(self):
        for name in ("alpha", "beta"):
            t = getattr(self, name)
            if not 0 < t < 1:
                raise ValueError(f"{name} must lie strictly inside (0, 1), got {t}")
        if not 0 <= self.p <= 1:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be a positive integer")


@dataclass
class FixedPointResult:
    vector: np.ndarray
    iterations: int
    final_residual: float
    iterates: list | None = None


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, result: FixedPointResult):
        super().__init__(msg)
        self.result = result


def iteration_bound(teleport: float, tol: float) -> int:
    """Worst-case iterations until successive iterates are within ``tol`` in l1."""
    return math.ceil(math.log(tol / 2) / math.log(teleport))


def _check(kernel: StochasticKernel, teleport: float, prior) -> np.ndarray:
    if not 0 < teleport < 1:
        raise ValueError(f"teleport weight must lie in (0, 1), got {teleport}")
    prior = as_simplex(prior, kernel.n)
    err = kernel.stochasticity_error()
    if err > STOCHASTIC_ATOL:
        raise KernelError(f"kernel is not row-stochastic (max row error {err:.3g})")
    return prior


def fixed_point(kernel: StochasticKernel, teleport: float, prior, tol: float = 1e-10,
                max_iter: int = 200, x0=None, record: bool = False) -> FixedPointResult:
    """Power iteration ``x <- teleport * P^T x + (1 - teleport) * prior``.

    Starts from ``prior`` unless ``x0`` is given and stops once successive
    iterates differ by at most ``tol`` in l1. With ``record=True`` every
    iterate (including the start) is kept on the result.

    Raises
    ------
    KernelError
        If the kernel rows are not on the simplex.
    ConvergenceError
        If ``max_iter`` updates do not reach ``tol``; carries the last iterate.
    """
    prior = _check(kernel, teleport, prior)
    x = prior.copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    base = (1 - teleport) * prior
    trail = [x.copy()] if record else None
    residual = math.inf
    for it in range(1, max_iter + 1):
        nxt = teleport * kernel.rmatvec(x) + base
        residual = float(np.abs(nxt - x).sum())
        x = nxt
        if record:
            trail.append(x.copy())
        if residual <= tol:
            return FixedPointResult(x, it, residual, trail)
    res = FixedPointResult(x, max_iter, residual, trail)
    raise ConvergenceError(f"no convergence to {tol:g} in {max_iter} iterations (residual {residual:.3g})", res)


def closed_form_rank(kernel: StochasticKernel, teleport: float, prior) -> np.ndarray:
    """Direct solve of ``(I - teleport * P^T) x = (1 - teleport) * prior``."""
    prior = _check(kernel, teleport, prior)
    if kernel.n > DENSE_LIMIT:
        raise ValueError(f"dense solve limited to n <= {DENSE_LIMIT} (got {kernel.n})")
    A = np.eye(kernel.n) - teleport * kernel.to_dense().T
    return la.solve(A, (1 - teleport) * prior)


def neumann_rank(kernel: StochasticKernel, teleport: float, prior, terms: int) -> np.ndarray:
    """Truncated series ``(1 - a) * sum_{t < terms} a^t (P^T)^t prior``."""
    prior = np.asarray(prior, dtype=float)
    term = prior.copy()
    total = np.zeros_like(prior)
    for t in range(terms):
        total += term
        term = teleport * kernel.rmatvec(term)
    return (1 - teleport) * total


def fuse(x, y, p: float) -> np.ndarray:
    """Normalized geometric fusion ``x^p * y^(1-p)``, computed in log space."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("usage and competence vectors differ in length")
    if not 0 <= p <= 1:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if np.any(~(x > 0)) or np.any(~(y > 0)):
        raise ValueError("fusion requires strictly positive inputs")
    if p == 1:
        return x / x.sum()
    if p == 0:
        return y / y.sum()
    logz = p * np.log(x) + (1 - p) * np.log(y)
    z = np.exp(logz - logz.max())
    return z / z.sum()


@dataclass
class TaskRanks:
    usage: np.ndarray
    competence: np.ndarray
    fused: np.ndarray
    usage_iterations: int = 0
    competence_iterations: int = 0


@dataclass
class PipelineResult:
    per_task: dict = field(default_factory=dict)
    overall: TaskRanks | None = None

    def fused(self) -> dict:
        out = {k: t.fused for k, t in self.per_task.items()}
        out[GLOBAL] = self.overall.fused
        return out


def rank_kernels(P: StochasticKernel, Q: StochasticKernel, v, w, hp: RankHyperparams) -> TaskRanks:
    xr = fixed_point(P, hp.alpha, v, hp.tol, hp.max_iter)
    yr = fixed_point(Q, hp.beta, w, hp.tol, hp.max_iter)
    return TaskRanks(xr.vector, yr.vector, fuse(xr.vector, yr.vector, hp.p), xr.iterations, yr.iterations)


def rank_pipeline(snapshot, weights: UtilityWeights, priors, hp: RankHyperparams,
                  tasks: Iterable[Hashable], drop_self: bool = False) -> PipelineResult:
    """Per-task ranks from task-filtered kernels plus a global rank from all edges."""
    v, w = priors
    edges = snapshot if isinstance(snapshot, EdgeArrays) else edge_arrays(snapshot)
    out = PipelineResult()
    for k in tasks:
        P, Q = build_kernels(edges, weights, v, w, task_filter=k, drop_self=drop_self)
        out.per_task[k] = rank_kernels(P, Q, v, w, hp)
    P, Q = build_kernels(edges, weights, v, w, drop_self=drop_self)
    out.overall = rank_kernels(P, Q, v, w, hp)
    return out


def ordering(scores, ids=None) -> np.ndarray:
    """Indices by descending score, ties broken by ascending agent id."""
    scores = np.asarray(scores, dtype=float)
    ids = np.arange(scores.shape[0]) if ids is None else np.asarray(ids)
    return np.lexsort((ids, -scores))


def write_ranks_csv(ranks: dict, path: str | Path) -> None:
    """``task,agent,rank`` rows; tasks in sorted order with ``GLOBAL`` last."""
    tasks = sorted((k for k in ranks if k != GLOBAL), key=lambda k: (str(type(k)), k))
    if GLOBAL in ranks:
        tasks.append(GLOBAL)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["task", "agent", "rank"])
        for k in tasks:
            vec = np.asarray(ranks[k], dtype=float)
            for a in ordering(vec):
                wr.writerow([k, int(a), repr(float(vec[a]))])


def read_ranks_csv(path: str | Path) -> dict:
    out: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["task"], {})[int(row["agent"])] = float(row["rank"])
    return {k: np.array([d[a] for a in sorted(d)]) for k, d in out.items()}
