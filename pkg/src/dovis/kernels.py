"""Usage and competence kernels from a decayed telemetry snapshot.

Edge utilities combine a smoothed success posterior with log-damped latency
and cost, risk and quality. Usage weights are decayed call counts; competence
weights are counts scaled by ``softplus(utility)``. Rows are normalized into
Markov kernels, and rows without mass back off to a prior.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .telemetry import AggregateSnapshot

# row sums at or below this are treated as empty and backed off to the prior
ROW_FLOOR = 1e-12


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class UtilityWeights:
    success: float = 1.0
    latency: float = 0.2
    cost: float = 0.2
    risk: float = 0.5
    quality: float = 0.5
    alpha0: float = 1.0
    beta0: float = 1.0

    def __post_init__(self):
        for name in ("success", "latency", "cost", "risk", "quality"):
            if getattr(self, name) < 0:
                raise ValueError(f"utility weight {name} must be >= 0")
        if not (self.alpha0 > 0 and self.beta0 > 0):
            raise ValueError("pseudo-counts alpha0, beta0 must be positive")

    @property
    def theta(self) -> tuple[float, float, float, float, float]:
        return (self.success, self.latency, self.cost, self.risk, self.quality)

    def without_penalties(self) -> "UtilityWeights":
        """Drop the latency, cost and risk terms (clean-regime utility)."""
        return replace(self, latency=0.0, cost=0.0, risk=0.0)


def uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def as_simplex(v, n: int | None = None, name: str = "prior") -> np.ndarray:
    """Validate a strictly positive probability vector."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or (n is not None and v.shape[0] != n):
        raise ValueError(f"{name} must be a vector of length {n}")
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise ValueError(f"{name} must be strictly positive")
    if abs(v.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} must sum to 1 (got {v.sum()!r})")
    return v


def success_posterior(S, N, alpha0: float = 1.0, beta0: float = 1.0):
    """Beta-Bernoulli posterior mean ``(alpha0 + S) / (alpha0 + beta0 + N)``."""
    return (alpha0 + np.asarray(S, dtype=float)) / (alpha0 + beta0 + np.asarray(N, dtype=float))


def softplus(x):
    """``log(1 + e^x)`` without overflow."""
    return np.logaddexp(0.0, x)


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def edge_utility(p_hat, mean_latency, mean_cost, mean_risk, mean_quality, weights: UtilityWeights):
    """Task-level utility of an edge.

    Absent means (``None`` or NaN) fall back to neutral values: no latency,
    cost or risk penalty, and quality equal to ``p_hat``.
    """
    p_hat = np.asarray(p_hat, dtype=float)

    def fill(v, default):
        if v is None:
            return np.broadcast_to(default, p_hat.shape) if np.ndim(default) else np.full(p_hat.shape, default)
        v = np.asarray(v, dtype=float)
        return np.where(np.isnan(v), default, v)

    lat = fill(mean_latency, 0.0)
    cost = fill(mean_cost, 0.0)
    risk = fill(mean_risk, 0.0)
    qual = fill(mean_quality, p_hat)
    w = weights
    u = (
        w.success * logit(p_hat)
        - w.latency * np.log1p(lat)
        - w.cost * np.log1p(cost)
        - w.risk * risk
        + w.quality * qual
    )
    return u if u.ndim else float(u)


@dataclass(frozen=True)
class EdgeArrays:
    caller: np.ndarray
    callee: np.ndarray
    task: np.ndarray
    N: np.ndarray
    S: np.ndarray
    sum_q: np.ndarray  # NaN where absent
    sum_l: np.ndarray
    sum_c: np.ndarray
    sum_r: np.ndarray

    def __len__(self):
        return self.N.shape[0]

    def select(self, mask) -> "EdgeArrays":
        return EdgeArrays(*(getattr(self, f)[mask] for f in self.__dataclass_fields__))


def _nan(x):
    return np.nan if x is None else x


def edge_arrays(snapshot: AggregateSnapshot) -> EdgeArrays:
    keys = list(snapshot)
    stats = [snapshot[k] for k in keys]
    task = np.empty(len(keys), dtype=object)
    task[:] = [k[2] for k in keys]
    return EdgeArrays(
        caller=np.array([k[0] for k in keys], dtype=object),
        callee=np.array([k[1] for k in keys], dtype=object),
        task=task,
        N=np.array([s.N for s in stats], dtype=float),
        S=np.array([s.S for s in stats], dtype=float),
        sum_q=np.array([_nan(s.sum_q) for s in stats], dtype=float),
        sum_l=np.array([_nan(s.sum_l) for s in stats], dtype=float),
        sum_c=np.array([_nan(s.sum_c) for s in stats], dtype=float),
        sum_r=np.array([_nan(s.sum_r) for s in stats], dtype=float),
    )


def _agent_index(ids: np.ndarray, n: int, role: str) -> np.ndarray:
    arr = np.asarray(ids.tolist()) if len(ids) else np.zeros(0, dtype=np.int64)
    if arr.dtype.kind not in "iu":
        bad = next(a for a in ids if isinstance(a, bool) or not isinstance(a, (int, np.integer)))
        raise KernelError(f"unknown {role} id {bad!r} (agents are integers 0..{n - 1})")
    out_of_range = (arr < 0) | (arr >= n)
    if out_of_range.any():
        raise KernelError(f"unknown {role} id {arr[out_of_range][0]!r} (agents are 0..{n - 1})")
    return arr.astype(np.int64)


class StochasticKernel:
    """Row-stochastic ``n x n`` kernel: sparse rows plus rows backed off to ``prior``."""

    def __init__(self, rows: sp.csr_matrix, backoff: np.ndarray, prior: np.ndarray):
        self.rows = sp.csr_matrix(rows)
        self.backoff = np.asarray(backoff, dtype=bool)
        self.prior = np.asarray(prior, dtype=float)
        self.n = self.prior.shape[0]
        self._rows_t = None
        if self.rows.shape != (self.n, self.n) or self.backoff.shape != (self.n,):
            raise KernelError("kernel shape mismatch")

    @classmethod
    def from_weights(cls, W: sp.spmatrix, prior: np.ndarray) -> "StochasticKernel":
        W = sp.csr_matrix(W, dtype=float)
        totals = np.asarray(W.sum(axis=1)).ravel()
        backoff = totals <= ROW_FLOOR
        scale = np.where(backoff, 0.0, 1.0 / np.where(backoff, 1.0, totals))
        rows = sp.diags(scale) @ W
        rows.eliminate_zeros()
        return cls(rows.tocsr(), backoff, prior)

    @classmethod
    def from_dense(cls, M, prior=None) -> "StochasticKernel":
        """Wrap an explicit matrix as-is (no normalization; rows are not validated here)."""
        M = np.asarray(M, dtype=float)
        n = M.shape[0]
        prior = np.full(n, 1.0 / n) if prior is None else np.asarray(prior, dtype=float)
        return cls(sp.csr_matrix(M), np.zeros(n, dtype=bool), prior)

    def rmatvec(self, x: np.ndarray) -> np.ndarray:
        """``P^T x``, with backoff rows contributing ``prior * x_i``."""
        if self._rows_t is None:
            self._rows_t = self.rows.T.tocsr()
        out = self._rows_t @ x
        if self.backoff.any():
            out = out + self.prior * x[self.backoff].sum()
        return out

    def to_dense(self) -> np.ndarray:
        M = self.rows.toarray()
        M[self.backoff] = self.prior
        return M

    def row_sums(self) -> np.ndarray:
        s = np.asarray(self.rows.sum(axis=1)).ravel()
        s[self.backoff] = self.prior.sum()
        return s

    def stochasticity_error(self) -> float:
        """Largest deviation of a row from the simplex (sum error or negative entry)."""
        err = float(np.max(np.abs(self.row_sums() - 1.0))) if self.n else 0.0
        if self.rows.nnz and self.rows.data.min() < 0:
            err = max(err, float(-self.rows.data.min()))
        return err

    def materialized(self) -> "StochasticKernel":
        """Same kernel with backoff rows written out explicitly."""
        return StochasticKernel(sp.csr_matrix(self.to_dense()), np.zeros(self.n, dtype=bool), self.prior)


def edge_utilities(edges: EdgeArrays, weights: UtilityWeights) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        has = edges.N > 0
        denom = np.where(has, edges.N, 1.0)

        def mean(total):
            return np.where(has, total / denom, np.nan)

        p_hat = success_posterior(edges.S, edges.N, weights.alpha0, weights.beta0)
        return edge_utility(
            p_hat, mean(edges.sum_l), mean(edges.sum_c), mean(edges.sum_r), mean(edges.sum_q), weights
        )


def weight_matrices(edges: EdgeArrays, n: int, weights: UtilityWeights, drop_self: bool = False):
    """Usage weights ``U`` and competence weights ``C`` as sparse matrices."""
    i = _agent_index(edges.caller, n, "caller")
    j = _agent_index(edges.callee, n, "callee")
    N = edges.N
    C = N * softplus(edge_utilities(edges, weights)) if len(edges) else N
    if drop_self:
        keep = i != j
        i, j, N, C = i[keep], j[keep], N[keep], C[keep]
    U = sp.coo_matrix((N, (i, j)), shape=(n, n)).tocsr()
    Cm = sp.coo_matrix((C, (i, j)), shape=(n, n)).tocsr()
    U.sum_duplicates()
    Cm.sum_duplicates()
    return U, Cm


def build_kernels(snapshot, weights: UtilityWeights, v, w, task_filter=None, drop_self: bool = False):
    """Build ``(P, Q)`` from a snapshot (dict or precomputed :class:`EdgeArrays`).

    With ``task_filter`` only that task's edges contribute, giving per-task kernels.
    """
    v = as_simplex(v, name="usage prior")
    n = v.shape[0]
    w = as_simplex(w, n, name="competence prior")
    edges = snapshot if isinstance(snapshot, EdgeArrays) else edge_arrays(snapshot)
    if task_filter is not None and len(edges):
        edges = edges.select(edges.task == task_filter)
    U, C = weight_matrices(edges, n, weights, drop_self=drop_self)
    return StochasticKernel.from_weights(U, v), StochasticKernel.from_weights(C, w)


def write_kernel_csv(kernel: StochasticKernel, path: str | Path) -> None:
    """Debug dump: ``i,j,value`` triplets, then one ``i,*,prior`` line per backoff row."""
    coo = kernel.rows.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["i", "j", "value"])
        for t in order:
            wr.writerow([int(coo.row[t]), int(coo.col[t]), repr(float(coo.data[t]))])
        for i in np.flatnonzero(kernel.backoff):
            wr.writerow([int(i), "*", "prior"])
