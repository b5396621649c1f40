"""Ranking quality against ground-truth competence.

All top-k selections order agents by descending score and break ties by
ascending agent id.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .rank import ordering

METRICS_HEADER = ("experiment", "regime", "seed", "epoch", "task", "method", "metric", "value")


@dataclass(frozen=True)
class EvalInput:
    rank: np.ndarray
    truth: np.ndarray
    k: int
    clique: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "rank", np.asarray(self.rank, dtype=float))
        object.__setattr__(self, "truth", np.asarray(self.truth, dtype=float))
        if self.rank.shape != self.truth.shape:
            raise ValueError("rank and truth must cover the same agents")
        if not 1 <= self.k <= self.rank.shape[0]:
            raise ValueError(f"k must lie in [1, {self.rank.shape[0]}], got {self.k}")


def top_k(rank, k: int, exclude=()) -> np.ndarray:
    order = ordering(rank)
    if len(exclude):
        order = order[~np.isin(order, np.asarray(list(exclude)))]
    if k > order.shape[0]:
        raise ValueError(f"k={k} exceeds the {order.shape[0]} eligible agents")
    return order[:k]


def quality_at_k(inp: EvalInput) -> float:
    return float(inp.truth[top_k(inp.rank, inp.k)].mean())


def quality_at_k_excluding(rank, truth, k: int, excluded) -> float:
    """Mean truth of the top-k agents after removing ``excluded`` (e.g. a Sybil clique)."""
    truth = np.asarray(truth, dtype=float)
    return float(truth[top_k(rank, k, excluded)].mean())


def _dcg(gains: np.ndarray) -> float:
    return float((gains / np.log2(np.arange(2, gains.shape[0] + 2))).sum())


def ndcg_at_k(inp: EvalInput) -> float:
    """DCG@k with raw competence as gain over the ideal DCG@k; 1.0 when all gains are zero."""
    ideal = _dcg(np.sort(inp.truth)[::-1][: inp.k])
    if ideal <= 0:
        return 1.0
    return _dcg(inp.truth[top_k(inp.rank, inp.k)]) / ideal


def regret_at_k(inp: EvalInput) -> float:
    return float(inp.truth.max() - quality_at_k(inp))


def rank_correlations(rank, truth) -> tuple[float | None, float | None]:
    """Tie-adjusted Spearman rho and Kendall tau-b; ``None`` where undefined."""
    rank = np.asarray(rank, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if rank.shape[0] < 2 or np.all(truth == truth[0]) or np.all(rank == rank[0]):
        return None, None
    rho = stats.spearmanr(rank, truth).statistic
    tau = stats.kendalltau(rank, truth).statistic
    fix = lambda c: None if c is None or np.isnan(c) else float(c)  # noqa: E731
    return fix(rho), fix(tau)


def sybil_mass(rank, clique) -> float:
    idx = np.asarray(list(clique), dtype=int)
    return float(np.asarray(rank, dtype=float)[idx].sum()) if idx.size else 0.0


def standard_metrics(rank, truth, k: int = 10) -> dict:
    inp = EvalInput(rank, truth, k)
    rho, tau = rank_correlations(rank, truth)
    return {
        f"quality@{k}": quality_at_k(inp),
        f"ndcg@{k}": ndcg_at_k(inp),
        "spearman": rho,
        "kendall": tau,
        f"regret@{k}": regret_at_k(inp),
    }


class MetricsWriter:
    """Rows of the shared metrics CSV; ``None`` values are written empty."""

    def __init__(self, path: str | Path):
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh)
        self._w.writerow(METRICS_HEADER)

    def row(self, experiment, regime, seed, epoch, task, method, metric, value):
        self._w.writerow([experiment, regime, seed, epoch, task, method, metric,
                          "" if value is None else repr(float(value))])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
