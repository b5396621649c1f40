"""``dovis`` command line: simulate, rank a report stream, run experiments, check bounds.

Exit codes: 0 success, 1 bound or acceptance violation, 2 usage or config
error, 3 data validation error.
"""
from __future__ import annotations

import json
import os
import sys
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import click

from . import __version__
from .config import ConfigError, RunConfig, load
from .experiments import EXPERIMENTS, method_ranks, run_experiment, summary_json
from .guarantees import dumps_witness, run_suite
from .kernels import edge_arrays, uniform
from .metrics import MetricsWriter, standard_metrics, sybil_mass
from .rank import rank_pipeline, write_ranks_csv
from .sim import run_simulation, write_truth_csv
from .telemetry import (
    AcceptAll,
    CalleeAck,
    HmacScheme,
    IngestStatus,
    TelemetryStore,
    close_epoch,
    ingest_ack,
    ingest_report,
    read_jsonl,
    write_jsonl,
)

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3
OUT_ENV = "DOVIS_OUT"


class DataError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config_sha256: str | None
    seeds: list
    out_dir: str
    version: str = __version__
    started: float = field(default_factory=time.time)
    finished: float | None = None
    status: str = "running"
    outputs: list = field(default_factory=list)

    def write(self) -> None:
        path = Path(self.out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def finish(self, status: str, outputs=()) -> None:
        self.finished = time.time()
        self.status = status
        self.outputs = sorted(str(Path(p).name) for p in outputs)
        self.write()


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _out_dir(out: str | None, command: str) -> Path:
    root = Path(out) if out else Path(os.environ.get(OUT_ENV, "runs")) / command
    root.mkdir(parents=True, exist_ok=True)
    return root


def _load(path, seed) -> RunConfig:
    try:
        cfg = load(path) if path else RunConfig()
    except ConfigError as exc:
        _fail(EXIT_USAGE, str(exc))
    return cfg.with_seed(seed) if seed is not None else cfg


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="dovis")
def main():
    """Usage-competence agent ranking: simulation, ranking and diagnostics."""


@main.command()
@click.argument("config_path", type=click.Path(dir_okay=False), required=False)
@click.option("--out", "out", type=click.Path(file_okay=False), help="Output directory.")
@click.option("--seed", type=int, default=None, help="Override the configured seed.")
def simulate(config_path, out, seed):
    """Run the closed-loop simulation and write reports, truth, ranks and metrics."""
    cfg = _load(config_path, seed)
    out_dir = _out_dir(out, "simulate")
    world = cfg.world
    man = RunManifest("simulate", config_path, cfg.sha256 if config_path else None, [world.seed], str(out_dir))
    man.write()

    paths = {k: out_dir / f for k, f in (
        ("reports", "reports.jsonl"), ("truth", "truth.csv"), ("ranks", "ranks.csv"),
        ("metrics", "metrics.csv"), ("keys", "keys.json"))}
    weights = cfg.utility_weights()
    with open(paths["reports"], "w", encoding="utf-8") as fh:
        try:
            tl = run_simulation(world, cfg.hp, weights, on_reports=lambda reps: write_jsonl(reps, fh))
        except RuntimeError as exc:
            man.finish("failed")
            _fail(EXIT_VIOLATION, f"simulation invariant violated: {exc}")
    write_truth_csv(tl, paths["truth"])
    write_ranks_csv(tl.final.ranks.fused(), paths["ranks"])
    if tl.keys is not None:
        paths["keys"].write_text(json.dumps(tl.keys.to_json(), indent=1, sort_keys=True), encoding="utf-8")
    else:
        del paths["keys"]
    rec = tl.final
    with MetricsWriter(paths["metrics"]) as mw:
        for task in range(tl.world.d):
            truth = rec.theta[:, task]
            for method, r in method_ranks(rec, task).items():
                for metric, val in standard_metrics(r, truth).items():
                    mw.row("simulate", world.regime, world.seed, rec.epoch, task, method, metric, val)
                mw.row("simulate", world.regime, world.seed, rec.epoch, task, method, "sybil_mass",
                       sybil_mass(r, tl.world.clique))
    man.finish("ok", paths.values())
    click.echo(f"wrote {', '.join(p.name for p in paths.values())} to {out_dir}")


def replay(records, n: int, tasks, cfg: RunConfig, verifier, strict: bool):
    """Ingest a report stream epoch by epoch and rank the final epoch's snapshot."""
    tally: Counter = Counter()
    by_epoch: dict = {}
    for rec in records:
        by_epoch.setdefault(rec.epoch_id, []).append(rec)
    store = TelemetryStore()
    snapshot: dict = {}
    if by_epoch:
        first, last = min(by_epoch), max(by_epoch)
        store.current_epoch = first
        for e in range(first, last + 1):
            for rec in by_epoch.get(e, []):
                res = ingest_ack(store, rec, verifier) if isinstance(rec, CalleeAck) else ingest_report(store, rec, verifier)
                if res.status is IngestStatus.REJECTED:
                    tally[f"rejected:{res.reason.split(':')[0]}"] += 1
                    if strict:
                        raise DataError(f"epoch {e} record {rec.key}: {res.reason}")
                else:
                    tally[res.status.value] += 1
            snapshot = close_epoch(store)
    v = uniform(n)
    ranks = rank_pipeline(edge_arrays(snapshot), cfg.utility_weights(), (v, v), cfg.hp, tasks)
    return ranks, tally


@main.command()
@click.argument("reports_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Run config (hyperparams, weights, agents, tasks).")
@click.option("--keys", "keys_path", type=click.Path(exists=True, dir_okay=False), help="Keyring JSON; signatures are not checked without it.")
@click.option("--out", "out", type=click.Path(dir_okay=False), help="Ranks CSV path.")
@click.option("--strict/--lenient", default=True, show_default=True, help="Fail on any rejected record, or skip and count.")
def rank(reports_path, config_path, keys_path, out, strict):
    """Ingest a JSONL report stream and write per-task and global ranks for the final epoch."""
    cfg = _load(config_path, None)
    try:
        records = list(read_jsonl(reports_path))
    except (ValueError, OSError) as exc:
        _fail(EXIT_DATA, str(exc))
    if keys_path:
        try:
            verifier = HmacScheme.from_json(json.loads(Path(keys_path).read_text(encoding="utf-8")))
        except (ValueError, AttributeError) as exc:
            _fail(EXIT_USAGE, f"bad keyring {keys_path}: {exc}")
    else:
        verifier = AcceptAll()

    n = cfg.rank.get("n_agents", cfg.world.n if config_path else None)
    tasks = cfg.rank.get("tasks", list(range(cfg.world.d)) if config_path else None)
    if n is None:
        ids = [a for r in records for a in r.key[:2]]
        if not ids:
            _fail(EXIT_USAGE, "empty report stream: set [rank] n_agents in a config")
        n = max(ids) + 1
    if tasks is None:
        tasks = sorted({r.key[2] for r in records})
    try:
        ranks, tally = replay(records, int(n), tasks, cfg, verifier, strict)
    except (DataError, ValueError) as exc:
        _fail(EXIT_DATA, f"{reports_path}: {exc}")
    out_path = Path(out) if out else _out_dir(None, "rank") / "ranks.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_ranks_csv(ranks.fused(), out_path)
    summary = ", ".join(f"{k}={v}" for k, v in sorted(tally.items())) or "no records"
    click.echo(f"{summary}; wrote {out_path}")


@main.command()
@click.argument("name", type=click.Choice(EXPERIMENTS))
@click.argument("config_path", type=click.Path(dir_okay=False), required=False)
@click.option("--out", "out", type=click.Path(file_okay=False), help="Output directory.")
@click.option("--seed", type=int, default=None, help="Run a single seed instead of the configured list.")
def experiment(name, config_path, out, seed):
    """Run one of the scripted experiments."""
    cfg = _load(config_path, seed)
    out_dir = _out_dir(out, name)
    man = RunManifest(f"experiment {name}", config_path, cfg.sha256 if config_path else None,
                      list(cfg.experiment.seeds), str(out_dir))
    man.write()
    result = run_experiment(name, cfg.experiment)
    paths = result.write(out_dir)
    summary = out_dir / "summary.json"
    summary.write_text(summary_json(result) + "\n", encoding="utf-8")
    man.finish("ok", [*paths, summary])
    click.echo(f"{name}: {len(result.rows)} metric rows, {len(result.series)} plot points -> {out_dir}")


@main.command("verify-bounds")
@click.argument("config_path", type=click.Path(dir_okay=False), required=False)
@click.option("--out", "out", type=click.Path(dir_okay=False), help="Also write all reports as JSON lines here.")
@click.option("--corrupt-kernel", is_flag=True, hidden=True, help="Negative control: plant a row summing to 0.9.")
def verify_bounds(config_path, out, corrupt_kernel):
    """Check the convergence, floor, perturbation, Sybil and monotonicity bounds."""
    cfg = _load(config_path, None)
    try:
        reports = run_suite(cfg.bounds, corrupt=corrupt_kernel)
    except ValueError as exc:
        _fail(EXIT_USAGE, str(exc))
    failed = [r for r in reports if not r.holds]
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            for r in reports:
                fh.write(dumps_witness(r) + "\n")
    counts = Counter(r.name for r in reports)
    for name in sorted(counts):
        bad = sum(1 for r in failed if r.name == name)
        click.echo(f"{name}: {counts[name] - bad}/{counts[name]} hold")
    for r in failed:
        click.echo(f"VIOLATION {dumps_witness(r)}", err=True)
    sys.exit(EXIT_VIOLATION if failed else EXIT_OK)


if __name__ == "__main__":  # pragma: no cover
    main()
