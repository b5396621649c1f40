"""Acceptance checks, one test per criterion.

Each test prints a ``PASS``/``FAIL`` line with the measured quantities and
then asserts. Run ``pytest tests/test_acceptance.py -v`` to see the lines.
"""
import math
import time
from dataclasses import replace
from itertools import permutations

import numpy as np
import pytest
from click.testing import CliRunner

from dovis.cli import main
from dovis.experiments import (
    METHODS,
    ExperimentConfig,
    exp1_baselines,
    exp2_p_sweep_frozen,
    exp3_shock_halflife,
    exp5_sybil,
    focal_caller,
)
from dovis.guarantees import (
    SybilScenario,
    avoiding_set_kernel,
    check_fused_bound,
    check_monotone,
    check_perturbation,
    injection_trajectory,
    into_set_kernel,
    pumped_sybil_kernels,
    random_kernel,
    random_prior,
    random_snapshot,
)
from dovis.kernels import UtilityWeights, uniform
from dovis.rank import RankHyperparams, closed_form_rank, fixed_point
from dovis.sim import WorldConfig, run_simulation
from dovis.telemetry import (
    AcceptAll,
    CallerReport,
    DecayParams,
    HmacScheme,
    IngestStatus,
    SufficientStats,
    TelemetryStore,
    close_epoch,
    derive_key,
    fold_decay,
    ingest_report,
)

pytestmark = pytest.mark.slow
ALPHA = 0.85
RNG_SEED = 20240601


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return emit


def random_instances(n_per_size=50, sizes=(10, 100)):
    rng = np.random.default_rng(RNG_SEED)
    for n in sizes:
        for _ in range(n_per_size):
            v = random_prior(n, rng)
            yield n, v, random_kernel(n, rng, v)


def test_c01_contraction_and_convergence(report):
    t0 = time.perf_counter()
    bound = math.ceil(math.log(5e-11) / math.log(ALPHA))
    worst_step = worst_geo = -math.inf
    max_iter = 0
    for _, v, K in random_instances():
        res = fixed_point(K, ALPHA, v, tol=1e-10, record=True)
        xstar = closed_form_rank(K, ALPHA, v)
        errs = [np.abs(it - xstar).sum() for it in res.iterates]
        for t in range(len(errs)):
            worst_geo = max(worst_geo, errs[t] - ALPHA ** t * errs[0])
            if t + 1 < len(errs):
                worst_step = max(worst_step, errs[t + 1] - ALPHA * errs[t])
        max_iter = max(max_iter, res.iterations)
    dt = time.perf_counter() - t0
    ok = worst_step <= 1e-12 and worst_geo <= 1e-10 and max_iter <= bound == 146 and dt < 5
    report(1, ok, f"100 kernels; worst step excess {worst_step:.2e}, worst geometric excess {worst_geo:.2e}, "
                  f"max iterations {max_iter} <= {bound}, {dt:.2f}s")


def test_c02_closed_form_agreement(report):
    t0 = time.perf_counter()
    worst = max(np.abs(fixed_point(K, ALPHA, v).vector - closed_form_rank(K, ALPHA, v)).sum()
                for _, v, K in random_instances(50, (100,)))
    dt = time.perf_counter() - t0
    report(2, worst <= 1e-9 and dt < 5, f"50 instances n=100; max l1 gap {worst:.2e}, {dt:.2f}s")


def test_c03_coldstart_floor(report):
    worst = max(float(((1 - ALPHA) * v - closed_form_rank(K, ALPHA, v)).max()) for _, v, K in random_instances())
    report(3, worst <= 1e-12, f"max (1-a)v_j - x_j over all coordinates = {worst:.2e}")


def test_c04_perturbation(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(RNG_SEED + 4)
    reps = []
    for trial in range(100):
        n = (10, 50, 100)[trial % 3]
        v = random_prior(n, rng)
        reps.append(check_perturbation(random_kernel(n, rng, v), random_kernel(n, rng, v), ALPHA, v))
    dt = time.perf_counter() - t0
    worst = max(r.lhs - r.rhs for r in reps)
    report(4, all(r.holds for r in reps) and dt < 10,
           f"100 pairs; all hold={all(r.holds for r in reps)}, max lhs-rhs {worst:.3g}, {dt:.2f}s")


def test_c05_sybil_sandwich_tightness(report):
    n, clique = 100, np.arange(10)
    u = uniform(n)
    x_in = closed_form_rank(into_set_kernel(n, clique), ALPHA, u)[clique].sum()
    x_out = closed_form_rank(avoiding_set_kernel(n, clique), ALPHA, u)[clique].sum()
    ok = abs(x_in - (ALPHA + (1 - ALPHA) * 0.1)) <= 1e-10 and abs(x_out - (1 - ALPHA) * 0.1) <= 1e-10
    report(5, ok, f"all-into-S x_S={x_in:.12f} (0.865), isolated x_S={x_out:.12f} (0.015)")


def test_c06_fused_sybil_bound(report):
    rng = np.random.default_rng(RNG_SEED + 6)
    n = 100
    u = uniform(n)
    reps, scenarios = [], 0
    while scenarios < 100:
        P, Q, clique = pumped_sybil_kernels(n, int(rng.integers(1, 26)), rng)
        y = closed_form_rank(Q, ALPHA, u)
        if y[clique].sum() > 0.9:
            continue
        x = closed_form_rank(P, ALPHA, u)
        for p in (0.25, 0.5, 0.75, 1.0):
            reps.append(check_fused_bound(SybilScenario(clique, x, y, ALPHA, p, u)))
        scenarios += 1
    worst = max(r.lhs - r.rhs for r in reps)
    report(6, all(r.holds for r in reps), f"100 scenarios x 4 p values; max r_S - bound {worst:.3g}")


def test_c07_monotonicity(report):
    hp = RankHyperparams()
    rng = np.random.default_rng(RNG_SEED + 7)
    families = {"random": [], "simulated": []}
    for _ in range(100):
        m = 30
        snap = random_snapshot(m, 2, rng)
        key = list(snap)[int(rng.integers(len(snap)))]
        families["random"].append(injection_trajectory(snap, key, 5, UtilityWeights(), (uniform(m), uniform(m)), hp, task=key[2]))
    for seed in range(5):
        tl = run_simulation(WorldConfig(seed=seed, epochs=6, sign_reports=False))
        snap = tl.snapshots[5]
        for task in range(3):
            j = tl.world.specialist(task)
            key = (focal_caller(snap, j, task, 100), j, task)
            families["simulated"].append(injection_trajectory(snap, key, 10, UtilityWeights(), (uniform(100), uniform(100)), hp, task=task))
    worst = max(float(np.max(-np.diff(t))) for f in families.values() for t in f)
    holds = all(check_monotone(t).holds for f in families.values() for t in f)
    strict = {name: any(np.any(np.diff(t) > 1e-12) for t in f) for name, f in families.items()}
    report(7, holds and all(strict.values()),
           f"{sum(map(len, families.values()))} trials; worst single-step drop {worst:.2e}; strict increase seen {strict}")


def test_c08_exp2_endpoints(report):
    res = exp2_p_sweep_frozen(ExperimentConfig())
    gaps = []
    for regime in ("clean", "realistic"):
        for seed in range(5):
            for task in range(3):
                for metric in ("quality@10", "ndcg@10"):
                    get = lambda m: res.values(metric, method=m, regime=regime, task=task, seed=seed)[0]  # noqa: E731
                    gaps.append(abs(get("UC(p=0)") - get("Comp")))
                    gaps.append(abs(get("UC(p=1)") - get("Usage")))
    report(8, max(gaps) <= 1e-12, f"{len(gaps)} endpoint comparisons, both regimes; max gap {max(gaps):.1e}")


def test_c09_exp1_ordering(report):
    t0 = time.perf_counter()
    res = exp1_baselines(replace(ExperimentConfig(), regimes=("clean",)))
    dt = time.perf_counter() - t0
    q = {m: res.mean("quality@10", method=m) for m in METHODS}
    ok = q["Oracle"] >= q["Comp"] and q["UC"] > q["Usage"] and abs(q["UC"] - q["Comp"]) <= 0.05 and dt < 120
    report(9, ok, "mean Quality@10 " + ", ".join(f"{m} {v:.4f}" for m, v in q.items()) + f"; {dt:.1f}s")


def test_c10_exp3_responsiveness(report):
    res = exp3_shock_halflife(replace(ExperimentConfig(), regimes=("clean",)))
    means = {H: res.mean("epochs_to_demotion", method=f"UC(H={H:g})") for H in (4.0, 8.0, 16.0)}
    ok = means[4.0] <= means[8.0] <= means[16.0]
    report(10, ok, "mean epochs to demotion " + ", ".join(f"H={H:g}: {v:.1f}" for H, v in means.items())
           + " (censored at 22)")


def test_c11_exp5_sybil(report):
    t0 = time.perf_counter()
    res = exp5_sybil(ExperimentConfig())
    dt = time.perf_counter() - t0
    lines, ok = [], dt < 180
    for task in range(3):
        sm = {m: res.mean("sybil_mass", method=m, task=task) for m in ("Usage", "UC", "Comp")}
        gap = res.mean("quality@10_exclSY", method="UC", task=task) - res.mean("quality@10_exclSY", method="Usage", task=task)
        ok &= sm["Usage"] > sm["UC"] > sm["Comp"] and 0.05 <= sm["UC"] <= 0.20 and gap > 0
        lines.append(f"task {task}: SybilMass Usage {sm['Usage']:.3f} > UC {sm['UC']:.3f} > Comp {sm['Comp']:.3f}, "
                     f"Q@10 exclSY gap {gap:+.3f}")
    report(11, ok, "; ".join(lines) + f"; {dt:.1f}s")


def test_c12_telemetry_suite(report):
    t0 = time.perf_counter()
    keys = HmacScheme({a: derive_key(b"acceptance", a) for a in range(4)})
    rng = np.random.default_rng(RNG_SEED + 12)

    # idempotency: replaying a stream changes nothing
    base = [keys.sign(CallerReport(0, i, j, 0, 5.0, 3.0), ts)
            for ts, (i, j) in enumerate([(0, 1), (1, 2), (2, 3), (0, 1)], start=1)]
    s1, s2 = TelemetryStore(), TelemetryStore()
    for r in base:
        ingest_report(s1, r, keys)
    for r in base + base:
        ingest_report(s2, r, keys)
    idem = close_epoch(s1) == close_epoch(s2)

    # last-write-wins: every arrival order keeps the latest timestamp
    versions = [keys.sign(CallerReport(0, 0, 1, 0, float(n), float(n) / 2), ts)
                for ts, n in zip((10, 30, 20, 40), (1, 4, 2, 3))]
    lww = True
    for order in permutations(versions):
        st = TelemetryStore()
        for r in order:
            ingest_report(st, r, keys)
        lww &= close_epoch(st)[(0, 1, 0)].N == 3.0

    # fold of decayed sums equals the direct weighted sum
    decay = DecayParams.from_half_life(8.0)
    raws = [SufficientStats(*rng.uniform(0, 10, 6)) for _ in range(30)]
    acc = SufficientStats()
    for r in raws:
        acc = fold_decay(acc, r, decay)
    T = len(raws)
    direct = sum(math.exp(-decay.lam * (T - 1 - t)) * raws[t].N for t in range(T))
    fold_err = abs(acc.N - direct) / direct

    # grace window: at epoch 5, epoch 3 is still open and epoch 2 is not
    st = TelemetryStore()
    for _ in range(5):
        close_epoch(st)
    late = ingest_report(st, keys.sign(CallerReport(3, 0, 1, 0, 1.0, 1.0), 1), keys)
    stale = ingest_report(st, keys.sign(CallerReport(2, 0, 1, 0, 1.0, 1.0), 1), keys)
    grace = late.status is IngestStatus.ACCEPTED and stale.status is IngestStatus.REJECTED and stale.reason == "stale_epoch"
    unsigned_ok = ingest_report(TelemetryStore(), CallerReport(0, 0, 1, 0, 1.0, 1.0), AcceptAll()).ok

    dt = time.perf_counter() - t0
    ok = idem and lww and fold_err <= 1e-9 and grace and unsigned_ok and dt < 5
    report(12, ok, f"idempotent={idem}, last-write-wins over 24 orders={lww}, fold rel err {fold_err:.1e}, "
                   f"grace window={grace}, {dt:.2f}s (property tests in test_telemetry.py)")


def test_c13_determinism(report, tmp_path):
    runner = CliRunner()
    outs = []
    for d in ("first", "second"):
        res = runner.invoke(main, ["simulate", "--seed", "0", "--out", str(tmp_path / d)])
        assert res.exit_code == 0, res.output
        outs.append((tmp_path / d / "metrics.csv").read_bytes())
    same = outs[0] == outs[1]
    report(13, same and len(outs[0]) > 0, f"two simulate runs, seed 0: metrics.csv byte-identical={same} ({len(outs[0])} bytes)")
