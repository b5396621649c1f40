"""OAT-Lite telemetry records, epoch store, decayed statistics and verification.

Callers submit one signed :class:`CallerReport` per ``(callee, task)`` pair at
each epoch close. Reports are *snapshots* of exponentially decayed sufficient
statistics, so the indexer never sums across epochs; it deduplicates, checks
ranges and signatures, and assembles the latest epoch into an
:data:`AggregateSnapshot`.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import hmac
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Hashable, Iterable, Iterator, Mapping, Protocol, Sequence, Union

import numpy as np

SCHEMA_VERSION = "oat-lite/1"

REPORT_FIELDS = (
    "epoch_id",
    "caller_id",
    "callee_id",
    "task_id",
    "n_calls",
    "n_success",
    "sum_quality",
    "sum_latency",
    "sum_cost",
    "sum_risk",
    "schema_version",
    "signature",
)
ACK_FIELDS = (
    "epoch_id",
    "callee_id",
    "task_id",
    "n_calls_received",
    "schema_version",
    "signature",
)
SNAPSHOT_HEADER = ("caller", "callee", "task", "N", "S", "sum_q", "sum_l", "sum_c", "sum_r")

# relative slack for decayed sums that should satisfy S <= N exactly
_RANGE_RTOL = 1e-9


@dataclass(frozen=True)
class CallerReport:
    epoch_id: int
    caller_id: Hashable
    callee_id: Hashable
    task_id: Hashable
    n_calls: float
    n_success: float
    sum_quality: float | None = 0.0
    sum_latency: float | None = 0.0
    sum_cost: float | None = 0.0
    sum_risk: float | None = 0.0
    schema_version: str = SCHEMA_VERSION
    signature: str = ""

    @property
    def key(self) -> tuple:
        return (self.caller_id, self.callee_id, self.task_id, self.epoch_id)

    @property
    def signer(self) -> Hashable:
        return self.caller_id

    def to_json(self) -> dict:
        return {name: getattr(self, name) for name in REPORT_FIELDS}

    @classmethod
    def from_json(cls, obj: Mapping) -> "CallerReport":
        missing = [k for k in ("epoch_id", "caller_id", "callee_id", "task_id", "n_calls", "n_success") if k not in obj]
        if missing:
            raise ValueError(f"caller report missing fields: {', '.join(missing)}")
        kwargs = {name: obj[name] for name in REPORT_FIELDS if name in obj}
        for optional in ("sum_quality", "sum_latency", "sum_cost", "sum_risk"):
            kwargs.setdefault(optional, None)
        return cls(**kwargs)


@dataclass(frozen=True)
class CalleeAck:
    epoch_id: int
    callee_id: Hashable
    task_id: Hashable
    n_calls_received: float
    schema_version: str = SCHEMA_VERSION
    signature: str = ""

    @property
    def key(self) -> tuple:
        return (self.callee_id, self.task_id, self.epoch_id)

    @property
    def signer(self) -> Hashable:
        return self.callee_id

    def to_json(self) -> dict:
        return {name: getattr(self, name) for name in ACK_FIELDS}

    @classmethod
    def from_json(cls, obj: Mapping) -> "CalleeAck":
        return cls(**{name: obj[name] for name in ACK_FIELDS if name in obj})


Record = Union[CallerReport, CalleeAck]


def canonical_bytes(record: Record) -> bytes:
    """UTF-8 JSON array of every field except ``signature``, in wire order.

    ``json`` writes floats with ``repr``, i.e. the shortest round-trip decimal.
    """
    names = REPORT_FIELDS if isinstance(record, CallerReport) else ACK_FIELDS
    values = [getattr(record, n) for n in names if n != "signature"]
    return json.dumps(values, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


# --------------------------------------------------------------------------
# signatures


class SignatureVerifier(Protocol):
    def verify(self, record: Record) -> bool: ...

    def timestamp(self, record: Record) -> float: ...


def derive_key(secret: bytes, agent_id: Hashable) -> bytes:
    return hmac.new(secret, str(agent_id).encode("utf-8"), hashlib.sha256).digest()


class HmacScheme:
    """Reference keyed-hash signatures.

    A signature is ``"<timestamp>:<hex hmac-sha256>"``; the MAC covers the
    canonical serialization followed by the timestamp, so the timestamp used
    for last-write-wins cannot be altered without the signer's key.
    """

    def __init__(self, keys: Mapping[Hashable, bytes]):
        self.keys = {str(k): bytes(v) for k, v in keys.items()}

    def _mac(self, key: bytes, record: Record, ts: int) -> str:
        msg = canonical_bytes(record) + b"|" + str(ts).encode("ascii")
        return hmac.new(key, msg, hashlib.sha256).hexdigest()

    def sign(self, record: Record, timestamp: int):
        key = self.keys[str(record.signer)]
        ts = int(timestamp)
        return replace(record, signature=f"{ts}:{self._mac(key, record, ts)}")

    def timestamp(self, record: Record) -> float:
        head, _, _ = record.signature.partition(":")
        return int(head)

    def verify(self, record: Record) -> bool:
        key = self.keys.get(str(record.signer))
        if key is None:
            return False
        head, sep, digest = record.signature.partition(":")
        if not sep:
            return False
        try:
            ts = int(head)
        except ValueError:
            return False
        return hmac.compare_digest(digest, self._mac(key, record, ts))

    def to_json(self) -> dict:
        return {k: v.hex() for k, v in self.keys.items()}

    @classmethod
    def from_json(cls, obj: Mapping[str, str]) -> "HmacScheme":
        return cls({k: bytes.fromhex(v) for k, v in obj.items()})


class AcceptAll:
    """Verifier for trusted offline replays; every signature passes."""

    def verify(self, record: Record) -> bool:
        return True

    def timestamp(self, record: Record) -> float:
        head, sep, _ = record.signature.partition(":")
        try:
            return int(head) if sep else 0
        except ValueError:
            return 0


# --------------------------------------------------------------------------
# decayed statistics


@dataclass(frozen=True)
class DecayParams:
    lam: float

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam > 0):
            raise ValueError(f"decay rate must be positive and finite, got {self.lam}")

    @classmethod
    def from_half_life(cls, half_life: float) -> "DecayParams":
        if not half_life > 0:
            raise ValueError("half-life must be positive")
        return cls(math.log(2) / half_life)

    @property
    def half_life(self) -> float:
        return math.log(2) / self.lam

    @property
    def factor(self) -> float:
        """Per-epoch retention ``exp(-lam)``."""
        return math.exp(-self.lam)


def _opt_add(a, b):
    if a is None and b is None:
        return None
    return (a or 0.0) + (b or 0.0)


def _opt_scale(a, f):
    return None if a is None else a * f


@dataclass(frozen=True)
class SufficientStats:
    """Decayed aggregates for one ``(caller, callee, task)`` edge.

    ``None`` in a sum field means the reporter did not supply that feature.
    """

    N: float = 0.0
    S: float = 0.0
    sum_q: float | None = 0.0
    sum_l: float | None = 0.0
    sum_c: float | None = 0.0
    sum_r: float | None = 0.0

    def _mean(self, total):
        if total is None or self.N <= 0:
            return None
        return total / self.N

    @property
    def mean_quality(self):
        return self._mean(self.sum_q)

    @property
    def mean_latency(self):
        return self._mean(self.sum_l)

    @property
    def mean_cost(self):
        return self._mean(self.sum_c)

    @property
    def mean_risk(self):
        return self._mean(self.sum_r)

    def scaled(self, f: float) -> "SufficientStats":
        return SufficientStats(
            self.N * f, self.S * f, _opt_scale(self.sum_q, f), _opt_scale(self.sum_l, f),
            _opt_scale(self.sum_c, f), _opt_scale(self.sum_r, f),
        )

    def __add__(self, other: "SufficientStats") -> "SufficientStats":
        return SufficientStats(
            self.N + other.N, self.S + other.S, _opt_add(self.sum_q, other.sum_q),
            _opt_add(self.sum_l, other.sum_l), _opt_add(self.sum_c, other.sum_c),
            _opt_add(self.sum_r, other.sum_r),
        )

    @classmethod
    def from_report(cls, report: CallerReport) -> "SufficientStats":
        return cls(
            float(report.n_calls), float(report.n_success), report.sum_quality,
            report.sum_latency, report.sum_cost, report.sum_risk,
        )

    def as_tuple(self) -> tuple:
        return (self.N, self.S, self.sum_q, self.sum_l, self.sum_c, self.sum_r)


AggregateSnapshot = dict  # (caller, callee, task) -> SufficientStats


def fold_decay(stats, epoch_raw, decay: DecayParams):
    """Carry ``stats`` across one epoch close and add the epoch's raw sums.

    Works on :class:`SufficientStats`, snapshots (dicts of them) and numpy
    arrays of stacked fields alike.
    """
    f = decay.factor
    if isinstance(stats, SufficientStats):
        return stats.scaled(f) + epoch_raw
    if isinstance(stats, dict):
        out = {k: s.scaled(f) for k, s in stats.items()}
        for k, raw in epoch_raw.items():
            out[k] = out[k] + raw if k in out else SufficientStats() + raw
        return out
    return f * np.asarray(stats) + np.asarray(epoch_raw)


# --------------------------------------------------------------------------
# store


class IngestStatus(enum.Enum):
    ACCEPTED = "accepted"
    REPLACED = "replaced"
    DUPLICATE = "duplicate"
    REJECTED = "rejected"


@dataclass(frozen=True)
class IngestResult:
    status: IngestStatus
    reason: str | None = None

    @property
    def ok(self) -> bool:
        return self.status is not IngestStatus.REJECTED


@dataclass
class _Stored:
    record: Record
    stamp: float
    seq: int


@dataclass
class TelemetryStore:
    current_epoch: int = 0
    grace_epochs: int = 2
    reports: dict = field(default_factory=dict)
    acks: dict = field(default_factory=dict)
    _seq: int = 0

    def window(self) -> range:
        return range(max(0, self.current_epoch - self.grace_epochs), self.current_epoch + 1)

    def reports_for(self, epoch: int) -> list[CallerReport]:
        return [s.record for k, s in self.reports.items() if k[3] == epoch]

    def acks_for(self, epoch: int) -> list[CalleeAck]:
        return [s.record for k, s in self.acks.items() if k[2] == epoch]

    def snapshot(self, epoch: int) -> AggregateSnapshot:
        return {
            (r.caller_id, r.callee_id, r.task_id): SufficientStats.from_report(r)
            for r in self.reports_for(epoch)
        }

    def prune(self) -> None:
        low = self.current_epoch - self.grace_epochs
        self.reports = {k: s for k, s in self.reports.items() if k[3] >= low}
        self.acks = {k: s for k, s in self.acks.items() if k[2] >= low}


def _finite_nonneg(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) and x >= 0


def validate_report(report: CallerReport) -> str | None:
    """Return a description of the first range violation, or ``None``."""
    if not _finite_nonneg(report.n_calls):
        return "n_calls must be finite and >= 0"
    if not _finite_nonneg(report.n_success):
        return "n_success must be finite and >= 0"
    cap = report.n_calls * (1 + _RANGE_RTOL) + 1e-12
    if report.n_success > cap:
        return "n_success exceeds n_calls"
    for name in ("sum_quality", "sum_latency", "sum_cost", "sum_risk"):
        value = getattr(report, name)
        if value is not None and not _finite_nonneg(value):
            return f"{name} must be finite and >= 0"
    for name in ("sum_quality", "sum_risk"):
        value = getattr(report, name)
        if value is not None and value > cap:
            return f"{name} exceeds n_calls (per-call values lie in [0,1])"
    return None


def _ingest(store: TelemetryStore, table: dict, key: tuple, record: Record, verifier) -> IngestResult:
    if record.schema_version != SCHEMA_VERSION:
        return IngestResult(IngestStatus.REJECTED, "unsupported_schema")
    epoch = record.epoch_id
    if epoch < store.current_epoch - store.grace_epochs:
        return IngestResult(IngestStatus.REJECTED, "stale_epoch")
    if epoch > store.current_epoch:
        return IngestResult(IngestStatus.REJECTED, "future_epoch")
    if not verifier.verify(record):
        return IngestResult(IngestStatus.REJECTED, "bad_signature")
    stamp = verifier.timestamp(record)
    prior = table.get(key)
    if prior is not None:
        if prior.record == record:
            return IngestResult(IngestStatus.DUPLICATE)
        if stamp < prior.stamp:
            return IngestResult(IngestStatus.REJECTED, "superseded")
    store._seq += 1
    table[key] = _Stored(record, stamp, store._seq)
    return IngestResult(IngestStatus.ACCEPTED if prior is None else IngestStatus.REPLACED)


def ingest_report(store: TelemetryStore, report: CallerReport, verifier: SignatureVerifier) -> IngestResult:
    problem = validate_report(report)
    if problem is not None:
        return IngestResult(IngestStatus.REJECTED, f"range_violation: {problem}")
    return _ingest(store, store.reports, report.key, report, verifier)


def ingest_ack(store: TelemetryStore, ack: CalleeAck, verifier: SignatureVerifier) -> IngestResult:
    if not _finite_nonneg(ack.n_calls_received):
        return IngestResult(IngestStatus.REJECTED, "range_violation: n_calls_received must be finite and >= 0")
    return _ingest(store, store.acks, ack.key, ack, verifier)


def close_epoch(store: TelemetryStore) -> AggregateSnapshot:
    """Assemble the current epoch's snapshot, then advance and prune.

    Late reports for the closed epoch are still accepted within the grace
    window; ``store.snapshot(epoch)`` re-assembles it with them included.
    """
    snap = store.snapshot(store.current_epoch)
    store.current_epoch += 1
    store.prune()
    return snap


# --------------------------------------------------------------------------
# verification cross-checks


@dataclass(frozen=True)
class Discrepancy:
    callee: Hashable
    task: Hashable
    caller_total: float
    ack_total: float


def cross_check(reports: Iterable[CallerReport], acks: Iterable[CalleeAck], tolerance: float = 0.05) -> list[Discrepancy]:
    totals: dict = {}
    for r in reports:
        k = (r.callee_id, r.task_id)
        totals[k] = totals.get(k, 0.0) + float(r.n_calls)
    out = []
    for a in acks:
        k = (a.callee_id, a.task_id)
        got = totals.get(k, 0.0)
        received = float(a.n_calls_received)
        if abs(got - received) > tolerance * max(1.0, received):
            out.append(Discrepancy(a.callee_id, a.task_id, got, received))
    return out


def sample_audits(edges: Sequence, rate: float, rng: np.random.Generator) -> list:
    if not 0 < rate <= 1:
        raise ValueError(f"audit rate must lie in (0, 1], got {rate}")
    if len(edges) == 0:
        return []
    picks = rng.random(len(edges)) < rate
    return [e for e, keep in zip(edges, picks) if keep]


# --------------------------------------------------------------------------
# wire formats


def record_from_json(obj: Mapping) -> Record:
    if "n_calls_received" in obj:
        return CalleeAck.from_json(obj)
    return CallerReport.from_json(obj)


def read_jsonl(path: str | Path) -> Iterator[Record]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield record_from_json(json.loads(line))
            except (ValueError, TypeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc


def write_jsonl(records: Iterable[Record], fh) -> int:
    n = 0
    for r in records:
        fh.write(json.dumps(r.to_json(), separators=(",", ":"), ensure_ascii=False))
        fh.write("\n")
        n += 1
    return n


def _fmt(x) -> str:
    return "" if x is None else repr(x)


def write_snapshot_csv(snapshot: AggregateSnapshot, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SNAPSHOT_HEADER)
        for (i, j, k) in sorted(snapshot, key=lambda key: tuple(map(str, key))):
            s = snapshot[(i, j, k)]
            w.writerow([i, j, k, *(_fmt(v) for v in s.as_tuple())])


def read_snapshot_csv(path: str | Path, id_type=int) -> AggregateSnapshot:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            vals = [None if row[h] == "" else float(row[h]) for h in SNAPSHOT_HEADER[3:]]
            key = (id_type(row["caller"]), id_type(row["callee"]), id_type(row["task"]))
            out[key] = SufficientStats(*vals)
    return out

