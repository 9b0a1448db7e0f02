"""Shared domain types for the localization pipeline.

Everything here is an immutable value: entities, time windows, topology
snapshots, raw telemetry and labels.  All timestamps are integer epoch
seconds.  Serialization is canonical JSON (sorted keys, sorted lists) so
that identical inputs produce byte-identical artifacts.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence


class EntityKind(enum.Enum):
    SERVICE = "service"
    HOST = "host"


class Severity(enum.Enum):
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"


class Provenance(enum.Enum):
    HUMAN = "human"
    PSEUDO = "pseudo"
    ORACLE = "oracle"


class ValidationError(ValueError):
    """Raised when a value violates a structural invariant."""


@dataclass(frozen=True)
class EntityId:
    """A system entity, identified by (kind, name).

    Instance/pod identifiers are deliberately absent: the pipeline works at
    the service/host abstraction level.
    """

    kind: EntityKind
    name: str

    def __post_init__(self) -> None:
        if not self.name:
            raise ValidationError("entity name must be nonempty")

    def __lt__(self, other: "EntityId") -> bool:
        return (self.kind.value, self.name) < (other.kind.value, other.name)

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "name": self.name}

    @staticmethod
    def from_json(obj: dict) -> "EntityId":
        return EntityId(EntityKind(obj["kind"]), obj["name"])

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.name}"


def service(name: str) -> EntityId:
    return EntityId(EntityKind.SERVICE, name)


def host(name: str) -> EntityId:
    return EntityId(EntityKind.HOST, name)


@dataclass(frozen=True)
class TimeWindow:
    """Contiguous interval [start, end) in epoch seconds, with a sequence index."""

    start: int
    end: int
    index: int

    def __post_init__(self) -> None:
        if self.end <= self.start:
            raise ValidationError(f"window end must exceed start: [{self.start}, {self.end})")
        if self.index < 0:
            raise ValidationError("window index must be >= 0")

    @property
    def length_s(self) -> int:
        return self.end - self.start

    def contains(self, ts: int) -> bool:
        return self.start <= ts < self.end

    def to_json(self) -> dict:
        return {"start": self.start, "end": self.end, "index": self.index}

    @staticmethod
    def from_json(obj: dict) -> "TimeWindow":
        return TimeWindow(obj["start"], obj["end"], obj["index"])


def _entity_key(e: EntityId) -> tuple[str, str]:
    return (e.kind.value, e.name)


def _edge_key(edge: tuple[EntityId, EntityId]) -> tuple:
    return (_entity_key(edge[0]), _entity_key(edge[1]))


@dataclass(frozen=True)
class TopologySnapshot:
    """Entity sets plus the three typed edge sets.

    e_ss: directed service->service invocation edges.
    e_sh: directed service->host deployment edges.
    e_hh: undirected host pairs (connectivity / co-location), stored in
          canonical (name-sorted) order.
    """

    services: frozenset[EntityId]
    hosts: frozenset[EntityId]
    e_ss: frozenset[tuple[EntityId, EntityId]]
    e_sh: frozenset[tuple[EntityId, EntityId]]
    e_hh: frozenset[tuple[EntityId, EntityId]]

    @staticmethod
    def build(
        services: Iterable[EntityId],
        hosts: Iterable[EntityId],
        e_ss: Iterable[tuple[EntityId, EntityId]] = (),
        e_sh: Iterable[tuple[EntityId, EntityId]] = (),
        e_hh: Iterable[tuple[EntityId, EntityId]] = (),
    ) -> "TopologySnapshot":
        """Construct a snapshot, canonicalizing undirected host pairs."""
        hh = frozenset(tuple(sorted(p, key=_entity_key)) for p in e_hh)
        return TopologySnapshot(
            services=frozenset(services),
            hosts=frozenset(hosts),
            e_ss=frozenset(tuple(e) for e in e_ss),
            e_sh=frozenset(tuple(e) for e in e_sh),
            e_hh=hh,
        )

    def to_json(self) -> dict:
        return {
            "services": [e.to_json() for e in sorted(self.services)],
            "hosts": [e.to_json() for e in sorted(self.hosts)],
            "e_ss": [[a.to_json(), b.to_json()] for a, b in sorted(self.e_ss, key=_edge_key)],
            "e_sh": [[a.to_json(), b.to_json()] for a, b in sorted(self.e_sh, key=_edge_key)],
            "e_hh": [[a.to_json(), b.to_json()] for a, b in sorted(self.e_hh, key=_edge_key)],
        }

    @staticmethod
    def from_json(obj: dict) -> "TopologySnapshot":
        def pair(raw) -> tuple[EntityId, EntityId]:
            return (EntityId.from_json(raw[0]), EntityId.from_json(raw[1]))

        return TopologySnapshot.build(
            services=[EntityId.from_json(e) for e in obj["services"]],
            hosts=[EntityId.from_json(e) for e in obj["hosts"]],
            e_ss=[pair(e) for e in obj["e_ss"]],
            e_sh=[pair(e) for e in obj["e_sh"]],
            e_hh=[pair(e) for e in obj["e_hh"]],
        )


def validate_snapshot(snap: TopologySnapshot) -> list[str]:
    """Report every invariant violation in a snapshot; empty list means valid.

    Pure and idempotent: the same snapshot always yields the same report.
    """
    report: list[str] = []
    for a, b in sorted(snap.e_ss, key=_edge_key):
        if a.kind is not EntityKind.SERVICE or b.kind is not EntityKind.SERVICE:
            report.append(f"e_ss endpoints must both be services: ({a}, {b})")
        if a not in snap.services:
            report.append(f"e_ss unknown endpoint: {a}")
        if b not in snap.services:
            report.append(f"e_ss unknown endpoint: {b}")
        if a == b:
            report.append(f"e_ss self-loop: {a}")
    for a, b in sorted(snap.e_sh, key=_edge_key):
        if a.kind is not EntityKind.SERVICE or b.kind is not EntityKind.HOST:
            report.append(f"e_sh must be service->host: ({a}, {b})")
        else:
            if a not in snap.services:
                report.append(f"e_sh unknown endpoint: {a}")
            if b not in snap.hosts:
                report.append(f"e_sh unknown endpoint: {b}")
    for a, b in sorted(snap.e_hh, key=_edge_key):
        if a.kind is not EntityKind.HOST or b.kind is not EntityKind.HOST:
            report.append(f"e_hh endpoints must both be hosts: ({a}, {b})")
        if a.kind is EntityKind.HOST and a not in snap.hosts:
            report.append(f"e_hh unknown endpoint: {a}")
        if b.kind is EntityKind.HOST and b not in snap.hosts:
            report.append(f"e_hh unknown endpoint: {b}")
        if a == b:
            report.append(f"e_hh self-loop: {a}")
    return report


@dataclass(frozen=True)
class MetricSeries:
    """One metric of one entity: strictly increasing timestamps, finite values."""

    entity: EntityId
    metric_name: str
    samples: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        prev = None
        for ts, value in self.samples:
            if prev is not None and ts <= prev:
                raise ValidationError(
                    f"timestamps must be strictly increasing in {self.entity}/{self.metric_name}"
                )
            if value != value or value in (float("inf"), float("-inf")):
                raise ValidationError(f"non-finite value in {self.entity}/{self.metric_name}")
            prev = ts

    def values(self) -> list[float]:
        return [v for _, v in self.samples]

    def timestamps(self) -> list[int]:
        return [t for t, _ in self.samples]

    def clipped(self, window: TimeWindow) -> "MetricSeries":
        return MetricSeries(
            self.entity,
            self.metric_name,
            tuple((t, v) for t, v in self.samples if window.contains(t)),
        )

    def to_json(self) -> dict:
        return {
            "entity": self.entity.to_json(),
            "metric_name": self.metric_name,
            "samples": [[t, v] for t, v in self.samples],
        }

    @staticmethod
    def from_json(obj: dict) -> "MetricSeries":
        return MetricSeries(
            EntityId.from_json(obj["entity"]),
            obj["metric_name"],
            tuple((int(t), float(v)) for t, v in obj["samples"]),
        )


@dataclass(frozen=True)
class LogRecord:
    entity: EntityId
    timestamp: int
    severity: Severity
    message: str

    def __post_init__(self) -> None:
        if not self.message.strip():
            raise ValidationError("log message must be nonempty after trimming")

    def to_json(self) -> dict:
        return {
            "entity": self.entity.to_json(),
            "timestamp": self.timestamp,
            "severity": self.severity.value,
            "message": self.message,
        }

    @staticmethod
    def from_json(obj: dict) -> "LogRecord":
        return LogRecord(
            EntityId.from_json(obj["entity"]),
            int(obj["timestamp"]),
            Severity(obj["severity"]),
            obj["message"],
        )


@dataclass(frozen=True)
class TelemetryBundle:
    """All telemetry for one time window: topology, metrics and logs."""

    window: TimeWindow
    topology: TopologySnapshot
    metrics: tuple[MetricSeries, ...]
    logs: tuple[LogRecord, ...]

    def validate(self) -> list[str]:
        report = validate_snapshot(self.topology)
        known = self.topology.services | self.topology.hosts
        for series in self.metrics:
            if series.entity not in known:
                report.append(f"metric entity not in topology: {series.entity}")
            for ts, _ in series.samples:
                if not self.window.contains(ts):
                    report.append(
                        f"metric sample outside window: {series.entity}/{series.metric_name}@{ts}"
                    )
                    break
        for rec in self.logs:
            if rec.entity not in known:
                report.append(f"log entity not in topology: {rec.entity}")
            if not self.window.contains(rec.timestamp):
                report.append(f"log outside window: {rec.entity}@{rec.timestamp}")
        return report

    def to_json(self) -> dict:
        logs = sorted(self.logs, key=lambda r: (r.timestamp, _entity_key(r.entity), r.message))
        metrics = sorted(self.metrics, key=lambda s: (_entity_key(s.entity), s.metric_name))
        return {
            "window": self.window.to_json(),
            "topology": self.topology.to_json(),
            "metrics": [s.to_json() for s in metrics],
            "logs": [r.to_json() for r in logs],
        }

    @staticmethod
    def from_json(obj: dict) -> "TelemetryBundle":
        return TelemetryBundle(
            window=TimeWindow.from_json(obj["window"]),
            topology=TopologySnapshot.from_json(obj["topology"]),
            metrics=tuple(MetricSeries.from_json(s) for s in obj["metrics"]),
            logs=tuple(LogRecord.from_json(r) for r in obj["logs"]),
        )


NO_FAULT = "no-fault"


@dataclass(frozen=True)
class LabelRecord:
    """A root-cause annotation.

    root_cause is None for the reserved "no-fault" answer (a window the
    annotator judged fault-free).  Pseudo labels are always superseded by
    human/oracle ones, never the reverse.
    """

    case_id: str
    root_cause: EntityId | None
    provenance: Provenance
    created_at: int

    @property
    def is_trusted(self) -> bool:
        return self.provenance in (Provenance.HUMAN, Provenance.ORACLE)

    @property
    def is_no_fault(self) -> bool:
        return self.root_cause is None

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "root_cause": None if self.root_cause is None else self.root_cause.to_json(),
            "provenance": self.provenance.value,
            "created_at": self.created_at,
        }

    @staticmethod
    def from_json(obj: dict) -> "LabelRecord":
        rc = obj["root_cause"]
        return LabelRecord(
            obj["case_id"],
            None if rc is None else EntityId.from_json(rc),
            Provenance(obj["provenance"]),
            int(obj["created_at"]),
        )


def dumps_canonical(obj: dict) -> str:
    """Canonical JSON used for every persisted artifact."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_bundles_jsonl(path, bundles: Sequence[TelemetryBundle]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for bundle in bundles:
            fh.write(dumps_canonical(bundle.to_json()))
            fh.write("\n")


def read_bundles_jsonl(path) -> list[TelemetryBundle]:
    bundles = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                bundles.append(TelemetryBundle.from_json(json.loads(line)))
    return bundles
