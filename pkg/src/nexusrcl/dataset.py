"""Loader for externally collected telemetry (CSV or JSONL) into window bundles.

The mapping config names the files and their column-to-field mapping:

{
  "window_len_s": 300,
  "metrics": {
    "path": "metrics.csv", "format": "csv",
    "columns": {"timestamp": "ts", "kind": "layer", "entity": "name",
                 "metric": "metric", "value": "value"},
    "kind_values": {"service": "svc", "host": "node"}
  },
  "logs": {
    "path": "logs.csv", "format": "csv",
    "columns": {"timestamp": "ts", "kind": "layer", "entity": "name",
                 "severity": "severity", "message": "message"}
  },
  "topology": {"path": "topology.json"}
}

topology.json holds names plus raw observations:
{"services": [...], "hosts": [...], "calls": [[a, b], ...],
 "deployments": [[svc, host], ...], "host_links": [[h1, h2], ...],
 "windows": [{"index": 3, "deployments": [...]}, ...]}   # optional overrides

Rows that fail to parse are collected into an error report; more than 10%
failures aborts the load.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from .core import (
    EntityId,
    EntityKind,
    LogRecord,
    MetricSeries,
    Severity,
    TelemetryBundle,
    TimeWindow,
    TopologySnapshot,
)
from .graphs import topology_from_observations


class DatasetError(ValueError):
    pass


@dataclass
class LoadReport:
    rows: int = 0
    failed: list[str] = field(default_factory=list)
    unmapped_columns: list[str] = field(default_factory=list)

    def failure_rate(self) -> float:
        return len(self.failed) / self.rows if self.rows else 0.0


def _iter_rows(path: Path, fmt: str) -> Iterator[dict]:
    if fmt == "csv":
        with open(path, newline="", encoding="utf-8") as fh:
            yield from csv.DictReader(fh)
    elif fmt == "jsonl":
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield json.loads(line)
    else:
        raise DatasetError(f"unknown format {fmt!r}")


def _entity(row: dict, columns: dict, kind_values: dict) -> EntityId:
    raw_kind = str(row[columns["kind"]])
    for kind_name, value in kind_values.items():
        if raw_kind == value:
            return EntityId(EntityKind(kind_name), str(row[columns["entity"]]))
    raise ValueError(f"unknown entity kind {raw_kind!r}")


def load_external_dataset(root: Path, mapping: dict) -> tuple[list[TelemetryBundle], LoadReport]:
    """Normalize mapped files into one TelemetryBundle per time window."""
    root = Path(root)
    report = LoadReport()
    window_len = int(mapping["window_len_s"])
    if window_len <= 0:
        raise DatasetError("window_len_s must be positive")

    topo_cfg = mapping.get("topology")
    if topo_cfg is None:
        raise DatasetError("mapping must name a topology file")
    topo = json.loads((root / topo_cfg["path"]).read_text())
    services = [EntityId(EntityKind.SERVICE, n) for n in topo.get("services", [])]
    hosts = [EntityId(EntityKind.HOST, n) for n in topo.get("hosts", [])]
    svc_by_name = {e.name: e for e in services}
    host_by_name = {e.name: e for e in hosts}

    def pair_list(key, left, right):
        out = []
        for a, b in topo.get(key, []):
            if a not in left or b not in right:
                raise DatasetError(f"{key} references unknown entity: {a!r}/{b!r}")
            out.append((left[a], right[b]))
        return out

    calls = pair_list("calls", svc_by_name, svc_by_name)
    deployments = pair_list("deployments", svc_by_name, host_by_name)
    host_links = pair_list("host_links", host_by_name, host_by_name)

    # metric rows
    metrics_cfg = mapping.get("metrics")
    samples: dict[tuple[EntityId, str], list[tuple[int, float]]] = {}
    timestamps: list[int] = []
    if metrics_cfg:
        columns = metrics_cfg["columns"]
        kind_values = metrics_cfg.get("kind_values", {"service": "service", "host": "host"})
        known = set(columns.values())
        for row in _iter_rows(root / metrics_cfg["path"], metrics_cfg.get("format", "csv")):
            report.rows += 1
            if report.rows == 1:
                report.unmapped_columns += sorted(set(row) - known)
            try:
                entity = _entity(row, columns, kind_values)
                ts = int(float(row[columns["timestamp"]]))
                value = float(row[columns["value"]])
                name = str(row[columns["metric"]])
                samples.setdefault((entity, name), []).append((ts, value))
                timestamps.append(ts)
            except Exception as exc:
                report.failed.append(f"metrics row {report.rows}: {exc}")

    logs_cfg = mapping.get("logs")
    log_rows: list[LogRecord] = []
    if logs_cfg:
        columns = logs_cfg["columns"]
        kind_values = logs_cfg.get("kind_values", {"service": "service", "host": "host"})
        for row in _iter_rows(root / logs_cfg["path"], logs_cfg.get("format", "csv")):
            report.rows += 1
            try:
                entity = _entity(row, columns, kind_values)
                ts = int(float(row[columns["timestamp"]]))
                severity = Severity(str(row[columns["severity"]]).upper())
                log_rows.append(LogRecord(entity, ts, severity, str(row[columns["message"]])))
                timestamps.append(ts)
            except Exception as exc:
                report.failed.append(f"logs row {report.rows}: {exc}")

    if report.rows and report.failure_rate() > 0.10:
        raise DatasetError(
            f"{len(report.failed)}/{report.rows} rows failed to parse (> 10%); aborting"
        )
    if not timestamps:
        raise DatasetError("no parsable telemetry rows")

    start0 = (min(timestamps) // window_len) * window_len
    n_windows = (max(timestamps) - start0) // window_len + 1
    overrides = {int(w["index"]): w for w in topo.get("windows", [])}

    bundles: list[TelemetryBundle] = []
    for w in range(int(n_windows)):
        window = TimeWindow(start0 + w * window_len, start0 + (w + 1) * window_len, w)
        depl = deployments
        if w in overrides and "deployments" in overrides[w]:
            depl = [
                (svc_by_name[a], host_by_name[b]) for a, b in overrides[w]["deployments"]
            ]
        snapshot = topology_from_observations(services, hosts, calls, depl, host_links)
        window_metrics = []
        for (entity, name), pts in sorted(samples.items(), key=lambda kv: (kv[0][0], kv[0][1])):
            inside = sorted((t, v) for t, v in pts if window.contains(t))
            if inside:
                window_metrics.append(MetricSeries(entity, name, tuple(inside)))
        window_logs = tuple(
            sorted(
                (r for r in log_rows if window.contains(r.timestamp)),
                key=lambda r: (r.timestamp, r.entity.name, r.message),
            )
        )
        bundles.append(TelemetryBundle(window, snapshot, tuple(window_metrics), window_logs))
    return bundles, report
