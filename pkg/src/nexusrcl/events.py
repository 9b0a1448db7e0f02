"""Event extraction: raw telemetry -> per-node event vectors.

Pipeline per window sequence:
  1. metric filtering (zero variance; mean variation above 2x the same-kind
     global average),
  2. seasonal-residual removal on the per-window aggregated series,
  3. signed n-sigma metric events,
  4. severity filtering + token masking of logs, TF-IDF + DBSCAN clustering,
     multi-hot log events per (entity, window),
  5. cluster pruning by temporal variance of firing frequency,
  6. service-to-host topology-change counts,
  7. fusion into fixed-order feature vectors: services get
     [metric events || log bits || topo change], hosts get metric events only.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .clustering import dbscan
from .core import (
    EntityId,
    EntityKind,
    LogRecord,
    MetricSeries,
    Severity,
    TelemetryBundle,
    TimeWindow,
)


class InsufficientDataError(ValueError):
    pass


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class ExtractionConfig:
    """Knobs for the event pipeline; defaults match the shipped configuration."""

    n_sigma: float = 3.0
    history_windows: int = 30
    log_eps: float = 0.3
    log_min_pts: int = 5
    cluster_var_floor: float = 0.01  # delta: clusters below this firing variance are dropped
    period_s: int = 3600

    def to_json(self) -> dict:
        return {
            "n_sigma": self.n_sigma,
            "history_windows": self.history_windows,
            "log_eps": self.log_eps,
            "log_min_pts": self.log_min_pts,
            "cluster_var_floor": self.cluster_var_floor,
            "period_s": self.period_s,
        }

    @staticmethod
    def from_json(obj: dict) -> "ExtractionConfig":
        return ExtractionConfig(**obj)


# ---------------------------------------------------------------------------
# metric filtering
# ---------------------------------------------------------------------------


def mean_variation(series: MetricSeries | Sequence[float], window: TimeWindow | None = None) -> float:
    """Average absolute step between consecutive samples.

    With values v_0..v_T this is sum(|v_i - v_{i-1}|) / (number of pairs).
    """
    if isinstance(series, MetricSeries):
        values = [v for t, v in series.samples if window is None or window.contains(t)]
    else:
        values = list(series)
    if len(values) < 2:
        raise InsufficientDataError("mean variation needs at least 2 samples")
    arr = np.asarray(values, dtype=float)
    return float(np.mean(np.abs(np.diff(arr))))


@dataclass
class MetricFilterReport:
    retained: list[MetricSeries]
    dropped_zero_variance: list[tuple[EntityId, str]]
    dropped_high_variation: list[tuple[EntityId, str]]
    retained_names: dict[EntityKind, tuple[str, ...]]

    def summary(self) -> dict:
        return {
            "retained": len(self.retained),
            "dropped_zero_variance": len(self.dropped_zero_variance),
            "dropped_high_variation": len(self.dropped_high_variation),
            "service_metrics": list(self.retained_names.get(EntityKind.SERVICE, ())),
            "host_metrics": list(self.retained_names.get(EntityKind.HOST, ())),
        }


def filter_metrics(all_series: Sequence[MetricSeries]) -> MetricFilterReport:
    """Drop flat and excessively jittery series, per entity kind.

    Zero-variance series go first; the 2x mean-variation cap is then applied
    against the average over the surviving series of the same kind.
    """
    if not all_series:
        raise InsufficientDataError("filter_metrics needs at least one series")
    retained: list[MetricSeries] = []
    flat: list[tuple[EntityId, str]] = []
    jittery: list[tuple[EntityId, str]] = []
    by_kind: dict[EntityKind, list[MetricSeries]] = {}
    for s in all_series:
        by_kind.setdefault(s.entity.kind, []).append(s)

    for kind, group in by_kind.items():
        survivors = []
        for s in group:
            values = np.asarray(s.values(), dtype=float)
            if len(values) < 2 or float(np.var(values)) < 1e-18:
                flat.append((s.entity, s.metric_name))
            else:
                survivors.append((s, mean_variation(values)))
        if not survivors:
            continue
        global_avg = float(np.mean([mv for _, mv in survivors]))
        for s, mv in survivors:
            if mv > 2.0 * global_avg:
                jittery.append((s.entity, s.metric_name))
            else:
                retained.append(s)

    names: dict[EntityKind, tuple[str, ...]] = {}
    for kind in (EntityKind.SERVICE, EntityKind.HOST):
        names[kind] = tuple(sorted({s.metric_name for s in retained if s.entity.kind is kind}))
    return MetricFilterReport(retained, flat, jittery, names)


# ---------------------------------------------------------------------------
# log filtering and masking
# ---------------------------------------------------------------------------

_MASK_PATTERNS: tuple[tuple[re.Pattern, str], ...] = (
    (
        re.compile(
            r"\b[0-9a-fA-F]{8}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{12}\b"
        ),
        "<UUID>",
    ),
    (re.compile(r"\b(?:\d{1,3}\.){3}\d{1,3}\b"), "<IP>"),
    (re.compile(r"\b(?:0[xX][0-9a-fA-F]+|(?=[0-9a-fA-F]*\d)[0-9a-fA-F]{8,})\b"), "<HEX>"),
    (re.compile(r"\b\d+\b"), "<NUM>"),
)


def mask_message(message: str) -> str:
    """Replace volatile tokens (uuids, ips, hex ids, numbers) with placeholders."""
    out = message
    for pattern, token in _MASK_PATTERNS:
        out = pattern.sub(token, out)
    return out


def filter_logs(logs: Iterable[LogRecord]) -> list[LogRecord]:
    """Keep WARNING/ERROR records only, with masked messages."""
    kept = []
    for rec in logs:
        if rec.severity is Severity.INFO:
            continue
        kept.append(LogRecord(rec.entity, rec.timestamp, rec.severity, mask_message(rec.message)))
    return kept


# ---------------------------------------------------------------------------
# metric events
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricEventSignal:
    entity: EntityId
    metric_name: str
    values: np.ndarray  # one signed value per window


def extract_metric_events(values: Sequence[float], history: int, n: float) -> np.ndarray:
    """Signed deviation events: value minus (trailing mean + n * trailing std).

    The trailing window holds up to `history` samples strictly before each
    point; with fewer than 2 samples of history the event value is 0.
    Magnitude and sign are preserved (no binarization).
    """
    arr = np.asarray(values, dtype=float)
    out = np.zeros(len(arr))
    for t in range(len(arr)):
        lo = max(0, t - history)
        hist = arr[lo:t]
        if len(hist) >= 2:
            out[t] = arr[t] - float(np.mean(hist)) - n * float(np.std(hist))
    return out


def aggregate_per_window(series_samples: Sequence[tuple[int, float]], windows: Sequence[TimeWindow]) -> np.ndarray:
    """Per-window mean of raw samples; empty windows carry the previous value."""
    values = np.zeros(len(windows))
    sums = np.zeros(len(windows))
    counts = np.zeros(len(windows))
    if windows:
        start0 = windows[0].start
        length = windows[0].length_s
        for ts, v in series_samples:
            idx = (ts - start0) // length
            if 0 <= idx < len(windows) and windows[int(idx)].contains(ts):
                sums[int(idx)] += v
                counts[int(idx)] += 1
    last = 0.0
    seen = False
    for i in range(len(windows)):
        if counts[i] > 0:
            last = sums[i] / counts[i]
            seen = True
        values[i] = last
    if seen and counts[0] == 0:
        # backfill leading empties with the first observed level
        first = next(i for i in range(len(windows)) if counts[i] > 0)
        values[:first] = values[first]
    return values


# ---------------------------------------------------------------------------
# seasonal residual
# ---------------------------------------------------------------------------


def seasonal_residual(values: Sequence[float], period: int) -> tuple[np.ndarray, bool]:
    """Subtract the periodic baseline (smoothed level + per-phase median season).

    Requires at least two full periods; otherwise the input passes through
    unchanged and the flag is False.
    """
    arr = np.asarray(values, dtype=float)
    if period < 2 or len(arr) < 2 * period:
        return arr.copy(), False
    if period % 2 == 0:
        kernel = np.ones(period + 1)
        kernel[0] = kernel[-1] = 0.5
        kernel /= period
    else:
        kernel = np.ones(period) / period
    core = np.convolve(arr, kernel, mode="valid")
    left = (len(kernel) - 1) // 2
    right = len(arr) - len(core) - left
    trend = np.concatenate([np.full(left, core[0]), core, np.full(right, core[-1])])
    detrended = arr - trend
    season = np.empty(period)
    for phase in range(period):
        season[phase] = np.median(detrended[phase::period])
    season -= season.mean()
    residual = detrended - np.tile(season, len(arr) // period + 1)[: len(arr)]
    return residual, True


def deseasonalize(series: MetricSeries, period_s: int) -> tuple[MetricSeries, bool]:
    """Seasonal removal on a raw series; the period is inferred from timestamps."""
    if len(series.samples) < 2:
        return series, False
    ts = np.asarray(series.timestamps())
    dt = float(np.median(np.diff(ts)))
    period = int(round(period_s / dt)) if dt > 0 else 0
    residual, applied = seasonal_residual(series.values(), period)
    if not applied:
        return series, False
    out = MetricSeries(
        series.entity,
        series.metric_name,
        tuple((int(t), float(v)) for t, v in zip(ts, residual)),
    )
    return out, True


# ---------------------------------------------------------------------------
# log clustering
# ---------------------------------------------------------------------------


class TfidfVectorizer:
    """Deterministic TF-IDF over whitespace tokens, L2-normalized rows."""

    def __init__(self, vocabulary: dict[str, int] | None = None, idf: np.ndarray | None = None):
        self.vocabulary = vocabulary or {}
        self.idf = idf if idf is not None else np.zeros(0)

    def fit(self, messages: Sequence[str]) -> "TfidfVectorizer":
        tokens = sorted({tok for msg in messages for tok in msg.split()})
        self.vocabulary = {tok: i for i, tok in enumerate(tokens)}
        df = np.zeros(len(tokens))
        for msg in messages:
            for tok in set(msg.split()):
                df[self.vocabulary[tok]] += 1
        n_docs = len(messages)
        self.idf = np.log((1.0 + n_docs) / (1.0 + df)) + 1.0
        return self

    def transform(self, messages: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(messages), len(self.vocabulary)))
        for i, msg in enumerate(messages):
            for tok in msg.split():
                j = self.vocabulary.get(tok)
                if j is not None:
                    out[i, j] += 1.0
        out *= self.idf[None, :]
        norms = np.linalg.norm(out, axis=1)
        nz = norms > 0
        out[nz] /= norms[nz, None]
        return out


@dataclass
class LogClusterModel:
    """Fitted log-event grouping: vectorizer state, centroids and assignments.

    Noise logs carry cluster id -1 and do not count toward K.
    """

    vectorizer: TfidfVectorizer
    centroids: np.ndarray  # K x vocab, unit rows
    eps: float
    min_pts: int
    assignments: dict[str, int] = field(default_factory=dict)  # masked message -> cluster

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def assign(self, message: str) -> int:
        masked = mask_message(message)
        if masked in self.assignments:
            return self.assignments[masked]
        if self.k == 0:
            return -1
        vec = self.vectorizer.transform([masked])[0]
        if not np.any(vec):
            return -1
        sims = self.centroids @ vec
        best = int(np.argmax(sims))
        if 1.0 - float(sims[best]) <= self.eps:
            return best
        return -1

    def to_json(self) -> dict:
        vocab_tokens = [None] * len(self.vectorizer.vocabulary)
        for tok, i in self.vectorizer.vocabulary.items():
            vocab_tokens[i] = tok
        return {
            "vocabulary": vocab_tokens,
            "idf": [float(v) for v in self.vectorizer.idf],
            "centroids": [[float(v) for v in row] for row in self.centroids],
            "eps": self.eps,
            "min_pts": self.min_pts,
            "assignments": dict(sorted(self.assignments.items())),
        }

    @staticmethod
    def from_json(obj: dict) -> "LogClusterModel":
        vocab = {tok: i for i, tok in enumerate(obj["vocabulary"])}
        vec = TfidfVectorizer(vocab, np.asarray(obj["idf"], dtype=float))
        centroids = np.asarray(obj["centroids"], dtype=float)
        if centroids.size == 0:
            centroids = np.zeros((0, len(vocab)))
        return LogClusterModel(
            vectorizer=vec,
            centroids=centroids,
            eps=float(obj["eps"]),
            min_pts=int(obj["min_pts"]),
            assignments={k: int(v) for k, v in obj["assignments"].items()},
        )


def fit_log_clusters(logs: Sequence[LogRecord], eps: float, min_pts: int) -> LogClusterModel:
    """Cluster masked messages with weighted-multiplicity DBSCAN.

    Duplicate messages collapse to one point whose weight is its count, which
    is equivalent to running DBSCAN on the full multiset.
    """
    messages = [mask_message(rec.message) for rec in logs]
    vectorizer = TfidfVectorizer().fit(messages)
    if not messages:
        return LogClusterModel(vectorizer, np.zeros((0, 0)), eps, min_pts)
    unique: list[str] = []
    counts: dict[str, int] = {}
    for msg in messages:
        if msg not in counts:
            unique.append(msg)
            counts[msg] = 0
        counts[msg] += 1
    x = vectorizer.transform(unique)
    weights = np.asarray([counts[m] for m in unique], dtype=float)
    labels = dbscan(x, eps=eps, min_pts=min_pts, metric="cosine", weights=weights)
    k = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0
    centroids = np.zeros((k, x.shape[1]))
    for c in range(k):
        member = labels == c
        centroid = np.average(x[member], axis=0, weights=weights[member])
        norm = np.linalg.norm(centroid)
        centroids[c] = centroid / norm if norm > 0 else centroid
    assignments = {msg: int(lab) for msg, lab in zip(unique, labels)}
    return LogClusterModel(vectorizer, centroids, eps, min_pts, assignments)


@dataclass(frozen=True)
class LogEventVector:
    entity: EntityId
    window: TimeWindow
    bits: np.ndarray  # {0,1}^K


def extract_log_events(model: LogClusterModel, logs: Iterable[LogRecord], window: TimeWindow) -> np.ndarray:
    """Multi-hot vector: bit k set iff some log in the window maps to cluster k."""
    bits = np.zeros(model.k)
    for rec in logs:
        if not window.contains(rec.timestamp):
            continue
        c = model.assign(rec.message)
        if c >= 0:
            bits[c] = 1.0
    return bits


def prune_log_clusters(
    model: LogClusterModel, frequencies: np.ndarray, delta: float
) -> tuple[LogClusterModel, list[int]]:
    """Drop clusters whose per-window firing frequency barely varies.

    `frequencies` is K x T (count of assigned logs per cluster per window).
    Returns the shrunk model and the list of retained old cluster ids.
    """
    if model.k == 0:
        return model, []
    if frequencies.shape[0] != model.k:
        raise DimensionError(f"frequencies rows {frequencies.shape[0]} != K {model.k}")
    variances = frequencies.var(axis=1)
    kept = [k for k in range(model.k) if variances[k] >= delta]
    remap = {old: new for new, old in enumerate(kept)}
    pruned = LogClusterModel(
        vectorizer=model.vectorizer,
        centroids=model.centroids[kept] if kept else np.zeros((0, model.centroids.shape[1])),
        eps=model.eps,
        min_pts=model.min_pts,
        assignments={m: remap.get(c, -1) for m, c in model.assignments.items()},
    )
    return pruned, kept


# ---------------------------------------------------------------------------
# topology change events
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TopoChangeSignal:
    entity: EntityId
    window: TimeWindow
    value: float


def extract_topology_change(
    services: Sequence[EntityId],
    hosts: Sequence[EntityId],
    e_sh_now: Iterable[tuple[EntityId, EntityId]],
    e_sh_prev: Iterable[tuple[EntityId, EntityId]] | None,
) -> dict[EntityId, float]:
    """Per-service count of service-to-host assignment flips since the prior window."""
    svc_idx = {s: i for i, s in enumerate(services)}
    host_idx = {h: j for j, h in enumerate(hosts)}

    def matrix(edges: Iterable[tuple[EntityId, EntityId]]) -> np.ndarray:
        m = np.zeros((len(services), len(hosts)))
        for s, h in edges:
            if s not in svc_idx or h not in host_idx:
                raise DimensionError(f"e_sh edge outside index sets: ({s}, {h})")
            m[svc_idx[s], host_idx[h]] = 1.0
        return m

    now = matrix(e_sh_now)
    if e_sh_prev is None:
        return {s: 0.0 for s in services}
    prev = matrix(e_sh_prev)
    delta = np.abs(now - prev).sum(axis=1)
    return {s: float(delta[i]) for s, i in svc_idx.items()}


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureSpace:
    """Fixed feature ordering shared by every window of a dataset."""

    service_metrics: tuple[str, ...]
    host_metrics: tuple[str, ...]
    n_log_clusters: int

    @property
    def service_dim(self) -> int:
        return len(self.service_metrics) + self.n_log_clusters + 1

    @property
    def host_dim(self) -> int:
        return len(self.host_metrics)

    def to_json(self) -> dict:
        return {
            "service_metrics": list(self.service_metrics),
            "host_metrics": list(self.host_metrics),
            "n_log_clusters": self.n_log_clusters,
        }

    @staticmethod
    def from_json(obj: dict) -> "FeatureSpace":
        return FeatureSpace(
            tuple(obj["service_metrics"]), tuple(obj["host_metrics"]), int(obj["n_log_clusters"])
        )


@dataclass
class NodeFeatureSet:
    """Per-window fused vectors: services A+K+1 wide, hosts B wide."""

    window: TimeWindow
    service_features: dict[EntityId, np.ndarray]
    host_features: dict[EntityId, np.ndarray]


def fuse(
    space: FeatureSpace,
    window: TimeWindow,
    metric_events: Mapping[EntityId, Mapping[str, float]],
    log_bits: Mapping[EntityId, np.ndarray],
    topo_change: Mapping[EntityId, float],
    services: Sequence[EntityId],
    hosts: Sequence[EntityId],
) -> NodeFeatureSet:
    """Concatenate channels in fixed order; every node must be covered."""
    svc_vecs: dict[EntityId, np.ndarray] = {}
    for s in services:
        em = metric_events.get(s, {})
        bits = log_bits.get(s)
        if bits is None:
            raise DimensionError(f"missing log channel for {s}")
        if len(bits) != space.n_log_clusters:
            raise DimensionError(
                f"log bits for {s} have length {len(bits)}, expected {space.n_log_clusters}"
            )
        if s not in topo_change:
            raise DimensionError(f"missing topology-change channel for {s}")
        vec = np.concatenate(
            [
                np.asarray([em.get(name, 0.0) for name in space.service_metrics]),
                np.asarray(bits, dtype=float),
                np.asarray([topo_change[s]]),
            ]
        )
        svc_vecs[s] = vec
    host_vecs: dict[EntityId, np.ndarray] = {}
    for h in hosts:
        em = metric_events.get(h, {})
        host_vecs[h] = np.asarray([em.get(name, 0.0) for name in space.host_metrics])
    return NodeFeatureSet(window, svc_vecs, host_vecs)


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------


@dataclass
class ExtractionResult:
    windows: list[TimeWindow]
    space: FeatureSpace
    features: list[NodeFeatureSet]
    log_model: LogClusterModel
    filter_report: MetricFilterReport
    seasonal_applied: int  # series count where the seasonal pass ran


def extract_features(bundles: Sequence[TelemetryBundle], config: ExtractionConfig) -> ExtractionResult:
    """Run the complete event pipeline over a chronological bundle sequence."""
    if not bundles:
        raise InsufficientDataError("no telemetry windows")
    windows = [b.window for b in bundles]
    for prev, cur in zip(windows, windows[1:]):
        if cur.start != prev.end or cur.length_s != prev.length_s:
            raise InsufficientDataError("windows must be contiguous and equal length")
    services = sorted({s for b in bundles for s in b.topology.services})
    hosts = sorted({h for b in bundles for h in b.topology.hosts})

    # 1. stitch full-history series and filter
    history: dict[tuple[EntityId, str], list[tuple[int, float]]] = {}
    for b in bundles:
        for s in b.metrics:
            history.setdefault((s.entity, s.metric_name), []).extend(s.samples)
    full_series = [
        MetricSeries(entity, name, tuple(sorted(samples)))
        for (entity, name), samples in sorted(history.items(), key=lambda kv: (kv[0][0], kv[0][1]))
    ]
    report = filter_metrics(full_series)

    # 2-3. per-window aggregation, seasonal residual, n-sigma events
    window_len = windows[0].length_s
    period = config.period_s // window_len if window_len > 0 else 0
    seasonal_count = 0
    event_values: dict[tuple[EntityId, str], np.ndarray] = {}
    for s in report.retained:
        agg = aggregate_per_window(s.samples, windows)
        residual, applied = seasonal_residual(agg, period)
        seasonal_count += int(applied)
        event_values[(s.entity, s.metric_name)] = extract_metric_events(
            residual, config.history_windows, config.n_sigma
        )

    # 4. logs: filter, mask, cluster
    masked_logs = filter_logs([rec for b in bundles for rec in b.logs])
    model = fit_log_clusters(masked_logs, config.log_eps, config.log_min_pts)

    # 5. prune clusters with flat firing frequency
    if model.k > 0:
        freqs = np.zeros((model.k, len(windows)))
        for rec in masked_logs:
            c = model.assign(rec.message)
            if c >= 0:
                idx = (rec.timestamp - windows[0].start) // window_len
                if 0 <= idx < len(windows):
                    freqs[c, int(idx)] += 1.0
        model, _ = prune_log_clusters(model, freqs, config.cluster_var_floor)

    space = FeatureSpace(
        service_metrics=report.retained_names[EntityKind.SERVICE],
        host_metrics=report.retained_names[EntityKind.HOST],
        n_log_clusters=model.k,
    )

    # 6-7. per-window channels and fusion
    logs_by_window: dict[int, dict[EntityId, list[LogRecord]]] = {}
    for rec in masked_logs:
        idx = (rec.timestamp - windows[0].start) // window_len
        if 0 <= idx < len(windows):
            logs_by_window.setdefault(int(idx), {}).setdefault(rec.entity, []).append(rec)

    features: list[NodeFeatureSet] = []
    prev_sh: frozenset | None = None
    for t, (window, bundle) in enumerate(zip(windows, bundles)):
        em: dict[EntityId, dict[str, float]] = {}
        for (entity, name), values in event_values.items():
            em.setdefault(entity, {})[name] = float(values[t])
        bits = {
            s: extract_log_events(model, logs_by_window.get(t, {}).get(s, []), window)
            for s in services
        }
        topo = extract_topology_change(services, hosts, bundle.topology.e_sh, prev_sh)
        prev_sh = bundle.topology.e_sh
        features.append(fuse(space, window, em, bits, topo, services, hosts))
    return ExtractionResult(windows, space, features, model, report, seasonal_count)
