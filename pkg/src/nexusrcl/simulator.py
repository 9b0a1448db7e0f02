"""Synthetic microservice systems with injectable faults and known root causes.

The generator produces an acyclic service call graph deployed over a
connected host pool, hourly-seasonal baseline metrics, and INFO-dominant
logs.  Faults add a level shift of `magnitude x baseline noise std` to the
fault-relevant metrics plus an error-log burst at the root cause; propagated
entities are perturbed one sample later, which keeps "the earliest perturbed
entity is the root cause" true by construction.

Propagation follows the observed taxonomy: service faults may spread to the
hosting machine (inter-layer) or to one upstream caller (intra-layer); host
faults never propagate.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    EntityId,
    EntityKind,
    LogRecord,
    MetricSeries,
    Severity,
    TelemetryBundle,
    TimeWindow,
    TopologySnapshot,
    ValidationError,
    host,
    service,
)

SAMPLE_DT_S = 30
BASE_EPOCH = 1_700_000_000

SERVICE_METRICS = ("cpu_pct", "latency_ms", "mem_pct", "request_rate")
HOST_METRICS = ("cpu_pct", "disk_io", "load_avg", "mem_pct", "net_io", "swap_io")

SERVICE_FAULT_TYPES = ("cpu_load", "mem_load", "io_stall", "net_latency")
HOST_FAULT_TYPES = ("cpu_load", "mem_load", "io_stall", "net_latency")

# metric ranges: (level lo, level hi, noise lo, noise hi)
_METRIC_RANGES = {
    "cpu_pct": (20.0, 60.0, 1.0, 3.0),
    "latency_ms": (50.0, 200.0, 2.0, 6.0),
    "mem_pct": (30.0, 70.0, 1.0, 3.0),
    "request_rate": (50.0, 150.0, 2.0, 5.0),
    "disk_io": (10.0, 80.0, 1.0, 4.0),
    "load_avg": (1.0, 8.0, 0.2, 0.6),
    "net_io": (20.0, 100.0, 2.0, 5.0),
    "swap_io": (1.0, 10.0, 0.3, 1.0),
}

_SERVICE_FAULT_METRICS = {
    "cpu_load": (("cpu_pct", 1.0),),
    "mem_load": (("mem_pct", 1.0),),
    "io_stall": (("latency_ms", 1.0), ("request_rate", -0.6)),
    "net_latency": (("latency_ms", 1.0), ("request_rate", -1.0)),
}
# node-level faults hit several resource metrics at once: memory pressure
# drives swapping, io stalls show up as load/iowait, saturated nics burn cpu
_HOST_FAULT_METRICS = {
    "cpu_load": (("cpu_pct", 1.0), ("load_avg", 0.8)),
    "mem_load": (("mem_pct", 1.0), ("swap_io", 0.8), ("disk_io", 0.5)),
    "io_stall": (("disk_io", 1.0), ("load_avg", 0.7), ("cpu_pct", 0.4)),
    "net_latency": (("net_io", 1.0), ("cpu_pct", 0.4)),
}

_FAULT_ERROR_MESSAGES = {
    "cpu_load": "cpu saturation detected worker pool exhausted",
    "mem_load": "memory allocation failure heap limit reached",
    "io_stall": "filesystem io stall detected on volume 3",
    "net_latency": "connection timeout to 10.0.1.9 after 3000 ms",
}
_UPSTREAM_WARNING = "upstream timeout waiting for response from {callee}"

_INFO_TEMPLATES = (
    "request {a} completed in {b} ms",
    "scheduled job {a} finished",
    "cache refresh {a} ok",
)
_BASE_WARNING = "transient retry to backend 10.0.0.{a}"
_BASE_ERROR = "request {a} failed with code 500"


class Propagation(enum.Enum):
    NO_PROP = "no_prop"
    INTRA_LAYER = "intra_layer"
    INTER_LAYER = "inter_layer"


class ConfigurationError(ValueError):
    pass


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class FaultSpec:
    layer: EntityKind
    fault_type: str
    propagation: Propagation
    target: EntityId | str  # concrete entity or "random"
    window_index: int
    magnitude: float

    def __post_init__(self) -> None:
        if self.magnitude <= 0:
            raise ConfigurationError("fault magnitude must be > 0")
        if self.layer is EntityKind.HOST and self.propagation is not Propagation.NO_PROP:
            raise ConfigurationError("host-layer faults do not propagate")

    def to_json(self) -> dict:
        return {
            "layer": self.layer.value,
            "fault_type": self.fault_type,
            "propagation": self.propagation.value,
            "target": self.target if isinstance(self.target, str) else self.target.to_json(),
            "window_index": self.window_index,
            "magnitude": self.magnitude,
        }

    @staticmethod
    def from_json(obj: dict) -> "FaultSpec":
        target = obj["target"]
        return FaultSpec(
            layer=EntityKind(obj["layer"]),
            fault_type=obj["fault_type"],
            propagation=Propagation(obj["propagation"]),
            target=target if isinstance(target, str) else EntityId.from_json(target),
            window_index=int(obj["window_index"]),
            magnitude=float(obj["magnitude"]),
        )


@dataclass(frozen=True)
class SimConfig:
    n_services: int
    n_hosts: int
    n_windows: int
    window_len_s: int
    faults: tuple[FaultSpec, ...] = ()
    seed: int = 0
    call_graph_density: float = 0.3
    migration_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.n_services < 1 or self.n_hosts < 1:
            raise ConfigurationError("need at least one service and one host")
        if self.n_windows < len(self.faults):
            raise ConfigurationError("more faults than windows")
        if not (0.0 < self.call_graph_density <= 1.0):
            raise ConfigurationError("call_graph_density must be in (0, 1]")
        if not (0.0 <= self.migration_rate < 1.0):
            raise ConfigurationError("migration_rate must be in [0, 1)")
        if self.window_len_s < 3 * SAMPLE_DT_S:
            raise ConfigurationError(f"window_len_s must be >= {3 * SAMPLE_DT_S}")

    def to_json(self) -> dict:
        return {
            "n_services": self.n_services,
            "n_hosts": self.n_hosts,
            "n_windows": self.n_windows,
            "window_len_s": self.window_len_s,
            "faults": [f.to_json() for f in self.faults],
            "seed": self.seed,
            "call_graph_density": self.call_graph_density,
            "migration_rate": self.migration_rate,
        }

    @staticmethod
    def from_json(obj: dict) -> "SimConfig":
        return SimConfig(
            n_services=int(obj["n_services"]),
            n_hosts=int(obj["n_hosts"]),
            n_windows=int(obj["n_windows"]),
            window_len_s=int(obj["window_len_s"]),
            faults=tuple(FaultSpec.from_json(f) for f in obj.get("faults", [])),
            seed=int(obj.get("seed", 0)),
            call_graph_density=float(obj.get("call_graph_density", 0.3)),
            migration_rate=float(obj.get("migration_rate", 0.0)),
        )


@dataclass(frozen=True)
class GroundTruth:
    case_id: str
    window: TimeWindow
    root_cause: EntityId
    affected: frozenset[EntityId]

    def __post_init__(self) -> None:
        if self.root_cause not in self.affected:
            raise ValidationError("root cause must be among affected entities")

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "window": self.window.to_json(),
            "root_cause": self.root_cause.to_json(),
            "affected": [e.to_json() for e in sorted(self.affected)],
        }

    @staticmethod
    def from_json(obj: dict) -> "GroundTruth":
        return GroundTruth(
            case_id=obj["case_id"],
            window=TimeWindow.from_json(obj["window"]),
            root_cause=EntityId.from_json(obj["root_cause"]),
            affected=frozenset(EntityId.from_json(e) for e in obj["affected"]),
        )


@dataclass(frozen=True)
class MetricProfile:
    level: float
    noise_std: float
    season_amp: float
    phase: float

    @property
    def baseline_std(self) -> float:
        """Std of the fault-free signal: white noise plus the seasonal swing."""
        return float(np.sqrt(self.noise_std**2 + self.season_amp**2 / 2.0))


@dataclass
class SimulatedSystem:
    services: list[EntityId]
    hosts: list[EntityId]
    e_ss: list[tuple[EntityId, EntityId]]
    e_hh: list[tuple[EntityId, EntityId]]
    initial_assignment: dict[EntityId, EntityId]  # service -> host
    profiles: dict[tuple[EntityId, str], MetricProfile] = field(default_factory=dict)

    def base_topology(self) -> TopologySnapshot:
        return TopologySnapshot.build(
            self.services,
            self.hosts,
            e_ss=self.e_ss,
            e_sh=[(s, h) for s, h in self.initial_assignment.items()],
            e_hh=self.e_hh,
        )


def case_id_for_window(index: int) -> str:
    return f"case-{index:04d}"


def generate_system(cfg: SimConfig) -> SimulatedSystem:
    """Build the static system: call DAG, host pool, deployment, profiles."""
    rng = np.random.default_rng(cfg.seed)
    pad = max(2, len(str(cfg.n_services - 1)))
    services = [service(f"svc-{i:0{pad}d}") for i in range(cfg.n_services)]
    pad_h = max(2, len(str(cfg.n_hosts - 1)))
    hosts = [host(f"host-{j:0{pad_h}d}") for j in range(cfg.n_hosts)]

    # caller index < callee index keeps invocations acyclic
    e_ss = []
    for i in range(cfg.n_services):
        for j in range(i + 1, cfg.n_services):
            if rng.random() < cfg.call_graph_density:
                e_ss.append((services[i], services[j]))

    assignment = {s: hosts[int(rng.integers(0, cfg.n_hosts))] for s in services}

    e_hh: list[tuple[EntityId, EntityId]] = []
    if cfg.n_hosts == 2:
        e_hh.append((hosts[0], hosts[1]))
    elif cfg.n_hosts > 2:
        for j in range(cfg.n_hosts):
            e_hh.append((hosts[j], hosts[(j + 1) % cfg.n_hosts]))
        for j in range(cfg.n_hosts):
            for k in range(j + 2, cfg.n_hosts):
                if (j, k) == (0, cfg.n_hosts - 1):
                    continue  # already a ring edge
                if rng.random() < cfg.call_graph_density / 2.0:
                    e_hh.append((hosts[j], hosts[k]))

    profiles: dict[tuple[EntityId, str], MetricProfile] = {}
    for entity, metric_names in [(s, SERVICE_METRICS) for s in services] + [
        (h, HOST_METRICS) for h in hosts
    ]:
        for name in metric_names:
            lo, hi, nlo, nhi = _METRIC_RANGES[name]
            noise = float(rng.uniform(nlo, nhi))
            profiles[(entity, name)] = MetricProfile(
                level=float(rng.uniform(lo, hi)),
                noise_std=noise,
                season_amp=float(rng.uniform(2.0, 4.0)) * noise,
                phase=float(rng.uniform(0.0, 2.0 * np.pi)),
            )
    return SimulatedSystem(services, hosts, e_ss, e_hh, assignment, profiles)


def emit_telemetry(system: SimulatedSystem, cfg: SimConfig, rng: np.random.Generator) -> list[TelemetryBundle]:
    """Fault-free telemetry for every window, with service->host churn applied."""
    bundles: list[TelemetryBundle] = []
    assignment = dict(system.initial_assignment)
    for w in range(cfg.n_windows):
        start = BASE_EPOCH + w * cfg.window_len_s
        window = TimeWindow(start, start + cfg.window_len_s, w)
        if w > 0 and cfg.migration_rate > 0 and len(system.hosts) > 1:
            for s in system.services:
                if rng.random() < cfg.migration_rate:
                    others = [h for h in system.hosts if h != assignment[s]]
                    assignment[s] = others[int(rng.integers(0, len(others)))]
        snapshot = TopologySnapshot.build(
            system.services,
            system.hosts,
            e_ss=system.e_ss,
            e_sh=[(s, h) for s, h in assignment.items()],
            e_hh=system.e_hh,
        )
        ts_grid = list(range(start, start + cfg.window_len_s, SAMPLE_DT_S))
        metrics = []
        for entity in system.services + system.hosts:
            names = SERVICE_METRICS if entity.kind is EntityKind.SERVICE else HOST_METRICS
            for name in names:
                p = system.profiles[(entity, name)]
                values = (
                    p.level
                    + p.season_amp * np.sin(2.0 * np.pi * (np.asarray(ts_grid) - BASE_EPOCH) / 3600.0 + p.phase)
                    + p.noise_std * rng.standard_normal(len(ts_grid))
                )
                metrics.append(
                    MetricSeries(entity, name, tuple((t, float(v)) for t, v in zip(ts_grid, values)))
                )
        logs: list[LogRecord] = []
        for s in system.services:
            for template, lam, severity in (
                (None, 4.0, Severity.INFO),
                (_BASE_WARNING, 0.08, Severity.WARNING),
                (_BASE_ERROR, 0.04, Severity.ERROR),
            ):
                count = int(rng.poisson(lam))
                for _ in range(count):
                    ts = int(rng.integers(start, start + cfg.window_len_s))
                    if severity is Severity.INFO:
                        tmpl = _INFO_TEMPLATES[int(rng.integers(0, len(_INFO_TEMPLATES)))]
                    else:
                        tmpl = template
                    msg = tmpl.format(a=int(rng.integers(1, 10000)), b=int(rng.integers(1, 500)))
                    logs.append(LogRecord(s, ts, severity, msg))
        logs.sort(key=lambda r: (r.timestamp, r.entity.name, r.message))
        bundles.append(TelemetryBundle(window, snapshot, tuple(metrics), tuple(logs)))
    return bundles


def _perturb_series(
    bundle: TelemetryBundle,
    entity: EntityId,
    metric_shifts: tuple[tuple[str, float], ...],
    shift_scale: float,
    start_sample: int,
    profiles: dict[tuple[EntityId, str], MetricProfile],
) -> TelemetryBundle:
    new_metrics = []
    for series in bundle.metrics:
        if series.entity == entity and any(series.metric_name == m for m, _ in metric_shifts):
            sign = dict(metric_shifts)[series.metric_name]
            std = profiles[(entity, series.metric_name)].baseline_std
            samples = list(series.samples)
            for i in range(start_sample, len(samples)):
                t, v = samples[i]
                samples[i] = (t, v + sign * shift_scale * std)
            new_metrics.append(MetricSeries(series.entity, series.metric_name, tuple(samples)))
        else:
            new_metrics.append(series)
    return replace(bundle, metrics=tuple(new_metrics))


def _append_logs(bundle: TelemetryBundle, records: list[LogRecord]) -> TelemetryBundle:
    logs = sorted(
        list(bundle.logs) + records, key=lambda r: (r.timestamp, r.entity.name, r.message)
    )
    return replace(bundle, logs=tuple(logs))


def inject_fault(
    bundles: list[TelemetryBundle],
    spec: FaultSpec,
    system: SimulatedSystem,
    rng: np.random.Generator,
) -> tuple[list[TelemetryBundle], GroundTruth]:
    """Perturb one window in place of the fault spec; returns the ground truth.

    The root cause is perturbed from sample 1 of the window, propagation
    targets from sample 2.
    """
    if not (0 <= spec.window_index < len(bundles)):
        raise ConfigurationError(f"fault window {spec.window_index} out of range")
    bundle = bundles[spec.window_index]
    pool = system.services if spec.layer is EntityKind.SERVICE else system.hosts
    if isinstance(spec.target, str):
        if spec.target != "random":
            raise ConfigurationError(f"unresolvable target {spec.target!r}")
        target = pool[int(rng.integers(0, len(pool)))]
    else:
        target = spec.target
        if target not in pool:
            raise ConfigurationError(f"target {target} is not a {spec.layer.value}")

    fault_metrics = (
        _SERVICE_FAULT_METRICS if spec.layer is EntityKind.SERVICE else _HOST_FAULT_METRICS
    ).get(spec.fault_type)
    if fault_metrics is None:
        raise ConfigurationError(f"unknown fault type {spec.fault_type!r}")

    affected = {target}
    bundle = _perturb_series(bundle, target, fault_metrics, spec.magnitude, 1, system.profiles)
    if spec.layer is EntityKind.SERVICE:
        burst = max(2, int(rng.poisson(3.0 + spec.magnitude)))
        msg = _FAULT_ERROR_MESSAGES[spec.fault_type]
        records = [
            LogRecord(target, int(rng.integers(bundle.window.start + SAMPLE_DT_S, bundle.window.end)), Severity.ERROR, msg)
            for _ in range(burst)
        ]
        bundle = _append_logs(bundle, records)

    if spec.propagation is Propagation.INTER_LAYER:
        hosting = sorted(h for s, h in bundle.topology.e_sh if s == target)
        if not hosting:
            raise ConfigurationError(f"{target} has no hosting machine")
        hst = hosting[0]
        host_metrics = _HOST_FAULT_METRICS.get(spec.fault_type, (("cpu_pct", 1.0),))
        bundle = _perturb_series(bundle, hst, host_metrics, 0.8 * spec.magnitude, 2, system.profiles)
        affected.add(hst)
    elif spec.propagation is Propagation.INTRA_LAYER:
        callers = sorted(a for a, b in system.e_ss if b == target)
        if callers:
            caller = callers[int(rng.integers(0, len(callers)))]
            bundle = _perturb_series(
                bundle, caller, (("latency_ms", 1.0),), 0.8 * spec.magnitude, 2, system.profiles
            )
            warn = _UPSTREAM_WARNING.format(callee=target.name)
            burst = max(2, int(rng.poisson(2.0 + spec.magnitude / 2.0)))
            records = [
                LogRecord(caller, int(rng.integers(bundle.window.start + 2 * SAMPLE_DT_S, bundle.window.end)), Severity.WARNING, warn)
                for _ in range(burst)
            ]
            bundle = _append_logs(bundle, records)
            affected.add(caller)

    out = list(bundles)
    out[spec.window_index] = bundle
    truth = GroundTruth(
        case_id=case_id_for_window(spec.window_index),
        window=bundle.window,
        root_cause=target,
        affected=frozenset(affected),
    )
    return out, truth


def sample_scenario_mix(
    counts: tuple[int, int, int],
    n_windows: int,
    rng: np.random.Generator,
    min_window: int = 2,
) -> list[FaultSpec]:
    """Fault specs with the requested (no-prop, intra, inter) histogram.

    Windows are sampled without collision from [min_window, n_windows); the
    first two windows are reserved so every fault has event history.
    """
    no_prop, intra, inter = counts
    if min(counts) < 0:
        raise ConfigurationError("counts must be >= 0")
    total = no_prop + intra + inter
    capacity = max(0, n_windows - min_window)
    if total > capacity:
        raise CapacityError(f"{total} faults exceed {capacity} available windows")
    if total == 0:
        return []
    chosen = rng.choice(np.arange(min_window, n_windows), size=total, replace=False)
    specs: list[FaultSpec] = []
    service_types = ("cpu_load", "mem_load", "net_latency")
    # fault types rotate within each layer so occurrences stay balanced
    host_cursor = 0
    for i in range(no_prop):
        # non-propagating faults are dominated by host-level ones; the rare
        # service-level faults that stay local are io-bound in practice
        if i % 8 == 7:
            layer, ftype = EntityKind.SERVICE, "io_stall"
            magnitude = float(rng.uniform(3.0, 6.0))
        else:
            layer, ftype = EntityKind.HOST, HOST_FAULT_TYPES[host_cursor % len(HOST_FAULT_TYPES)]
            host_cursor += 1
            # node-level resource faults saturate the whole machine
            magnitude = float(rng.uniform(5.0, 9.0))
        specs.append(
            FaultSpec(layer, ftype, Propagation.NO_PROP, "random", int(chosen[i]), magnitude)
        )
    for i in range(intra):
        specs.append(
            FaultSpec(
                EntityKind.SERVICE,
                service_types[i % len(service_types)],
                Propagation.INTRA_LAYER,
                "random",
                int(chosen[no_prop + i]),
                float(rng.uniform(3.0, 6.0)),
            )
        )
    for i in range(inter):
        specs.append(
            FaultSpec(
                EntityKind.SERVICE,
                service_types[i % len(service_types)],
                Propagation.INTER_LAYER,
                "random",
                int(chosen[no_prop + intra + i]),
                float(rng.uniform(3.0, 6.0)),
            )
        )
    specs.sort(key=lambda f: f.window_index)
    return specs


@dataclass
class SimulationOutput:
    bundles: list[TelemetryBundle]
    truths: list[GroundTruth]
    system: SimulatedSystem


def simulate(cfg: SimConfig) -> SimulationOutput:
    """Full deterministic run: system, telemetry, every configured fault."""
    system = generate_system(cfg)
    rng = np.random.default_rng((cfg.seed, 1))
    bundles = emit_telemetry(system, cfg, rng)
    truths = []
    for spec in cfg.faults:
        bundles, truth = inject_fault(bundles, spec, system, rng)
        truths.append(truth)
    truths.sort(key=lambda t: t.window.index)
    return SimulationOutput(bundles, truths, system)
