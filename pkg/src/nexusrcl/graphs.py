"""Per-window heterogeneous graph assembly and correlation-based refinement.

Node indices are dense per type (services then hosts, each sorted by name)
and stable across every window of a dataset.  Service->host edges are always
oriented service to host; undirected host pairs are expanded to directed
edges, keeping only the direction aligned with a service invocation when one
connects services on the two hosts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    EntityId,
    LabelRecord,
    TelemetryBundle,
    TimeWindow,
    TopologySnapshot,
    dumps_canonical,
    validate_snapshot,
)
from .events import NodeFeatureSet


class IngestionError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass
class HetGraphCase:
    """One failure-window graph: typed nodes, typed directed edges, features.

    Edges are stored as index pairs: e_ss over service indices, e_sh as
    (service index, host index), e_hh over host indices.  No edge list can
    represent a host->service arrow.
    """

    case_id: str
    window: TimeWindow
    services: tuple[EntityId, ...]
    hosts: tuple[EntityId, ...]
    e_ss: tuple[tuple[int, int], ...]
    e_sh: tuple[tuple[int, int], ...]
    e_hh: tuple[tuple[int, int], ...]
    service_features: np.ndarray  # S x service_dim
    host_features: np.ndarray  # H x host_dim
    human_label: LabelRecord | None = None
    pseudo_label: LabelRecord | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.services) + len(self.hosts)

    def node_ids(self) -> list[EntityId]:
        return list(self.services) + list(self.hosts)

    def global_index(self, entity: EntityId) -> int:
        ids = self.node_ids()
        try:
            return ids.index(entity)
        except ValueError:
            raise AlignmentError(f"{entity} is not a node of case {self.case_id}") from None

    def effective_label(self) -> LabelRecord | None:
        """Trusted label when present, otherwise the pseudo one."""
        return self.human_label if self.human_label is not None else self.pseudo_label

    def graph_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "window": self.window.to_json(),
            "services": [e.to_json() for e in self.services],
            "hosts": [e.to_json() for e in self.hosts],
            "e_ss": [list(e) for e in self.e_ss],
            "e_sh": [list(e) for e in self.e_sh],
            "e_hh": [list(e) for e in self.e_hh],
        }

    def features_json(self) -> dict:
        return {
            "services": [[float(v) for v in row] for row in self.service_features],
            "hosts": [[float(v) for v in row] for row in self.host_features],
        }

    @staticmethod
    def from_json(graph: dict, features: dict) -> "HetGraphCase":
        svc_rows = np.asarray(features["services"], dtype=float)
        host_rows = np.asarray(features["hosts"], dtype=float)
        services = tuple(EntityId.from_json(e) for e in graph["services"])
        hosts = tuple(EntityId.from_json(e) for e in graph["hosts"])
        if svc_rows.size == 0:
            svc_rows = np.zeros((len(services), 0))
        if host_rows.size == 0:
            host_rows = np.zeros((len(hosts), 0))
        return HetGraphCase(
            case_id=graph["case_id"],
            window=TimeWindow.from_json(graph["window"]),
            services=services,
            hosts=hosts,
            e_ss=tuple((int(a), int(b)) for a, b in graph["e_ss"]),
            e_sh=tuple((int(a), int(b)) for a, b in graph["e_sh"]),
            e_hh=tuple((int(a), int(b)) for a, b in graph["e_hh"]),
            service_features=svc_rows,
            host_features=host_rows,
        )


def topology_from_observations(
    services: Iterable[EntityId],
    hosts: Iterable[EntityId],
    call_pairs: Iterable[tuple[EntityId, EntityId]] = (),
    deployments: Iterable[tuple[EntityId, EntityId]] = (),
    host_links: Iterable[tuple[EntityId, EntityId]] = (),
) -> TopologySnapshot:
    """Snapshot from raw trace call pairs and deployment metadata.

    Repeated observations dedupe to one edge; self-pairs (two services on the
    same machine) are dropped; unknown endpoints are an ingestion error.
    """
    svc = frozenset(services)
    hst = frozenset(hosts)
    offenders = []
    for a, b in call_pairs:
        if a not in svc:
            offenders.append(str(a))
        if b not in svc:
            offenders.append(str(b))
    for s, h in deployments:
        if s not in svc:
            offenders.append(str(s))
        if h not in hst:
            offenders.append(str(h))
    for a, b in host_links:
        if a not in hst:
            offenders.append(str(a))
        if b not in hst:
            offenders.append(str(b))
    if offenders:
        raise IngestionError("unknown entities referenced: " + ", ".join(sorted(set(offenders))))
    return TopologySnapshot.build(
        svc,
        hst,
        e_ss={(a, b) for a, b in call_pairs if a != b},
        e_sh=set(deployments),
        e_hh={(a, b) for a, b in host_links if a != b},
    )


def extract_topology(bundle: TelemetryBundle) -> TopologySnapshot:
    """Validated snapshot for one window; violations become ingestion errors."""
    report = validate_snapshot(bundle.topology)
    if report:
        raise IngestionError("; ".join(report))
    return bundle.topology


def pearson(f_i: Sequence[float], f_j: Sequence[float]) -> float:
    """Pearson correlation, with 0 whenever either side has zero variance."""
    a = np.asarray(f_i, dtype=float)
    b = np.asarray(f_j, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")
    if len(a) < 2:
        raise ShapeError("need at least 2 points")
    da = a - a.mean()
    db = b - b.mean()
    sa = math.sqrt(float(np.dot(da, da)))
    sb = math.sqrt(float(np.dot(db, db)))
    if sa == 0.0 or sb == 0.0:
        return 0.0
    return float(np.dot(da, db) / (sa * sb))


def orient_host_edges(
    hh_pairs: Iterable[tuple[int, int]],
    e_ss: Iterable[tuple[int, int]],
    e_sh: Iterable[tuple[int, int]],
) -> tuple[tuple[int, int], ...]:
    """Expand undirected host pairs to directed edges.

    When services deployed on the two hosts are connected by a directed
    invocation edge, only the aligned host direction is kept; otherwise both
    directions are.
    """
    ss = set(e_ss)
    services_on: dict[int, set[int]] = {}
    for s, h in e_sh:
        services_on.setdefault(h, set()).add(s)
    out: list[tuple[int, int]] = []
    for h1, h2 in hh_pairs:
        s1 = services_on.get(h1, set())
        s2 = services_on.get(h2, set())
        forward = any((a, b) in ss for a in s1 for b in s2)
        backward = any((a, b) in ss for a in s2 for b in s1)
        if forward and not backward:
            out.append((h1, h2))
        elif backward and not forward:
            out.append((h2, h1))
        else:
            out.append((h1, h2))
            out.append((h2, h1))
    return tuple(dict.fromkeys(out))


def assemble_cases(
    snapshots: Sequence[TopologySnapshot],
    features: Sequence[NodeFeatureSet],
    windows: Sequence[TimeWindow],
) -> list[HetGraphCase]:
    """One case per window with node index maps stable across all windows."""
    if not (len(snapshots) == len(features) == len(windows)):
        raise AlignmentError(
            f"window mismatch: {len(snapshots)} snapshots, {len(features)} feature sets, {len(windows)} windows"
        )
    services = sorted({s for snap in snapshots for s in snap.services})
    hosts = sorted({h for snap in snapshots for h in snap.hosts})
    svc_idx = {s: i for i, s in enumerate(services)}
    host_idx = {h: j for j, h in enumerate(hosts)}

    cases: list[HetGraphCase] = []
    for snap, feats, window in zip(snapshots, features, windows):
        for entity in list(feats.service_features) + list(feats.host_features):
            if entity not in svc_idx and entity not in host_idx:
                raise AlignmentError(f"{entity} has features but is absent from topology")
        svc_dim = max((len(v) for v in feats.service_features.values()), default=0)
        host_dim = max((len(v) for v in feats.host_features.values()), default=0)
        svc_rows = np.zeros((len(services), svc_dim))
        for s, vec in feats.service_features.items():
            svc_rows[svc_idx[s]] = vec
        host_rows = np.zeros((len(hosts), host_dim))
        for h, vec in feats.host_features.items():
            host_rows[host_idx[h]] = vec
        e_ss = tuple(sorted((svc_idx[a], svc_idx[b]) for a, b in snap.e_ss))
        e_sh = tuple(sorted((svc_idx[s], host_idx[h]) for s, h in snap.e_sh))
        hh_pairs = sorted((host_idx[a], host_idx[b]) for a, b in snap.e_hh)
        e_hh = orient_host_edges(hh_pairs, e_ss, e_sh)
        cases.append(
            HetGraphCase(
                case_id=f"case-{window.index:04d}",
                window=window,
                services=tuple(services),
                hosts=tuple(hosts),
                e_ss=e_ss,
                e_sh=e_sh,
                e_hh=tuple(sorted(e_hh)),
                service_features=svc_rows,
                host_features=host_rows,
            )
        )
    return cases


def node_event_frequencies(cases: Sequence[HetGraphCase]) -> np.ndarray:
    """f_i(t): count of fired event channels per node per window.

    A metric channel fires when its signed event value is positive; log bits
    and topology-change counts fire when nonzero.
    """
    n_services = len(cases[0].services)
    n_hosts = len(cases[0].hosts)
    out = np.zeros((n_services + n_hosts, len(cases)))
    for t, case in enumerate(cases):
        out[:n_services, t] = (case.service_features > 0).sum(axis=1)
        if case.host_features.size:
            out[n_services:, t] = (case.host_features > 0).sum(axis=1)
    return out


@dataclass
class RefinementReport:
    gamma: float
    removed: list[dict]
    kept: list[dict]

    def to_json(self) -> dict:
        return {"gamma": self.gamma, "removed": self.removed, "kept": self.kept}


def refine_edges(
    cases: Sequence[HetGraphCase],
    gamma: float,
    train_count: int | None = None,
) -> tuple[list[HetGraphCase], RefinementReport]:
    """Drop edges whose endpoint event series correlate below gamma.

    Correlations are computed over the first `train_count` windows only
    (default: all), and the resulting node-pair mask is applied uniformly to
    every window.
    """
    if not (-1.0 <= gamma <= 1.0):
        raise ValueError(f"gamma must be in [-1, 1], got {gamma}")
    if not cases:
        return [], RefinementReport(gamma, [], [])
    n_train = len(cases) if train_count is None else min(train_count, len(cases))
    freqs = node_event_frequencies(cases[:n_train])
    n_services = len(cases[0].services)

    corr_cache: dict[tuple[int, int], float] = {}

    def corr(i: int, j: int) -> float:
        key = (min(i, j), max(i, j))
        if key not in corr_cache:
            corr_cache[key] = pearson(freqs[key[0]], freqs[key[1]])
        return corr_cache[key]

    def keep(i: int, j: int) -> bool:
        return corr(i, j) >= gamma

    removed: list[dict] = []
    kept: list[dict] = []
    seen: set[tuple[str, int, int]] = set()

    def record(kind: str, i: int, j: int, ok: bool) -> None:
        if (kind, i, j) in seen:
            return
        seen.add((kind, i, j))
        entry = {"type": kind, "src": i, "dst": j, "corr": corr(i, j)}
        (kept if ok else removed).append(entry)

    refined: list[HetGraphCase] = []
    for case in cases:
        e_ss = tuple(e for e in case.e_ss if keep(e[0], e[1]))
        e_sh = tuple(e for e in case.e_sh if keep(e[0], n_services + e[1]))
        e_hh = tuple(e for e in case.e_hh if keep(n_services + e[0], n_services + e[1]))
        for e in case.e_ss:
            record("e_ss", e[0], e[1], keep(e[0], e[1]))
        for e in case.e_sh:
            record("e_sh", e[0], e[1], keep(e[0], n_services + e[1]))
        for e in case.e_hh:
            record("e_hh", e[0], e[1], keep(n_services + e[0], n_services + e[1]))
        refined.append(replace(case, e_ss=e_ss, e_sh=e_sh, e_hh=e_hh))
    return refined, RefinementReport(gamma, removed, kept)


# ---------------------------------------------------------------------------
# case store persistence
# ---------------------------------------------------------------------------


def save_cases(cases: Sequence[HetGraphCase], root: Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for case in cases:
        case_dir = root / case.case_id
        case_dir.mkdir(parents=True, exist_ok=True)
        (case_dir / "graph.json").write_text(dumps_canonical(case.graph_json()) + "\n")
        (case_dir / "features.json").write_text(dumps_canonical(case.features_json()) + "\n")


def load_cases(root: Path) -> list[HetGraphCase]:
    root = Path(root)
    cases = []
    for case_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        graph = json.loads((case_dir / "graph.json").read_text())
        features = json.loads((case_dir / "features.json").read_text())
        cases.append(HetGraphCase.from_json(graph, features))
    return cases
