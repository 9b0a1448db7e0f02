"""Semi-supervised labeling loop: cluster case embeddings, label medoids,
propagate pseudo-labels, then spend the remaining budget on noise points and
cluster-boundary cases (in that priority order).

Trusted (human/oracle) labels always supersede pseudo-labels.  A cluster
whose medoid is answered "no-fault" is the fault-free baseline class: its
members inherit no-fault pseudo-labels and the cluster is excluded from
boundary querying.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .clustering import dbscan
from .core import EntityId, LabelRecord, Provenance, dumps_canonical
from .graphs import HetGraphCase
from .hgcn import HgcnConfig, HgcnModel, encode, labeled_from_cases, prepare_case, train_supervised


class BudgetError(ValueError):
    pass


class LabelConflictError(ValueError):
    pass


class LabelerUnavailable(RuntimeError):
    """Raised when the labeler defers; loop state is already persisted."""


class QueryReason(enum.Enum):
    MEDOID = "medoid"
    NOISE = "noise"
    BOUNDARY = "boundary"


@dataclass(frozen=True)
class CaseEmbedding:
    case_id: str
    vector: np.ndarray


@dataclass
class ClusterAssignment:
    clusters: dict[int, list[str]]  # cluster id -> member case ids
    noise: list[str]
    medoids: dict[int, str]


@dataclass(frozen=True)
class QueryPlan:
    entries: tuple[tuple[str, QueryReason], ...]
    budget: int

    def to_json(self) -> dict:
        return {
            "entries": [[cid, reason.value] for cid, reason in self.entries],
            "budget": self.budget,
        }

    @staticmethod
    def from_json(obj: dict) -> "QueryPlan":
        return QueryPlan(
            tuple((cid, QueryReason(reason)) for cid, reason in obj["entries"]),
            int(obj["budget"]),
        )


class Labeler(Protocol):
    def label(self, case: HetGraphCase, reason: QueryReason) -> LabelRecord | None:
        """Return a trusted label, or None to defer (aborting the round)."""


class OracleLabeler:
    """Answers from simulator ground truth; fault-free windows get no-fault."""

    def __init__(self, truths: Mapping[str, EntityId | None]):
        self.truths = dict(truths)

    def label(self, case: HetGraphCase, reason: QueryReason) -> LabelRecord | None:
        return LabelRecord(
            case_id=case.case_id,
            root_cause=self.truths.get(case.case_id),
            provenance=Provenance.ORACLE,
            created_at=case.window.end,
        )


# ---------------------------------------------------------------------------
# label store
# ---------------------------------------------------------------------------


class LabelStore:
    """Append-only label log with precedence: trusted beats pseudo, first
    trusted label per case wins."""

    def __init__(self, path: Path | None = None):
        self.path = Path(path) if path is not None else None
        self._trusted: dict[str, LabelRecord] = {}
        self._pseudo: dict[str, LabelRecord] = {}
        if self.path is not None and self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    self._apply(LabelRecord.from_json(json.loads(line)))

    def _apply(self, record: LabelRecord) -> bool:
        if record.is_trusted:
            if record.case_id in self._trusted:
                return False
            self._trusted[record.case_id] = record
            self._pseudo.pop(record.case_id, None)
            return True
        if record.case_id in self._trusted:
            return False
        self._pseudo[record.case_id] = record
        return True

    def add(self, record: LabelRecord) -> bool:
        """Apply and persist; returns False when precedence rejects the write."""
        accepted = self._apply(record)
        if accepted and self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(dumps_canonical(record.to_json()) + "\n")
        return accepted

    def add_trusted_or_conflict(self, record: LabelRecord) -> None:
        if not record.is_trusted:
            raise ValueError("only trusted labels go through the conflict path")
        if record.case_id in self._trusted:
            raise LabelConflictError(f"{record.case_id} already has a trusted label")
        self.add(record)

    def trusted(self, case_id: str) -> LabelRecord | None:
        return self._trusted.get(case_id)

    def effective(self, case_id: str) -> LabelRecord | None:
        return self._trusted.get(case_id) or self._pseudo.get(case_id)

    def trusted_count(self) -> int:
        return len(self._trusted)

    def all_effective(self) -> dict[str, LabelRecord]:
        out = dict(self._pseudo)
        out.update(self._trusted)
        return out

    def snapshot(self) -> list[LabelRecord]:
        return sorted(self.all_effective().values(), key=lambda r: r.case_id)


def apply_labels(cases: Sequence[HetGraphCase], store: LabelStore) -> None:
    """Attach the store's effective labels onto the case objects."""
    for case in cases:
        case.human_label = store.trusted(case.case_id)
        pseudo = store.effective(case.case_id)
        case.pseudo_label = pseudo if pseudo is not None and not pseudo.is_trusted else None


# ---------------------------------------------------------------------------
# embedding + clustering
# ---------------------------------------------------------------------------


def embed_cases(model: HgcnModel, cases: Sequence[HetGraphCase]) -> list[CaseEmbedding]:
    """Graph-level vectors: per-type mean-pooled node embeddings, concatenated
    with the per-type channel-wise maxima of the model's (scaled) inputs.

    Mean pooling alone dilutes a single anomalous node by 1/|V_type|, which
    buries weak single-host faults inside the fault-free mass; the max
    channels keep every per-channel extreme visible to the clustering.
    """
    out = []
    for case in cases:
        z = encode(model, case)
        prep = prepare_case(model, case)
        s_count = len(case.services)
        svc_pool = z[:s_count].mean(axis=0) if s_count else np.zeros(model.hidden)
        host_pool = z[s_count:].mean(axis=0) if case.n_nodes > s_count else np.zeros(model.hidden)
        svc_max = prep.x_s.max(axis=0) if s_count else np.zeros(model.f_s)
        host_max = prep.x_h.max(axis=0) if case.n_nodes > s_count else np.zeros(model.f_h)
        out.append(CaseEmbedding(case.case_id, np.concatenate([svc_pool, host_pool, svc_max, host_max])))
    return out


def select_medoid(member_ids: Sequence[str], vectors: Sequence[np.ndarray]) -> str:
    """Member minimizing total euclidean distance; ties pick the smallest id."""
    if not member_ids:
        raise ValueError("empty cluster")
    x = np.asarray(vectors)
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    np.fill_diagonal(d2, 0.0)
    totals = np.sqrt(d2).sum(axis=1)
    best = min(range(len(member_ids)), key=lambda i: (totals[i], member_ids[i]))
    return member_ids[best]


def suggest_eps(embeddings: Sequence[CaseEmbedding], min_pts: int) -> float:
    """Data-adaptive eps: the median distance to the min_pts-th neighbor.

    Keeps the dense fault-free mass in one cluster while rare fault
    signatures fall out as noise or small clusters, whatever the embedding
    scale happens to be.
    """
    x = np.asarray([e.vector for e in embeddings])
    if len(x) <= min_pts:
        return 1.0
    from .clustering import pairwise_distances

    dist = np.sort(pairwise_distances(x), axis=1)
    kth = dist[:, min(min_pts, dist.shape[1] - 1)]
    eps = float(np.median(kth))
    return eps if eps > 0 else 1.0


def cluster(embeddings: Sequence[CaseEmbedding], eps: float, min_pts: int) -> ClusterAssignment:
    """DBSCAN over euclidean distance, with per-cluster medoids."""
    if not embeddings:
        raise ValueError("no embeddings to cluster")
    x = np.asarray([e.vector for e in embeddings])
    labels = dbscan(x, eps=eps, min_pts=min_pts, metric="euclidean")
    clusters: dict[int, list[str]] = {}
    noise: list[str] = []
    for emb, lab in zip(embeddings, labels):
        if lab == -1:
            noise.append(emb.case_id)
        else:
            clusters.setdefault(int(lab), []).append(emb.case_id)
    by_id = {e.case_id: e.vector for e in embeddings}
    medoids = {
        cid: select_medoid(members, [by_id[m] for m in members])
        for cid, members in sorted(clusters.items())
    }
    return ClusterAssignment(clusters, noise, medoids)


# ---------------------------------------------------------------------------
# propagation + query planning
# ---------------------------------------------------------------------------


def propagate(
    assignment: ClusterAssignment, medoid_labels: Mapping[int, LabelRecord]
) -> list[LabelRecord]:
    """Copy each medoid's root cause to the rest of its cluster as pseudo labels."""
    out: list[LabelRecord] = []
    for cid, members in sorted(assignment.clusters.items()):
        if cid not in medoid_labels:
            raise ValueError(f"cluster {cid} has an unlabeled medoid")
        source = medoid_labels[cid]
        for member in members:
            if member == assignment.medoids[cid]:
                continue
            out.append(
                LabelRecord(
                    case_id=member,
                    root_cause=source.root_cause,
                    provenance=Provenance.PSEUDO,
                    created_at=source.created_at,
                )
            )
    return out


def plan_queries(
    assignment: ClusterAssignment,
    embeddings: Sequence[CaseEmbedding],
    budget: int,
    k_boundary: int,
    exclude_clusters: frozenset[int] | set[int] = frozenset(),
    skip: frozenset[str] | set[str] = frozenset(),
) -> QueryPlan:
    """Medoids first, then noise by distance to the nearest medoid, then
    per-cluster boundary members round-robin; truncated at the budget.

    `exclude_clusters` removes a cluster's boundary candidates (the fault-free
    baseline class); `skip` drops already-answered cases without charging the
    budget.
    """
    by_id = {e.case_id: e.vector for e in embeddings}
    medoid_entries = [
        (assignment.medoids[cid], QueryReason.MEDOID)
        for cid in sorted(assignment.medoids)
        if assignment.medoids[cid] not in skip
    ]
    if budget < len(medoid_entries):
        raise BudgetError(f"budget {budget} cannot cover {len(medoid_entries)} medoids")

    medoid_vectors = [by_id[m] for m in assignment.medoids.values()]

    def nearest_medoid_distance(case_id: str) -> float:
        if not medoid_vectors:
            return 0.0
        v = by_id[case_id]
        return min(float(np.linalg.norm(v - m)) for m in medoid_vectors)

    noise_entries = [
        (cid, QueryReason.NOISE)
        for cid in sorted(
            (c for c in assignment.noise if c not in skip),
            key=lambda c: (-nearest_medoid_distance(c), c),
        )
    ]

    per_cluster: list[list[str]] = []
    for cid in sorted(assignment.clusters):
        if cid in exclude_clusters:
            continue
        medoid = assignment.medoids[cid]
        mv = by_id[medoid]
        members = [m for m in assignment.clusters[cid] if m != medoid and m not in skip]
        members.sort(key=lambda m: (-float(np.linalg.norm(by_id[m] - mv)), m))
        per_cluster.append(members[:k_boundary])
    boundary_entries: list[tuple[str, QueryReason]] = []
    for rank in range(k_boundary):
        for members in per_cluster:
            if rank < len(members):
                boundary_entries.append((members[rank], QueryReason.BOUNDARY))

    entries = (medoid_entries + noise_entries + boundary_entries)[:budget]
    return QueryPlan(tuple(entries), budget)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActiveLearnConfig:
    budget: int
    rounds: int = 3
    k_boundary: int = 3
    embed_eps: float | None = 0.5  # None: adapt to the embedding scale per round
    embed_min_pts: int = 4

    def to_json(self) -> dict:
        return {
            "budget": self.budget,
            "rounds": self.rounds,
            "k_boundary": self.k_boundary,
            "embed_eps": self.embed_eps,
            "embed_min_pts": self.embed_min_pts,
        }

    @staticmethod
    def from_json(obj: dict) -> "ActiveLearnConfig":
        return ActiveLearnConfig(**obj)


@dataclass
class LoopResult:
    model: HgcnModel
    store: LabelStore
    rounds_run: int
    queries_answered: int
    baseline_clusters: int


def run_loop(
    cases: Sequence[HetGraphCase],
    model: HgcnModel,
    labeler: Labeler,
    cfg: ActiveLearnConfig,
    hgcn_cfg: HgcnConfig,
    store: LabelStore | None = None,
) -> LoopResult:
    """Alternate clustering, medoid/noise/boundary querying and fine-tuning.

    Deterministic given (cases, model, labeler answers): resuming with a store
    holding earlier answers replays to the identical final state.
    """
    store = store if store is not None else LabelStore()
    by_id = {c.case_id: c for c in cases}
    answered = 0
    rounds_run = 0
    baseline_clusters: set[str] = set()  # medoid ids of no-fault clusters

    def remaining() -> int:
        return cfg.budget - store.trusted_count()

    for _ in range(cfg.rounds):
        if remaining() <= 0:
            break
        embeddings = embed_cases(model, cases)
        eps = cfg.embed_eps if cfg.embed_eps is not None else suggest_eps(embeddings, cfg.embed_min_pts)
        assignment = cluster(embeddings, eps, cfg.embed_min_pts)

        unlabeled_medoids = [
            m for m in assignment.medoids.values() if store.trusted(m) is None
        ]
        if remaining() < len(unlabeled_medoids):
            break  # budget exhausted: cannot cover this round's medoids
        # the plan is built from the round-start model state alone (full
        # boundary depth, no skip list) so that resuming an aborted round
        # replays the identical sequence; budget, already-answered cases and
        # retired no-fault clusters are all enforced at dispatch time
        depth = max((len(m) for m in assignment.clusters.values()), default=1)
        plan = plan_queries(assignment, embeddings, budget=len(cases), k_boundary=depth)
        rounds_run += 1

        cluster_of = {
            case_id: cid for cid, members in assignment.clusters.items() for case_id in members
        }
        for case_id, reason in plan.entries:
            if remaining() <= 0:
                break
            if store.trusted(case_id) is not None:
                continue
            if reason is QueryReason.BOUNDARY:
                cid = cluster_of.get(case_id)
                if cid is not None:
                    medoid_rec = store.trusted(assignment.medoids[cid])
                    if medoid_rec is not None and medoid_rec.is_no_fault:
                        continue  # fault-free baseline cluster: stop querying it
            record = labeler.label(by_id[case_id], reason)
            if record is None:
                raise LabelerUnavailable(f"labeler deferred on {case_id}")
            store.add(record)
            answered += 1

        medoid_labels = {
            cid: rec
            for cid, medoid in assignment.medoids.items()
            if (rec := store.trusted(medoid)) is not None
        }
        for pseudo in propagate(assignment, medoid_labels):
            store.add(pseudo)
        baseline_clusters |= {
            assignment.medoids[cid]
            for cid, rec in medoid_labels.items()
            if rec.is_no_fault
        }

        apply_labels(cases, store)
        labeled = labeled_from_cases(cases, hgcn_cfg.pseudo_weight)
        if labeled:
            train_supervised(model, labeled, hgcn_cfg)

    apply_labels(cases, store)
    return LoopResult(model, store, rounds_run, answered, len(baseline_clusters))


# ---------------------------------------------------------------------------
# pseudo-label quality protocol
# ---------------------------------------------------------------------------


def pseudo_label_accuracy(
    assignment: ClusterAssignment,
    truths: Mapping[str, EntityId | None],
    sample_n: int = 15,
    seed: int = 0,
    runs: int = 5,
) -> float:
    """Fraction of sampled non-medoid members whose pseudo-label (their
    medoid's true root cause) matches their own, averaged over seeded runs."""
    if sample_n <= 0:
        raise ValueError("sample_n must be positive")
    scores = []
    for r in range(runs):
        rng = np.random.default_rng(seed + r)
        hits = total = 0
        for cid in sorted(assignment.clusters):
            medoid = assignment.medoids[cid]
            members = [m for m in assignment.clusters[cid] if m != medoid]
            if not members:
                continue
            take = min(sample_n, len(members))
            chosen = rng.choice(len(members), size=take, replace=False)
            for i in chosen:
                total += 1
                if truths.get(members[int(i)]) == truths.get(medoid):
                    hits += 1
        scores.append(hits / total if total else 1.0)
    return float(np.mean(scores))
