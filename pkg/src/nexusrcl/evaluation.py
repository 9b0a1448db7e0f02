"""Ranking metrics: Top-K accuracy, Average A@5, report assembly."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

from .core import EntityId
from .hgcn import NodeScoreVector
from .simulator import GroundTruth


class EvalAlignmentError(ValueError):
    pass


class Variant(enum.Enum):
    FULL = "full"
    NO_EDGE_REFINE = "no_edge_refine"
    RANDOM_LABELING = "random_labeling"
    HOMOGENEOUS = "homogeneous"


@dataclass
class EvalReport:
    a_at: dict[int, float]  # K in {1, 3, 5}
    avg_a5: float
    per_case: list[tuple[str, int]]  # (case_id, rank of the true root cause)
    runtime_s: tuple[float, float]  # (offline, online)

    def to_json(self) -> dict:
        return {
            "a_at": {str(k): v for k, v in sorted(self.a_at.items())},
            "avg_a5": self.avg_a5,
            "per_case": [[cid, rank] for cid, rank in self.per_case],
            "runtime_s": {"offline": self.runtime_s[0], "online": self.runtime_s[1]},
        }

    @staticmethod
    def from_json(obj: dict) -> "EvalReport":
        return EvalReport(
            a_at={int(k): float(v) for k, v in obj["a_at"].items()},
            avg_a5=float(obj["avg_a5"]),
            per_case=[(cid, int(rank)) for cid, rank in obj["per_case"]],
            runtime_s=(float(obj["runtime_s"]["offline"]), float(obj["runtime_s"]["online"])),
        )


def _truth_ranks(
    predictions: Sequence[NodeScoreVector], truths: Mapping[str, EntityId]
) -> list[tuple[str, int]]:
    ranks = []
    for pred in predictions:
        if pred.case_id not in truths:
            raise EvalAlignmentError(f"no ground truth for {pred.case_id}")
        ranks.append((pred.case_id, pred.rank_of(truths[pred.case_id])))
    return ranks


def _as_truth_map(truths) -> dict[str, EntityId]:
    if isinstance(truths, Mapping):
        sample = next(iter(truths.values()), None)
        if sample is None or isinstance(sample, EntityId):
            return dict(truths)
        return {cid: t.root_cause for cid, t in truths.items()}
    return {t.case_id: t.root_cause for t in truths}


def topk_accuracy(
    predictions: Sequence[NodeScoreVector],
    truths: Sequence[GroundTruth] | Mapping[str, EntityId],
    k: int,
) -> float:
    """Fraction of cases whose true root cause sits within the top k."""
    if not predictions:
        raise EvalAlignmentError("no predictions")
    ranks = _truth_ranks(predictions, _as_truth_map(truths))
    return sum(1 for _, r in ranks if r <= k) / len(ranks)


def avg_a5(
    predictions: Sequence[NodeScoreVector],
    truths: Sequence[GroundTruth] | Mapping[str, EntityId],
) -> float:
    """Mean of A@1 through A@5."""
    return sum(topk_accuracy(predictions, truths, k) for k in range(1, 6)) / 5.0


def build_report(
    predictions: Sequence[NodeScoreVector],
    truths: Sequence[GroundTruth] | Mapping[str, EntityId],
    offline_s: float = 0.0,
    online_s: float = 0.0,
) -> EvalReport:
    truth_map = _as_truth_map(truths)
    ranks = _truth_ranks(predictions, truth_map)
    return EvalReport(
        a_at={k: topk_accuracy(predictions, truth_map, k) for k in (1, 3, 5)},
        avg_a5=avg_a5(predictions, truth_map),
        per_case=ranks,
        runtime_s=(offline_s, online_s),
    )


def chronological_split(items: Sequence, fraction: float = 0.7) -> tuple[list, list]:
    """Earliest `fraction` of a window-ordered sequence for training, rest for test."""
    if not (0.0 < fraction < 1.0):
        raise ValueError("fraction must be in (0, 1)")
    ordered = sorted(items, key=lambda x: x.window.index)
    cut = int(round(len(ordered) * fraction))
    return list(ordered[:cut]), list(ordered[cut:])
