"""Annotation service: serves the active-learning query queue over plain
JSON-over-HTTP and accepts root-cause submissions from human labelers.

Three endpoints:
    GET  /query/next   head of the queue (same case until answered), 204 when
                       drained, 409 when no round is open
    POST /label        {"case_id": ..., "root_cause": {...} | "no-fault"}
    GET  /status       {"answered": n, "remaining": m, "budget": b}

Queries are delivered at-least-once; the first submission for a case wins and
any pseudo-label for it is superseded.  Label writes serialize through one
lock; reads are lock-free snapshots.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Sequence

import numpy as np

from .active import LabelConflictError, LabelStore, QueryPlan, QueryReason
from .core import EntityId, EntityKind, LabelRecord, NO_FAULT, Provenance
from .events import FeatureSpace
from .graphs import HetGraphCase
from .hgcn import HgcnModel, score


class NoActiveRound(RuntimeError):
    pass


class UnknownCase(KeyError):
    pass


class InvalidRootCause(ValueError):
    pass


def build_query_view(
    case: HetGraphCase,
    reason: QueryReason,
    model: HgcnModel | None = None,
    space: FeatureSpace | None = None,
    top_events: int = 3,
) -> dict:
    """The annotator-facing snapshot of a case: nodes, edges, event summary
    and the model's provisional suggestion.  Never includes ground truth."""
    nodes = []
    s_count = len(case.services)
    for i, svc in enumerate(case.services):
        row = case.service_features[i]
        n_metrics = len(space.service_metrics) if space else len(row)
        metric_part = row[: n_metrics]
        names = list(space.service_metrics) if space else [f"m{j}" for j in range(len(metric_part))]
        order = np.argsort(-np.abs(metric_part))[:top_events]
        events = [
            {"metric": names[j], "value": float(metric_part[j])}
            for j in order
            if metric_part[j] != 0.0
        ]
        fired = []
        if space:
            bits = row[n_metrics : n_metrics + space.n_log_clusters]
            fired = [int(k) for k in np.nonzero(bits)[0]]
        topo_change = float(row[-1]) if len(row) else 0.0
        nodes.append(
            {
                "kind": "service",
                "name": svc.name,
                "index": i,
                "top_metric_events": events,
                "fired_log_clusters": fired,
                "topology_change": topo_change,
            }
        )
    for j, hst in enumerate(case.hosts):
        row = case.host_features[j]
        names = list(space.host_metrics) if space else [f"m{k}" for k in range(len(row))]
        order = np.argsort(-np.abs(row))[:top_events]
        events = [
            {"metric": names[k], "value": float(row[k])} for k in order if row[k] != 0.0
        ]
        nodes.append(
            {
                "kind": "host",
                "name": hst.name,
                "index": s_count + j,
                "top_metric_events": events,
                "fired_log_clusters": [],
                "topology_change": 0.0,
            }
        )
    suggestion = []
    if model is not None:
        sv = score(model, case)
        suggestion = [
            {"kind": sv.nodes[i].kind.value, "name": sv.nodes[i].name, "score": float(sv.scores[i])}
            for i in sv.ranking[:5]
        ]
    return {
        "case_id": case.case_id,
        "reason": reason.value,
        "window": case.window.to_json(),
        "nodes": nodes,
        "edges": {
            "e_ss": [list(e) for e in case.e_ss],
            "e_sh": [list(e) for e in case.e_sh],
            "e_hh": [list(e) for e in case.e_hh],
        },
        "suggestion": suggestion,
    }


@dataclass
class RoundState:
    plan: QueryPlan

    def to_json(self) -> dict:
        return {"plan": self.plan.to_json()}

    @staticmethod
    def from_json(obj: dict) -> "RoundState":
        return RoundState(QueryPlan.from_json(obj["plan"]))


class AnnotationService:
    """Round state machine shared by the HTTP handler threads."""

    def __init__(
        self,
        cases: Sequence[HetGraphCase],
        plan: QueryPlan | None,
        store: LabelStore,
        model: HgcnModel | None = None,
        space: FeatureSpace | None = None,
    ):
        self.cases = {c.case_id: c for c in cases}
        self.plan = plan
        self.store = store
        self.model = model
        self.space = space
        self.lock = threading.Lock()
        self.served: set[str] = set()

    def _pending(self) -> list[str]:
        if self.plan is None:
            raise NoActiveRound("no active round")
        return [cid for cid, _ in self.plan.entries if self.store.trusted(cid) is None]

    def next_query(self) -> dict | None:
        pending = self._pending()
        if not pending:
            return None
        case_id = pending[0]
        reason = next(r for cid, r in self.plan.entries if cid == case_id)
        self.served.add(case_id)
        return build_query_view(self.cases[case_id], reason, self.model, self.space)

    def submit(self, case_id: str, root_cause) -> dict:
        if self.plan is None:
            raise NoActiveRound("no active round")
        if case_id not in self.cases or case_id not in {cid for cid, _ in self.plan.entries}:
            raise UnknownCase(case_id)
        case = self.cases[case_id]
        if root_cause == NO_FAULT:
            entity = None
        else:
            entity = EntityId(EntityKind(root_cause["kind"]), root_cause["name"])
            if entity not in case.node_ids():
                raise InvalidRootCause(f"{entity} is not a node of {case_id}")
        record = LabelRecord(case_id, entity, Provenance.HUMAN, int(time.time()))
        with self.lock:
            self.store.add_trusted_or_conflict(record)
        return {"case_id": case_id, "accepted": True}

    def status(self) -> dict:
        if self.plan is None:
            return {"answered": 0, "remaining": 0, "budget": 0}
        answered = sum(1 for cid, _ in self.plan.entries if self.store.trusted(cid) is not None)
        return {
            "answered": answered,
            "remaining": len(self.plan.entries) - answered,
            "budget": self.plan.budget,
        }


class _Handler(BaseHTTPRequestHandler):
    service: AnnotationService
    ui_dir: Path | None = None

    def log_message(self, fmt, *args):  # keep test output quiet
        pass

    def _send_json(self, code: int, payload) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self) -> None:
        if self.path == "/query/next":
            try:
                view = self.service.next_query()
            except NoActiveRound as exc:
                self._send_json(409, {"error": str(exc)})
                return
            if view is None:
                self.send_response(204)
                self.end_headers()
                return
            self._send_json(200, view)
        elif self.path == "/status":
            self._send_json(200, self.service.status())
        elif self.ui_dir is not None:
            self._serve_static()
        else:
            self._send_json(404, {"error": "not found"})

    def _serve_static(self) -> None:
        rel = self.path.lstrip("/") or "index.html"
        target = (self.ui_dir / rel).resolve()
        if not str(target).startswith(str(self.ui_dir.resolve())) or not target.is_file():
            self._send_json(404, {"error": "not found"})
            return
        body = target.read_bytes()
        ctype = {
            ".html": "text/html",
            ".js": "application/javascript",
            ".css": "text/css",
            ".svg": "image/svg+xml",
        }.get(target.suffix, "application/octet-stream")
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self) -> None:
        if self.path != "/label":
            self._send_json(404, {"error": "not found"})
            return
        length = int(self.headers.get("Content-Length", "0"))
        try:
            payload = json.loads(self.rfile.read(length).decode("utf-8"))
            ack = self.service.submit(payload["case_id"], payload["root_cause"])
        except NoActiveRound as exc:
            self._send_json(409, {"error": str(exc)})
        except LabelConflictError as exc:
            self._send_json(409, {"error": str(exc)})
        except UnknownCase as exc:
            self._send_json(404, {"error": f"unknown case: {exc}"})
        except (InvalidRootCause, KeyError, ValueError) as exc:
            self._send_json(422, {"error": str(exc)})
        else:
            self._send_json(200, ack)


def make_http_server(
    service: AnnotationService, port: int = 0, ui_dir: Path | None = None
) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (_Handler,), {"service": service, "ui_dir": ui_dir})
    return ThreadingHTTPServer(("127.0.0.1", port), handler)


class HttpHumanLabeler:
    """Labeler that exposes each query over HTTP and blocks for the answer."""

    def __init__(self, service: AnnotationService, poll_s: float = 0.2, timeout_s: float | None = None):
        self.service = service
        self.poll_s = poll_s
        self.timeout_s = timeout_s

    def label(self, case: HetGraphCase, reason: QueryReason) -> LabelRecord | None:
        self.service.cases[case.case_id] = case
        self.service.plan = QueryPlan(((case.case_id, reason),), budget=1)
        self.service.served.clear()
        waited = 0.0
        while True:
            record = self.service.store.trusted(case.case_id)
            if record is not None:
                return record
            time.sleep(self.poll_s)
            waited += self.poll_s
            if self.timeout_s is not None and waited >= self.timeout_s:
                return None
