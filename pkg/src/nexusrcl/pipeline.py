"""Stage orchestration: extract -> build graphs -> pretrain -> active-learn
-> evaluate, with content-hash stage skipping, plus the in-memory experiment
path used by the ablation harness.

Each stage persists its artifacts under the workdir and records a SHA-256
stamp of (inputs, relevant config); a rerun with identical inputs and config
skips the stage.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import replace as dc_replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .active import LabelStore, Labeler, OracleLabeler, apply_labels, run_loop
from .config import PipelineConfig
from .core import (
    EntityId,
    LabelRecord,
    Provenance,
    TelemetryBundle,
    TimeWindow,
    dumps_canonical,
    read_bundles_jsonl,
)
from .events import (
    ExtractionResult,
    FeatureSpace,
    LogClusterModel,
    NodeFeatureSet,
    extract_features,
)
from .evaluation import EvalReport, Variant, build_report, chronological_split
from .graphs import HetGraphCase, assemble_cases, load_cases, refine_edges, save_cases
from .hgcn import (
    HgcnModel,
    fit_feature_scales,
    init_model,
    labeled_from_cases,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    score,
    train_supervised,
)
from .plotting import render_loss_curve, render_report_figures
from .simulator import GroundTruth, SimConfig, simulate


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# stage stamping
# ---------------------------------------------------------------------------


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _stage_hash(inputs: Sequence[Path], config_subset: dict) -> str:
    digest = hashlib.sha256()
    digest.update(dumps_canonical(config_subset).encode())
    for path in inputs:
        digest.update(str(path.name).encode())
        digest.update(_sha256_file(path).encode())
    return digest.hexdigest()


def _stamp_path(workdir: Path, stage: str) -> Path:
    return Path(workdir) / ".stamps" / f"{stage}.json"


def _should_skip(workdir: Path, stage: str, stage_hash: str, outputs: Sequence[Path]) -> bool:
    stamp = _stamp_path(workdir, stage)
    if not stamp.exists():
        return False
    if json.loads(stamp.read_text()).get("hash") != stage_hash:
        return False
    return all(p.exists() for p in outputs)


def _write_stamp(workdir: Path, stage: str, stage_hash: str) -> None:
    stamp = _stamp_path(workdir, stage)
    stamp.parent.mkdir(parents=True, exist_ok=True)
    stamp.write_text(dumps_canonical({"hash": stage_hash, "stage": stage}) + "\n")


def _record_timing(workdir: Path, cfg: PipelineConfig, stage: str, seconds: float) -> None:
    path = cfg.path(workdir, "timings")
    timings = json.loads(path.read_text()) if path.exists() else {}
    timings[stage] = seconds
    path.write_text(json.dumps(timings, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# feature persistence
# ---------------------------------------------------------------------------


def save_extraction(result: ExtractionResult, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "space.json").write_text(dumps_canonical(result.space.to_json()) + "\n")
    (out_dir / "log_clusters.json").write_text(dumps_canonical(result.log_model.to_json()) + "\n")
    (out_dir / "filter_report.json").write_text(
        dumps_canonical(result.filter_report.summary()) + "\n"
    )
    vectors = []
    for feats in result.features:
        vectors.append(
            {
                "window": feats.window.to_json(),
                "services": [[e.to_json(), [float(v) for v in vec]] for e, vec in sorted(feats.service_features.items())],
                "hosts": [[e.to_json(), [float(v) for v in vec]] for e, vec in sorted(feats.host_features.items())],
            }
        )
    (out_dir / "vectors.json").write_text(dumps_canonical({"windows": vectors}) + "\n")


def load_extraction(out_dir: Path) -> tuple[FeatureSpace, list[NodeFeatureSet], LogClusterModel]:
    out_dir = Path(out_dir)
    space = FeatureSpace.from_json(json.loads((out_dir / "space.json").read_text()))
    log_model = LogClusterModel.from_json(json.loads((out_dir / "log_clusters.json").read_text()))
    features = []
    for entry in json.loads((out_dir / "vectors.json").read_text())["windows"]:
        window = TimeWindow.from_json(entry["window"])
        features.append(
            NodeFeatureSet(
                window,
                {EntityId.from_json(e): np.asarray(vec) for e, vec in entry["services"]},
                {EntityId.from_json(e): np.asarray(vec) for e, vec in entry["hosts"]},
            )
        )
    return space, features, log_model


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_simulate(workdir: Path, cfg: PipelineConfig, sim_cfg: SimConfig) -> list[Path]:
    out = simulate(sim_cfg)
    telemetry = cfg.path(workdir, "telemetry")
    telemetry.parent.mkdir(parents=True, exist_ok=True)
    with open(telemetry, "w", encoding="utf-8") as fh:
        for bundle in out.bundles:
            fh.write(dumps_canonical(bundle.to_json()) + "\n")
    truth_path = cfg.path(workdir, "ground_truth")
    truth_path.write_text(
        dumps_canonical({"cases": [t.to_json() for t in out.truths]}) + "\n"
    )
    return [telemetry, truth_path]


def stage_extract(workdir: Path, cfg: PipelineConfig) -> bool:
    """Returns True when the stage ran, False when skipped."""
    telemetry = cfg.path(workdir, "telemetry")
    if not telemetry.exists():
        raise StageError("extract", FileNotFoundError(f"telemetry not found: {telemetry}"))
    out_dir = cfg.path(workdir, "features")
    stage_hash = _stage_hash([telemetry], cfg.extraction.to_json())
    outputs = [out_dir / "space.json", out_dir / "vectors.json", out_dir / "log_clusters.json"]
    if _should_skip(workdir, "extract", stage_hash, outputs):
        return False
    started = time.perf_counter()
    try:
        bundles = read_bundles_jsonl(telemetry)
        result = extract_features(bundles, cfg.extraction)
        save_extraction(result, out_dir)
    except Exception as exc:
        raise StageError("extract", exc) from exc
    _write_stamp(workdir, "extract", stage_hash)
    _record_timing(workdir, cfg, "extract", time.perf_counter() - started)
    return True


def stage_build_graphs(workdir: Path, cfg: PipelineConfig) -> bool:
    telemetry = cfg.path(workdir, "telemetry")
    features_dir = cfg.path(workdir, "features")
    cases_dir = cfg.path(workdir, "cases")
    inputs = [telemetry, features_dir / "vectors.json", features_dir / "space.json"]
    subset = {"gamma": cfg.gamma, "train_fraction": cfg.train_fraction}
    stage_hash = _stage_hash(inputs, subset)
    refinement_path = cfg.path(workdir, "refinement")
    if _should_skip(workdir, "build-graphs", stage_hash, [cases_dir, refinement_path]):
        return False
    started = time.perf_counter()
    try:
        bundles = read_bundles_jsonl(telemetry)
        _, features, _ = load_extraction(features_dir)
        snapshots = [b.topology for b in bundles]
        windows = [b.window for b in bundles]
        cases = assemble_cases(snapshots, features, windows)
        n_train = int(round(len(cases) * cfg.train_fraction))
        cases, report = refine_edges(cases, cfg.gamma, train_count=n_train)
        save_cases(cases, cases_dir)
        refinement_path.write_text(dumps_canonical(report.to_json()) + "\n")
    except Exception as exc:
        raise StageError("build-graphs", exc) from exc
    _write_stamp(workdir, "build-graphs", stage_hash)
    _record_timing(workdir, cfg, "build-graphs", time.perf_counter() - started)
    return True


def _load_split_cases(workdir: Path, cfg: PipelineConfig) -> tuple[list[HetGraphCase], list[HetGraphCase]]:
    cases = load_cases(cfg.path(workdir, "cases"))
    return chronological_split(cases, cfg.train_fraction)


def stage_pretrain(workdir: Path, cfg: PipelineConfig) -> bool:
    cases_dir = cfg.path(workdir, "cases")
    ckpt = cfg.path(workdir, "pretrained")
    subset = {"model": cfg.pretrain_config().to_json(), "train_fraction": cfg.train_fraction}
    stage_hash = _stage_hash(sorted(cases_dir.glob("*/features.json")), subset)
    if _should_skip(workdir, "pretrain", stage_hash, [ckpt]):
        return False
    started = time.perf_counter()
    try:
        train_cases, _ = _load_split_cases(workdir, cfg)
        model = init_model(
            cfg.pretrain_config(),
            train_cases[0].service_features.shape[1],
            train_cases[0].host_features.shape[1],
        )
        fit_feature_scales(model, train_cases)
        curve = pretrain(model, train_cases, cfg.pretrain_config())
        save_checkpoint(model, ckpt)
        render_loss_curve(curve, cfg.path(workdir, "figures") / "pretrain_loss.png", "reconstruction loss")
    except Exception as exc:
        raise StageError("pretrain", exc) from exc
    _write_stamp(workdir, "pretrain", stage_hash)
    _record_timing(workdir, cfg, "pretrain", time.perf_counter() - started)
    return True


def load_truths(path: Path) -> list[GroundTruth]:
    obj = json.loads(Path(path).read_text())
    return [GroundTruth.from_json(t) for t in obj["cases"]]


def oracle_from_truths(truths: Sequence[GroundTruth], cases: Sequence[HetGraphCase]) -> OracleLabeler:
    truth_map: dict[str, EntityId | None] = {c.case_id: None for c in cases}
    truth_map.update({t.case_id: t.root_cause for t in truths})
    return OracleLabeler(truth_map)


def stage_active_learn(workdir: Path, cfg: PipelineConfig, labeler: Labeler | None = None) -> bool:
    cases_dir = cfg.path(workdir, "cases")
    pretrained = cfg.path(workdir, "pretrained")
    model_path = cfg.path(workdir, "model")
    labels_path = cfg.path(workdir, "labels")
    subset = {
        "model": cfg.model_config().to_json(),
        "active": cfg.active_config(1).to_json() | {"budget": cfg.active_budget},
        "train_fraction": cfg.train_fraction,
    }
    stage_hash = _stage_hash([pretrained], subset)
    if labeler is None and _should_skip(workdir, "active-learn", stage_hash, [model_path, labels_path]):
        return False
    started = time.perf_counter()
    try:
        train_cases, _ = _load_split_cases(workdir, cfg)
        model = load_checkpoint(pretrained)
        if labeler is None:
            truths = load_truths(cfg.path(workdir, "ground_truth"))
            labeler = oracle_from_truths(truths, train_cases)
        store = LabelStore(labels_path)
        run_loop(train_cases, model, labeler, cfg.active_config(len(train_cases)), cfg.model_config(), store)
        # final supervised pass on the loop's labeled dataset
        apply_labels(train_cases, store)
        labeled = labeled_from_cases(train_cases, cfg.model_config().pseudo_weight)
        if labeled:
            final_cfg = dc_replace(
                cfg.model_config(), epochs=cfg.model_config().epochs * cfg.active_rounds
            )
            train_supervised(model, labeled, final_cfg)
        save_checkpoint(model, model_path)
    except Exception as exc:
        raise StageError("active-learn", exc) from exc
    _write_stamp(workdir, "active-learn", stage_hash)
    _record_timing(workdir, cfg, "active-learn", time.perf_counter() - started)
    return True


def stage_train(workdir: Path, cfg: PipelineConfig) -> bool:
    """Supervised training straight from the label store (no querying)."""
    started = time.perf_counter()
    try:
        train_cases, _ = _load_split_cases(workdir, cfg)
        model = load_checkpoint(cfg.path(workdir, "pretrained"))
        store = LabelStore(cfg.path(workdir, "labels"))
        apply_labels(train_cases, store)
        labeled = labeled_from_cases(train_cases, cfg.model_config().pseudo_weight)
        curve = train_supervised(model, labeled, cfg.model_config())
        save_checkpoint(model, cfg.path(workdir, "model"))
        render_loss_curve(curve, cfg.path(workdir, "figures") / "train_loss.png", "supervised loss")
    except Exception as exc:
        raise StageError("train", exc) from exc
    _record_timing(workdir, cfg, "train", time.perf_counter() - started)
    return True


def write_per_case_csv(report: EvalReport, predictions, path: Path) -> None:
    by_id = {p.case_id: p for p in predictions}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "rank", "top1", "top2", "top3", "top4", "top5"])
        for case_id, rank in report.per_case:
            top = [str(e) for e in by_id[case_id].top(5)]
            top += [""] * (5 - len(top))
            writer.writerow([case_id, rank, *top])


def stage_evaluate(workdir: Path, cfg: PipelineConfig) -> EvalReport:
    started = time.perf_counter()
    try:
        _, test_cases = _load_split_cases(workdir, cfg)
        model = load_checkpoint(cfg.path(workdir, "model"))
        truths = load_truths(cfg.path(workdir, "ground_truth"))
        truth_map = {t.case_id: t.root_cause for t in truths}
        fault_cases = [c for c in test_cases if c.case_id in truth_map]
        online_start = time.perf_counter()
        predictions = [score(model, c) for c in fault_cases]
        online_s = (time.perf_counter() - online_start) / max(1, len(fault_cases))
        timings_path = cfg.path(workdir, "timings")
        timings = json.loads(timings_path.read_text()) if timings_path.exists() else {}
        offline_s = sum(timings.values())
        report = build_report(predictions, truth_map, offline_s=offline_s, online_s=online_s)
        cfg.path(workdir, "report").write_text(dumps_canonical(report.to_json()) + "\n")
        write_per_case_csv(report, predictions, cfg.path(workdir, "per_case"))
        render_report_figures(report, cfg.path(workdir, "figures"))
    except StageError:
        raise
    except Exception as exc:
        raise StageError("evaluate", exc) from exc
    _record_timing(workdir, cfg, "evaluate", time.perf_counter() - started)
    return report


def run_pipeline(cfg: PipelineConfig, workdir: Path, labeler: Labeler | None = None) -> EvalReport:
    """Execute every stage in order; previously completed stages are skipped."""
    workdir = Path(workdir)
    telemetry = cfg.path(workdir, "telemetry")
    if not telemetry.exists():
        raise StageError("extract", FileNotFoundError(f"telemetry not found: {telemetry}"))
    stage_extract(workdir, cfg)
    stage_build_graphs(workdir, cfg)
    stage_pretrain(workdir, cfg)
    stage_active_learn(workdir, cfg, labeler)
    return stage_evaluate(workdir, cfg)


# ---------------------------------------------------------------------------
# in-memory experiment path (ablations, benchmarks)
# ---------------------------------------------------------------------------


def homogenize(case: HetGraphCase) -> HetGraphCase:
    """Collapse node types: one partition, zero-padded features, one relation."""
    s_count = len(case.services)
    dim = max(case.service_features.shape[1], case.host_features.shape[1])
    feats = np.zeros((case.n_nodes, dim))
    feats[:s_count, : case.service_features.shape[1]] = case.service_features
    feats[s_count:, : case.host_features.shape[1]] = case.host_features
    edges = list(case.e_ss)
    edges += [(a, s_count + b) for a, b in case.e_sh]
    edges += [(s_count + a, s_count + b) for a, b in case.e_hh]
    return HetGraphCase(
        case_id=case.case_id,
        window=case.window,
        services=tuple(case.node_ids()),
        hosts=(),
        e_ss=tuple(sorted(set(edges))),
        e_sh=(),
        e_hh=(),
        service_features=feats,
        host_features=np.zeros((0, dim)),
    )


def run_experiment(
    bundles: Sequence[TelemetryBundle],
    truths: Sequence[GroundTruth],
    cfg: PipelineConfig,
    variant: Variant = Variant.FULL,
) -> EvalReport:
    """Full pipeline in memory; the ablation switches mirror the variants."""
    offline_start = time.perf_counter()
    result = extract_features(bundles, cfg.extraction)
    snapshots = [b.topology for b in bundles]
    cases = assemble_cases(snapshots, result.features, result.windows)
    n_train = int(round(len(cases) * cfg.train_fraction))
    if variant is not Variant.NO_EDGE_REFINE:
        cases, _ = refine_edges(cases, cfg.gamma, train_count=n_train)
    if variant is Variant.HOMOGENEOUS:
        cases = [homogenize(c) for c in cases]

    train_cases, test_cases = chronological_split(cases, cfg.train_fraction)
    f_s = cases[0].service_features.shape[1]
    f_h = cases[0].host_features.shape[1]
    model = init_model(cfg.pretrain_config(), f_s, f_h)
    fit_feature_scales(model, train_cases)
    pretrain(model, train_cases, cfg.pretrain_config())

    truth_map = {t.case_id: t.root_cause for t in truths}
    labeler = oracle_from_truths(truths, train_cases)
    active_cfg = cfg.active_config(len(train_cases))

    if variant is Variant.RANDOM_LABELING:
        rng = np.random.default_rng(cfg.seed + 5)
        ids = [c.case_id for c in train_cases]
        chosen = rng.choice(len(ids), size=min(active_cfg.budget, len(ids)), replace=False)
        store = LabelStore()
        for i in chosen:
            case = train_cases[int(i)]
            store.add(
                LabelRecord(case.case_id, truth_map.get(case.case_id), Provenance.ORACLE, case.window.end)
            )
        apply_labels(train_cases, store)
        labeled = labeled_from_cases(train_cases, cfg.model_config().pseudo_weight)
        if labeled:
            # same final training effort as the full pipeline's closing pass
            flat_cfg = dc_replace(cfg.model_config(), epochs=cfg.model_config().epochs * cfg.active_rounds)
            train_supervised(model, labeled, flat_cfg)
    else:
        store = LabelStore()
        run_loop(train_cases, model, labeler, active_cfg, cfg.model_config(), store)
        apply_labels(train_cases, store)
        labeled = labeled_from_cases(train_cases, cfg.model_config().pseudo_weight)
        if labeled:
            final_cfg = dc_replace(cfg.model_config(), epochs=cfg.model_config().epochs * cfg.active_rounds)
            train_supervised(model, labeled, final_cfg)

    offline_s = time.perf_counter() - offline_start
    fault_cases = [c for c in test_cases if c.case_id in truth_map]
    online_start = time.perf_counter()
    predictions = [score(model, c) for c in fault_cases]
    online_s = (time.perf_counter() - online_start) / max(1, len(fault_cases))
    return build_report(predictions, truth_map, offline_s=offline_s, online_s=online_s)


def run_ablation(
    variant: Variant,
    bundles: Sequence[TelemetryBundle],
    truths: Sequence[GroundTruth],
    cfg: PipelineConfig,
) -> EvalReport:
    return run_experiment(bundles, truths, cfg, variant)
