"""Command-line entry point: every pipeline stage is a verb, all paths are
relative to --workdir, and identical inputs plus seed produce byte-identical
artifacts."""

from __future__ import annotations

import json
import threading
import time
from pathlib import Path

import click
import numpy as np

from .active import LabelStore, OracleLabeler, QueryPlan, apply_labels, cluster, embed_cases, plan_queries, suggest_eps
from .config import ConfigError, PipelineConfig, load_pipeline_config
from .core import dumps_canonical, read_bundles_jsonl
from .dataset import DatasetError, load_external_dataset
from .evaluation import Variant, build_report, chronological_split
from .graphs import load_cases
from .hgcn import load_checkpoint, score
from .pipeline import (
    StageError,
    load_truths,
    oracle_from_truths,
    run_experiment,
    run_pipeline,
    stage_active_learn,
    stage_build_graphs,
    stage_evaluate,
    stage_extract,
    stage_pretrain,
    stage_simulate,
    stage_train,
    write_per_case_csv,
)
from .plotting import render_ablation_chart, render_report_figures
from .server import AnnotationService, HttpHumanLabeler, RoundState, make_http_server
from .simulator import SimConfig, sample_scenario_mix, simulate


def _load_config(workdir: Path, config: str | None) -> PipelineConfig:
    if config is not None:
        return load_pipeline_config(Path(config))
    default = workdir / "pipeline.json"
    if default.exists():
        return load_pipeline_config(default)
    return PipelineConfig()


def _echo_stage(name: str, ran: bool) -> None:
    click.echo(f"[{name}] {'done' if ran else 'skipped (up to date)'}")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--workdir", type=click.Path(file_okay=False, path_type=Path), default=Path("."), show_default=True, help="Directory holding all artifacts.")
@click.pass_context
def main(ctx: click.Context, workdir: Path) -> None:
    """Root-cause localization over microservice telemetry."""
    ctx.ensure_object(dict)
    ctx.obj["workdir"] = workdir


@main.command("simulate")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.pass_context
def simulate_cmd(ctx: click.Context, config_path: str, out_dir: Path) -> None:
    """Generate telemetry plus ground truth from a simulation config."""
    obj = json.loads(Path(config_path).read_text())
    mix = obj.pop("mix", None)
    sim_cfg = SimConfig.from_json(obj)
    if mix is not None and not sim_cfg.faults:
        rng = np.random.default_rng(sim_cfg.seed)
        specs = sample_scenario_mix(tuple(mix), sim_cfg.n_windows, rng)
        sim_cfg = SimConfig.from_json({**obj, "faults": [s.to_json() for s in specs]})
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = PipelineConfig()
    written = stage_simulate(out_dir, cfg, sim_cfg)
    click.echo(f"wrote {written[0]} and {written[1]}")



@main.command()
@click.option("--telemetry", type=click.Path(path_type=Path), default=None, help="Telemetry JSONL (default: workdir layout).")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None, help="Feature output directory.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def extract(ctx: click.Context, telemetry: Path | None, out_dir: Path | None, config_path: str | None) -> None:
    """Turn raw telemetry into per-node event vectors."""
    workdir = ctx.obj["workdir"]
    cfg = _load_config(workdir, config_path)
    if telemetry is not None:
        if telemetry.is_dir():
            telemetry = telemetry / "telemetry.jsonl"
        cfg.paths["telemetry"] = str(telemetry)
    if out_dir is not None:
        cfg.paths["features"] = str(out_dir)
    _echo_stage("extract", stage_extract(workdir, cfg))


@main.command("build-graphs")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def build_graphs(ctx: click.Context, config_path: str | None) -> None:
    """Assemble and refine the per-window heterogeneous graphs."""
    workdir = ctx.obj["workdir"]
    cfg = _load_config(workdir, config_path)
    _echo_stage("build-graphs", stage_build_graphs(workdir, cfg))


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def pretrain(ctx: click.Context, config_path: str | None) -> None:
    """Self-supervised reconstruction pretraining."""
    workdir = ctx.obj["workdir"]
    cfg = _load_config(workdir, config_path)
    _echo_stage("pretrain", stage_pretrain(workdir, cfg))


@main.command("active-learn")
@click.option("--budget", type=float, default=None, help="Label budget (fraction < 1 or absolute count).")
@click.option("--rounds", type=int, default=None)
@click.option("--labeler", type=click.Choice(["oracle", "http"]), default="oracle", show_default=True)
@click.option("--port", type=int, default=8351, show_default=True, help="Port for --labeler http.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def active_learn(ctx: click.Context, budget: float | None, rounds: int | None, labeler: str, port: int, config_path: str | None) -> None:
    """Run the clustering / labeling / training loop."""
    workdir = ctx.obj["workdir"]
    cfg = _load_config(workdir, config_path)
    if budget is not None:
        cfg = PipelineConfig.from_json({**cfg.to_json(), "active_budget": budget})
    if rounds is not None:
        cfg = PipelineConfig.from_json({**cfg.to_json(), "active_rounds": rounds})
    chosen = None
    httpd = None
    if labeler == "http":
        store = LabelStore(cfg.path(workdir, "labels"))
        service = AnnotationService([], None, store)
        httpd = make_http_server(service, port=port)
        threading.Thread(target=httpd.serve_forever, daemon=True).start()
        click.echo(f"waiting for annotations on http://127.0.0.1:{port}")
        chosen = HttpHumanLabeler(service)
    try:
        _echo_stage("active-learn", stage_active_learn(workdir, cfg, chosen))
    finally:
        if httpd is not None:
            httpd.shutdown()


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def train(ctx: click.Context, config_path: str | None) -> None:
    """Supervised training from the current label store."""
    workdir = ctx.obj["workdir"]
    cfg = _load_config(workdir, config_path)
    _echo_stage("train", stage_train(workdir, cfg))


@main.command()
@click.option("--case", "case_id", required=True)
@click.option("--model", "model_path", type=click.Path(path_type=Path), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def localize(ctx: click.Context, case_id: str, model_path: Path | None, config_path: str | None) -> None:
    """Rank candidate root causes for one failure window."""
    workdir = ctx.obj["workdir"]
    cfg = _load_config(workdir, config_path)
    started = time.perf_counter()
    model = load_checkpoint(model_path or cfg.path(workdir, "model"))
    cases = {c.case_id: c for c in load_cases(cfg.path(workdir, "cases"))}
    if case_id not in cases:
        raise click.ClickException(f"unknown case: {case_id}")
    result = score(model, cases[case_id])
    elapsed = time.perf_counter() - started
    for rank, idx in enumerate(result.ranking[:5], start=1):
        click.echo(f"{rank}. {result.nodes[idx]}  p={result.scores[idx]:.4f}")
    out = workdir / f"localize-{case_id}.json"
    out.write_text(dumps_canonical(result.to_json()) + "\n")
    click.echo(f"({elapsed:.2f}s) wrote {out}")


@main.command()
@click.option("--cases", "cases_dir", type=click.Path(path_type=Path), default=None)
@click.option("--model", "model_path", type=click.Path(path_type=Path), default=None)
@click.option("--out", "out_path", type=click.Path(path_type=Path), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def evaluate(ctx: click.Context, cases_dir: Path | None, model_path: Path | None, out_path: Path | None, config_path: str | None) -> None:
    """Score the chronological test split and report Top-K accuracy."""
    workdir = ctx.obj["workdir"]
    cfg = _load_config(workdir, config_path)
    if cases_dir is not None:
        cfg.paths["cases"] = str(cases_dir)
    if model_path is not None:
        cfg.paths["model"] = str(model_path)
    if out_path is not None:
        cfg.paths["report"] = str(out_path)
    report = stage_evaluate(workdir, cfg)
    click.echo(
        f"A@1={report.a_at[1]:.3f} A@3={report.a_at[3]:.3f} A@5={report.a_at[5]:.3f} "
        f"AvgA@5={report.avg_a5:.3f} over {len(report.per_case)} cases"
    )


@main.command()
@click.option("--variants", default="full,no_edge_refine,random_labeling,homogeneous", show_default=True)
@click.option("--out", "out_path", type=click.Path(path_type=Path), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def ablate(ctx: click.Context, variants: str, out_path: Path | None, config_path: str | None) -> None:
    """Run ablation variants on the workdir's telemetry and compare."""
    workdir = ctx.obj["workdir"]
    cfg = _load_config(workdir, config_path)
    bundles = read_bundles_jsonl(cfg.path(workdir, "telemetry"))
    truths = load_truths(cfg.path(workdir, "ground_truth"))
    reports = {}
    for name in variants.split(","):
        variant = Variant(name.strip())
        reports[variant.value] = run_experiment(bundles, truths, cfg, variant)
        rep = reports[variant.value]
        click.echo(f"{variant.value}: A@1={rep.a_at[1]:.3f} AvgA@5={rep.avg_a5:.3f}")
    out = out_path or (workdir / "ablation_report.json")
    out.write_text(
        dumps_canonical({name: rep.to_json() for name, rep in reports.items()}) + "\n"
    )
    render_ablation_chart(reports, cfg.path(workdir, "figures") / "ablation.png")
    click.echo(f"wrote {out}")


@main.command()
@click.option("--port", type=int, default=8351, show_default=True)
@click.option("--ui-dir", type=click.Path(path_type=Path), default=None, help="Static frontend bundle to serve.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def serve(ctx: click.Context, port: int, ui_dir: Path | None, config_path: str | None) -> None:
    """Serve the annotation API (and optionally the web UI) for a round."""
    workdir = ctx.obj["workdir"]
    cfg = _load_config(workdir, config_path)
    cases = load_cases(cfg.path(workdir, "cases"))
    train_cases, _ = chronological_split(cases, cfg.train_fraction)
    store = LabelStore(cfg.path(workdir, "labels"))
    model = None
    model_path = cfg.path(workdir, "model")
    pretrained_path = cfg.path(workdir, "pretrained")
    if model_path.exists():
        model = load_checkpoint(model_path)
    elif pretrained_path.exists():
        model = load_checkpoint(pretrained_path)
    round_path = cfg.path(workdir, "round")
    if round_path.exists():
        state = RoundState.from_json(json.loads(round_path.read_text()))
        plan = state.plan
    else:
        if model is None:
            raise click.ClickException("no checkpoint found; run pretrain first")
        embeddings = embed_cases(model, train_cases)
        eps = cfg.embed_eps if cfg.embed_eps is not None else suggest_eps(embeddings, cfg.embed_min_pts)
        assignment = cluster(embeddings, eps, cfg.embed_min_pts)
        answered = {c.case_id for c in train_cases if store.trusted(c.case_id) is not None}
        budget = max(cfg.resolve_budget(len(train_cases)) - len(answered), len(assignment.medoids))
        plan = plan_queries(assignment, embeddings, budget, cfg.k_boundary, skip=answered)
        round_path.write_text(dumps_canonical(RoundState(plan).to_json()) + "\n")
    space = None
    space_path = cfg.path(workdir, "features") / "space.json"
    if space_path.exists():
        from .events import FeatureSpace

        space = FeatureSpace.from_json(json.loads(space_path.read_text()))
    service = AnnotationService(train_cases, plan, store, model=model, space=space)
    httpd = make_http_server(service, port=port, ui_dir=ui_dir)
    click.echo(f"annotation API on http://127.0.0.1:{httpd.server_address[1]}  (Ctrl-C to stop)")
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        httpd.shutdown()


@main.command("load-dataset")
@click.option("--path", "data_dir", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--mapping", "mapping_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(path_type=Path), default=None)
@click.pass_context
def load_dataset(ctx: click.Context, data_dir: Path, mapping_path: str, out_path: Path | None) -> None:
    """Normalize an external CSV/JSONL dataset into telemetry JSONL."""
    workdir = ctx.obj["workdir"]
    mapping = json.loads(Path(mapping_path).read_text())
    bundles, report = load_external_dataset(data_dir, mapping)
    out = out_path or (workdir / "telemetry.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for bundle in bundles:
            fh.write(dumps_canonical(bundle.to_json()) + "\n")
    services = {e.name for b in bundles for e in b.topology.services}
    hosts = {e.name for b in bundles for e in b.topology.hosts}
    click.echo(
        f"{len(bundles)} windows, {len(services)} services, {len(hosts)} hosts -> {out}"
    )
    if report.failed:
        click.echo(f"{len(report.failed)} rows failed ({report.failure_rate():.1%})")
    if report.unmapped_columns:
        click.echo(f"unmapped columns: {', '.join(report.unmapped_columns)}")


@main.command("run-pipeline")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def run_pipeline_cmd(ctx: click.Context, config_path: str | None) -> None:
    """Execute extract -> build-graphs -> pretrain -> active-learn -> evaluate."""
    workdir = ctx.obj["workdir"]
    cfg = _load_config(workdir, config_path)
    report = run_pipeline(cfg, workdir)
    click.echo(
        f"A@1={report.a_at[1]:.3f} A@3={report.a_at[3]:.3f} A@5={report.a_at[5]:.3f} "
        f"AvgA@5={report.avg_a5:.3f}"
    )


def entry() -> None:
    try:
        main(obj={})
    except StageError as exc:
        raise SystemExit(f"error: {exc}")
    except (ConfigError, DatasetError) as exc:
        raise SystemExit(f"error: {exc}")


if __name__ == "__main__":
    entry()
