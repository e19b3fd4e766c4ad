"""Operator CLI: ingest guidelines, generate items, serve reviews, run
evaluations, and diff guideline versions.

Exit codes are stable for CI composition:
    0 success, 1 data error, 2 I/O error, 3 backend error, 4 service error.

Config files are YAML with ``${ENV_VAR}`` interpolation; flags override
file values.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import re
import socket
import sys
from pathlib import Path

import click
import yaml

from . import corpus, generation, metrics, review, scenario
from .errors import (
    BackendError,
    ConfigurationError,
    EmptyInputError,
    GuidebenchError,
    StructuralError,
)
from .harness import (
    CompletionBackend,
    adapter_from_config,
    run_bias_session,
    run_decision_session,
    run_geo_query,
    run_needle_query,
    run_reverse_session,
    save_transcript,
)
from .review_service import create_app, tokens_from_env
from .vocabulary import Vocabulary

EXIT_OK = 0
EXIT_DATA = 1
EXIT_IO = 2
EXIT_BACKEND = 3
EXIT_SERVICE = 4

_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")

KNOWN_SCENARIO_FILES = {"decision", "needle", "reverse", "geo", "bias"}
METRIC_CHOICES = ("decision", "needle", "reverse", "geo", "cbst")


def load_config(path: str | Path) -> dict:
    """YAML config with ${ENV_VAR} interpolation in string values."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}

    def interp(value):
        if isinstance(value, str):
            return _ENV_RE.sub(lambda m: os.environ.get(m.group(1), ""), value)
        if isinstance(value, dict):
            return {k: interp(v) for k, v in value.items()}
        if isinstance(value, list):
            return [interp(v) for v in value]
        return value

    return interp(raw)


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
def main():
    """Guideline-grounded benchmark forge and evaluation harness."""


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------


@main.command()
@click.argument("doc_path", type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path(), help="chunk store JSONL to write")
@click.option("--doc-id", default="guideline", show_default=True)
@click.option("--max-words", default=corpus.DEFAULT_MAX_WORDS, show_default=True, type=int)
@click.option("--min-words", default=corpus.DEFAULT_MIN_WORDS, show_default=True, type=int)
def ingest(doc_path, out_path, doc_id, max_words, min_words):
    """Chunk a marker-format guideline document into a chunk store."""
    path = Path(doc_path)
    if not path.exists():
        _fail(EXIT_IO, f"document not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
        chunks = corpus.chunk_document(text, doc_id, max_words=max_words, min_words=min_words)
        distribution = corpus.part_distribution(chunks)
        corpus.save_chunks(chunks, out_path)
    except (StructuralError, EmptyInputError, ValueError) as exc:
        _fail(EXIT_DATA, str(exc))
    click.echo(f"chunks: {len(chunks)}")
    for part in sorted(distribution):
        click.echo(f"  {part}: {distribution[part]:.4f}")


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


@main.command()
@click.option("--chunks", "chunks_path", required=True, type=click.Path())
@click.option("--backend", "backend_path", required=True, type=click.Path(), help="backend config YAML")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--per-chunk", default=1, show_default=True, type=int)
@click.option("--total-cap", default=None, type=int, help="proportional quota cap across parts")
@click.option("--guideline-version", default="unversioned", show_default=True)
@click.option("--temperature", default=0.0, show_default=True, type=float)
@click.option("--parallelism", default=1, show_default=True, type=int,
              help="concurrent backend calls; keep 1 for sequential scripted mocks")
def generate(chunks_path, backend_path, out_path, per_chunk, total_cap, guideline_version, temperature, parallelism):
    """Generate audited MCQ items from a chunk store via a text backend."""
    if not Path(chunks_path).exists():
        _fail(EXIT_IO, f"chunk store not found: {chunks_path}")
    if not Path(backend_path).exists():
        _fail(EXIT_IO, f"backend config not found: {backend_path}")
    chunks = corpus.load_chunks(chunks_path)
    if not chunks:
        _fail(EXIT_DATA, "chunk store is empty")

    if total_cap is not None and total_cap == 0:
        generation.save_items([], out_path)
        click.echo("warning: total cap 0 retains no items", err=True)
        click.echo("items: 0")
        return

    try:
        adapter = adapter_from_config(load_config(backend_path))
        backend = CompletionBackend(adapter, temperature=temperature)
    except (ConfigurationError, FileNotFoundError, KeyError) as exc:
        _fail(EXIT_DATA, f"bad backend config: {exc}")

    caps = {}
    if total_cap is not None:
        distribution = corpus.part_distribution(chunks)
        caps = {part: math.ceil(frac * total_cap) for part, frac in distribution.items()}
    config = generation.GenerationConfig(
        n_per_chunk=per_chunk, temperature=temperature, quota_caps=caps
    )

    try:
        report = generation.generate_batch(
            chunks, backend, config, guideline_version, parallelism=max(1, parallelism)
        )
    except BackendError as exc:
        _fail(EXIT_BACKEND, str(exc))
    generation.save_items(report.items, out_path)
    for diag in report.diagnostics:
        click.echo(f"diagnostic: {diag}", err=True)
    click.echo(f"items: {len(report.items)}")


# ---------------------------------------------------------------------------
# review-serve
# ---------------------------------------------------------------------------


@main.command("review-serve")
@click.option("--items", "items_path", required=True, type=click.Path())
@click.option("--distractors", "distractors_path", default=None, type=click.Path())
@click.option("--reviewers", "reviewers_path", required=True, type=click.Path(), help="JSON list of reviewer ids")
@click.option("--port", default=8000, show_default=True, type=int)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--redundancy", default=2, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--store-dir", default=None, type=click.Path(), help="append-only score log directory")
def review_serve(items_path, distractors_path, reviewers_path, port, host, redundancy, seed, store_dir):
    """Serve the blinded review HTTP API until interrupted."""
    for label, p in (("items", items_path), ("reviewers", reviewers_path)):
        if not Path(p).exists():
            _fail(EXIT_IO, f"{label} file not found: {p}")
    if distractors_path and not Path(distractors_path).exists():
        _fail(EXIT_IO, f"distractors file not found: {distractors_path}")

    items = generation.load_items(items_path)
    distractors = generation.load_items(distractors_path) if distractors_path else []
    with open(reviewers_path, "r", encoding="utf-8") as fh:
        reviewers = json.load(fh)

    try:
        assignments = review.assign_blinded(items, distractors, reviewers, redundancy, seed)
    except ConfigurationError as exc:
        _fail(EXIT_DATA, str(exc))

    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((host, port))
    except OSError:
        _fail(EXIT_SERVICE, f"port {port} is already in use")
    finally:
        probe.close()

    by_id = {it.item_id: it for it in items + distractors}
    store = review.ReviewStore(assignments, by_id, redundancy, store_dir)
    reviewer_tokens, admin_token = tokens_from_env()
    app = create_app(store, reviewer_tokens, admin_token)

    import uvicorn

    click.echo(f"serving review API on {host}:{port} ({len(assignments)} assignments)")
    uvicorn.run(app, host=host, port=port, log_level="warning")


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _counter_clock():
    counter = itertools.count()
    return lambda: float(next(counter))


def _load_jsonl(path: Path) -> list[dict]:
    return [json.loads(l) for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]


def bundled_scenarios_dir() -> Path:
    from importlib import resources

    with resources.as_file(resources.files("guidebench.data").joinpath("scenarios")) as p:
        return Path(p)


@main.command()
@click.option("--config", "config_path", default=None, type=click.Path(),
              help="run config YAML; command-line flags override its values")
@click.option("--scenarios", "scenarios_dir", default=None, type=click.Path())
@click.option("--model", "model_path", default=None, type=click.Path(), help="model adapter config YAML")
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option("--metrics", "metrics_arg", default=None,
              help="comma list of decision,needle,reverse,geo,cbst [default: all]")
@click.option("--seed", default=None, type=int, help="[default: 0]")
@click.option("--resamples", default=None, type=int, help="[default: 1000]")
@click.option("--tau", default=None, type=float, help="match/detection similarity threshold [default: 0.75]")
def evaluate(config_path, scenarios_dir, model_path, out_dir, metrics_arg, seed, resamples, tau):
    """Run scenario sessions against a model and score the transcripts."""
    run_config = {}
    if config_path:
        if not Path(config_path).exists():
            _fail(EXIT_IO, f"run config not found: {config_path}")
        run_config = load_config(config_path)

    def resolved(flag, key, default):
        return flag if flag is not None else run_config.get(key, default)

    scenarios_dir = resolved(scenarios_dir, "scenarios", None)
    model_path = resolved(model_path, "model", None)
    out_dir = resolved(out_dir, "out", None)
    metrics_arg = resolved(metrics_arg, "metrics", "all")
    seed = resolved(seed, "seed", 0)
    resamples = resolved(resamples, "resamples", 1000)
    tau = resolved(tau, "tau", 0.75)
    for label, value in (("--scenarios", scenarios_dir), ("--model", model_path), ("--out", out_dir)):
        if value is None:
            _fail(EXIT_DATA, f"{label} is required (flag or run config)")

    weight_overrides = {}
    for metric_name, expected in (
        ("reverse", metrics.REVERSE_WEIGHTS),
        ("cas", metrics.CAS_WEIGHTS),
        ("cbst", metrics.CBST_WEIGHTS),
    ):
        override = run_config.get("weights", {}).get(metric_name)
        if override is not None:
            try:
                weight_overrides[metric_name] = metrics.check_weights(override, expected)
            except ValueError as exc:
                _fail(EXIT_DATA, f"bad {metric_name} weight override: {exc}")

    scenarios_path = Path(scenarios_dir)
    if not scenarios_path.exists():
        _fail(EXIT_IO, f"scenario directory not found: {scenarios_path}")
    if not Path(model_path).exists():
        _fail(EXIT_IO, f"model config not found: {model_path}")

    unknown = [
        p.name for p in scenarios_path.glob("*.jsonl") if p.stem not in KNOWN_SCENARIO_FILES
    ]
    if unknown:
        _fail(EXIT_DATA, f"unknown scenario kind in directory: {', '.join(sorted(unknown))}")

    if metrics_arg.strip() == "all":
        selected = list(METRIC_CHOICES)
    else:
        selected = [m.strip() for m in metrics_arg.split(",") if m.strip()]
        bad = [m for m in selected if m not in METRIC_CHOICES]
        if bad:
            _fail(EXIT_DATA, f"unknown metric selection: {', '.join(bad)}")

    try:
        model = adapter_from_config(load_config(model_path))
    except (ConfigurationError, FileNotFoundError, KeyError) as exc:
        _fail(EXIT_DATA, f"bad model config: {exc}")

    out = Path(out_dir)
    transcripts_dir = out / "transcripts"
    transcripts_dir.mkdir(parents=True, exist_ok=True)
    clock = _counter_clock()
    vocab = Vocabulary.load()
    sections: dict[str, metrics.MetricSection] = {}

    def aggregate_scores(values):
        return metrics.bootstrap_ci(values, resamples=resamples, level=0.95, seed=seed)

    def emit(transcript):
        save_transcript(transcript, transcripts_dir / f"{transcript.transcript_id}.jsonl")

    try:
        if "decision" in selected and (scenarios_path / "decision.jsonl").exists():
            cases = []
            for record in _load_jsonl(scenarios_path / "decision.jsonl"):
                vignette = scenario.vignette_from_json(record)
                transcript = run_decision_session(vignette, model, clock=clock, tau=tau)
                emit(transcript)
                result = metrics.score_decision_points(transcript, vignette)
                cases.append(
                    {
                        "case_id": vignette.vignette_id,
                        "n_asked": result.n_asked,
                        "n_critical": result.n_critical,
                        "n_asked_critical": result.n_asked_critical,
                        "precision": result.precision,
                        "recall": result.recall,
                        "f": result.f,
                        "score10": result.score10,
                        "termination": transcript.termination,
                    }
                )
            if cases:
                sections["decision_points"] = metrics.MetricSection(
                    cases, aggregate_scores([c["score10"] for c in cases])
                )

        if "needle" in selected and (scenarios_path / "needle.jsonl").exists():
            cases = []
            for record in _load_jsonl(scenarios_path / "needle.jsonl"):
                case = scenario.needle_from_json(record)
                transcript = run_needle_query(case, model, clock=clock)
                emit(transcript)
                result = metrics.score_needle(transcript, case, vocab, tau=tau)
                cases.append(
                    {
                        "case_id": case.case_id,
                        "clue_detected": result.clue_detected,
                        "correct_diagnosis": result.correct_diagnosis,
                        "score": result.score,
                    }
                )
            if cases:
                sections["needle"] = metrics.MetricSection(
                    cases, aggregate_scores([c["score"] for c in cases])
                )

        if "reverse" in selected and (scenarios_path / "reverse.jsonl").exists():
            cases = []
            for record in _load_jsonl(scenarios_path / "reverse.jsonl"):
                persona = scenario.persona_from_json(record["persona"])
                transcript = run_reverse_session(persona, record["script"], model, clock=clock)
                emit(transcript)
                result = metrics.score_reverse(
                    transcript, persona, weights=weight_overrides.get("reverse")
                )
                cases.append(
                    {
                        "case_id": persona.persona_id,
                        "consistency": result.consistency,
                        "completeness": result.completeness,
                        "style_realism": result.style_realism,
                        "linguistic": result.linguistic,
                        "composite10": result.composite10,
                        "contradiction_gate": result.contradiction_gate,
                        "completeness_gate": result.completeness_gate,
                    }
                )
            if cases:
                sections["reverse"] = metrics.MetricSection(
                    cases, aggregate_scores([c["composite10"] for c in cases])
                )

        if "geo" in selected and (scenarios_path / "geo.jsonl").exists():
            cases = []
            pair_rows = []
            for record in _load_jsonl(scenarios_path / "geo.jsonl"):
                pair = scenario.geo_pair_from_json(record)
                sides = {}
                for tag, side in (("a", pair.scenario_a), ("b", pair.scenario_b)):
                    session_id = f"t-geo-{pair.pair_id}-{side.locale.replace(' ', '_')}"
                    answer, transcript = run_geo_query(
                        side, model, vocab, clock=clock, session_id=session_id
                    )
                    emit(transcript)
                    result = metrics.score_cas(
                        answer, side.answer_key, vocab, weights=weight_overrides.get("cas")
                    )
                    sides[tag] = (answer, result, side.answer_key)
                    cases.append(
                        {
                            "case_id": f"{pair.pair_id}/{side.locale}",
                            "antigen_accuracy": result.antigen_accuracy,
                            "formulation_fit": result.formulation_fit,
                            "resource_alignment": result.resource_alignment,
                            "rationale_localization": result.rationale_localization,
                            "cas10": result.cas10,
                            "extraction": answer.extraction,
                        }
                    )
                answer_a, result_a, key_a = sides["a"]
                answer_b, result_b, key_b = sides["b"]
                delta = metrics.delta_cas(result_a, result_b, answer_a, answer_b, key_a, key_b, vocab)
                pair_rows.append({"pair_id": pair.pair_id, "delta_cas": delta})
            if cases:
                sections["cas"] = metrics.MetricSection(
                    cases,
                    aggregate_scores([c["cas10"] for c in cases]),
                    extras={"pairs": pair_rows},
                )

        if "cbst" in selected and (scenarios_path / "bias.jsonl").exists():
            cases = []
            results = []
            for record in _load_jsonl(scenarios_path / "bias.jsonl"):
                case = scenario.bias_from_json(record)
                transcript = run_bias_session(case, model, clock=clock)
                emit(transcript)
                result = metrics.score_cbst(
                    transcript, case, vocab, tau=tau, weights=weight_overrides.get("cbst")
                )
                results.append(result)
                cases.append(
                    {
                        "case_id": case.case_id,
                        "bias_type": case.bias_type,
                        "anchor_flexibility": result.anchor_flexibility,
                        "contradiction_recognition": result.contradiction_recognition,
                        "breadth": result.breadth,
                        "action_appropriateness": result.action_appropriateness,
                        "cbst10": result.cbst10,
                    }
                )
            if cases:
                sections["cbst"] = metrics.MetricSection(
                    cases,
                    aggregate_scores([c["cbst10"] for c in cases]),
                    extras={"bsi": metrics.bsi(results)},
                )
    except BackendError as exc:
        _fail(EXIT_BACKEND, str(exc))
    except (ValueError, KeyError, GuidebenchError) as exc:
        _fail(EXIT_DATA, f"scenario data error: {exc}")

    if not sections:
        _fail(EXIT_DATA, "no scenarios matched the metric selection")

    config_extras = {}
    if tau != 0.75:
        config_extras["tau"] = tau
    if weight_overrides:
        config_extras["weights"] = weight_overrides
    report = metrics.assemble_report(
        sections, seed=seed, resamples=resamples, config_extras=config_extras
    )
    metrics.save_report(report, out / "report.json")
    (out / "report.md").write_text(metrics.report_markdown(report), encoding="utf-8")
    (out / "cases.csv").write_text(metrics.report_csv(report), encoding="utf-8")
    click.echo(f"report written to {out / 'report.json'}")
    for name, section in report["metrics"].items():
        stat = section.get("aggregate")
        if stat:
            click.echo(f"  {name}: mean {stat['mean']:.3f} over {stat['n']} case(s)")


# ---------------------------------------------------------------------------
# diff-guideline
# ---------------------------------------------------------------------------


@main.command("diff-guideline")
@click.option("--old", "old_path", required=True, type=click.Path())
@click.option("--new", "new_path", required=True, type=click.Path())
@click.option("--items", "items_path", default=None, type=click.Path())
@click.option("--out", "out_path", default=None, type=click.Path(), help="write the ChangeSet JSON here")
def diff_guideline(old_path, new_path, items_path, out_path):
    """Diff two chunk stores and flag items whose citations went stale."""
    for label, p in (("old", old_path), ("new", new_path)):
        if not Path(p).exists():
            _fail(EXIT_IO, f"{label} chunk store not found: {p}")
    old = corpus.load_chunks(old_path)
    new = corpus.load_chunks(new_path)
    changes = corpus.diff_versions(old, new)

    stale_ids = []
    if items_path:
        if not Path(items_path).exists():
            _fail(EXIT_IO, f"items file not found: {items_path}")
        items = generation.load_items(items_path)
        marked = generation.mark_stale(items, changes)
        stale_ids = [it.item_id for it in marked if it.status == "stale"]
        changes.affected_items = stale_ids

    payload = {
        "added": changes.added,
        "removed": changes.removed,
        "modified": [list(pair) for pair in changes.modified],
        "affected_items": changes.affected_items,
    }
    if out_path:
        Path(out_path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    if changes.is_empty():
        click.echo("no changes")
    else:
        click.echo(
            f"added: {len(changes.added)}, removed: {len(changes.removed)}, "
            f"modified: {len(changes.modified)}, stale items: {len(stale_ids)}"
        )
        for item_id in stale_ids:
            click.echo(f"  stale: {item_id}")


if __name__ == "__main__":
    main()
