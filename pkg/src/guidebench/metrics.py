"""Deterministic scorers for the five evaluation tracks, plus bootstrap
aggregation and report assembly.

Every scorer is a pure function of (transcript/answer, scenario, config):
no hidden state, no network. Composite weights are asserted to sum to 1
at import time. Reports never collapse the five tracks into one scalar.
"""

from __future__ import annotations

import csv
import io
import json
import re

import numpy as np

from dataclasses import dataclass, field

from .errors import EmptyInputError
from .harness import GeoAnswer, Transcript
from .retrieval import BuiltinEmbedder, cosine
from .scenario import BiasCase, DecisionVignette, GeoAnswerKey, NeedleCase, PersonaSheet
from .text import clamp01, jaccard, phrase_in_text, sentences, tokenize
from .vocabulary import Vocabulary

DETECT_TAU = 0.75

REVERSE_WEIGHTS = {"consistency": 0.4, "completeness": 0.3, "style_realism": 0.2, "linguistic": 0.1}
CAS_WEIGHTS = {"antigen": 0.35, "formulation": 0.25, "resource": 0.25, "rationale": 0.15}
CBST_WEIGHTS = {"flex": 0.40, "contradiction": 0.25, "breadth": 0.20, "action": 0.15}

for _name, _weights in (("reverse", REVERSE_WEIGHTS), ("cas", CAS_WEIGHTS), ("cbst", CBST_WEIGHTS)):
    assert abs(sum(_weights.values()) - 1.0) < 1e-12, f"{_name} weights must sum to 1"


def check_weights(weights: dict[str, float], expected_keys) -> dict[str, float]:
    """Validate a composite weight vector: exact keys, sums to 1 +- 1e-9."""
    if set(weights) != set(expected_keys):
        raise ValueError(
            f"weight keys {sorted(weights)} do not match {sorted(expected_keys)}"
        )
    total = sum(weights.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"weights sum to {total}, expected 1.0")
    return dict(weights)


# ---------------------------------------------------------------------------
# Result types
# ---------------------------------------------------------------------------


@dataclass
class DecisionPointResult:
    n_asked: int
    n_critical: int
    n_asked_critical: int
    precision: float
    recall: float
    f: float
    score10: float


@dataclass
class NeedleResult:
    clue_detected: bool
    correct_diagnosis: bool
    score: float


@dataclass
class ReverseResult:
    consistency: float
    completeness: float
    style_realism: float
    linguistic: float
    composite10: float
    contradiction_gate: bool = True  # <= 1 contradiction across turns
    completeness_gate: bool = True  # >= 90% of asked facts disclosed


@dataclass
class CasResult:
    antigen_accuracy: float
    formulation_fit: float
    resource_alignment: float
    rationale_localization: float
    cas10: float
    paired_delta: float | None = None


@dataclass
class CbstResult:
    anchor_flexibility: int
    contradiction_recognition: int
    breadth: float
    action_appropriateness: float
    cbst10: float


@dataclass
class AggregateStat:
    mean: float
    ci_low: float
    ci_high: float
    n: int
    resamples: int
    level: float = 0.95


# ---------------------------------------------------------------------------
# Decision points
# ---------------------------------------------------------------------------


def score_decision_points(transcript: Transcript, vignette: DecisionVignette) -> DecisionPointResult:
    """Precision/recall/F over hidden-node queries before the final answer.

    N_asked counts distinct matched nodes plus every model query that
    matched nothing new (superfluous questions must drag precision down).
    A session that answers without asking scores 0 by convention.
    """
    if transcript.scenario_kind != "decision":
        raise ValueError(f"expected a decision transcript, got {transcript.scenario_kind}")

    critical_ids = {n.node_id for n in vignette.hidden_nodes if n.critical}
    model_turns = transcript.model_turns()
    query_turns = model_turns
    if transcript.final is not None and transcript.final.from_marker and model_turns:
        # the marked FINAL turn is the answer, not a query
        query_turns = model_turns[:-1]

    matched: set[str] = set()
    unmatched_queries = 0
    for turn in query_turns:
        new_ids = set(turn.matched_node_ids)
        if new_ids:
            matched.update(new_ids)
        else:
            unmatched_queries += 1

    n_asked = len(matched) + unmatched_queries
    n_asked_critical = len(matched & critical_ids)
    n_critical = len(critical_ids)

    precision = n_asked_critical / n_asked if n_asked else 0.0
    recall = n_asked_critical / n_critical if n_critical else 0.0
    f = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
    return DecisionPointResult(
        n_asked=n_asked,
        n_critical=n_critical,
        n_asked_critical=n_asked_critical,
        precision=precision,
        recall=recall,
        f=f,
        score10=10.0 * f,
    )


# ---------------------------------------------------------------------------
# Needle-in-the-haystack
# ---------------------------------------------------------------------------


def detect_clue(response_text: str, needle, embedder: BuiltinEmbedder | None = None, tau: float = DETECT_TAU) -> bool:
    """Explicit clue mention or downstream implication in the response.

    Regex patterns first, then implication terms, then sentence-level
    embedding similarity against the clue text.
    """
    for pattern in needle.patterns:
        if re.search(pattern, response_text, re.IGNORECASE):
            return True
    for term in needle.implication_terms:
        if phrase_in_text(term, response_text):
            return True
    if embedder is None:
        embedder = BuiltinEmbedder()
    if not tokenize(needle.clue_text):
        return False
    clue_vec = embedder.embed(needle.clue_text)
    for sentence in sentences(response_text):
        if not tokenize(sentence):
            continue
        if cosine(embedder.embed(sentence), clue_vec) >= tau:
            return True
    return False


def score_needle(
    transcript: Transcript,
    case: NeedleCase,
    vocab: Vocabulary | None = None,
    embedder: BuiltinEmbedder | None = None,
    tau: float = DETECT_TAU,
) -> NeedleResult:
    """Clue detection x diagnosis correctness, graded 0 / 0.5 / 1."""
    if transcript.final is None:
        raise ValueError("transcript has no final answer")
    if vocab is None:
        vocab = Vocabulary.load()

    clue = detect_clue(transcript.all_model_text(), case.needle, embedder, tau)

    target = vocab.canonical(case.target_disease)
    top3 = [vocab.canonical(d) for d in transcript.final.diagnoses[:3]]
    in_top3 = target in top3
    plan = transcript.final.plan
    plan_ok = all(phrase_in_text(el, plan) for el in case.management_key.required_elements)
    correct = in_top3 and plan_ok

    score = 1.0 if (clue and correct) else 0.5 if (clue or correct) else 0.0
    return NeedleResult(clue_detected=clue, correct_diagnosis=correct, score=score)


# ---------------------------------------------------------------------------
# Reverse QA persona
# ---------------------------------------------------------------------------

AFFECT_REFERENCES = {
    "worried": (
        "I am really worried about my child, please help us, I fear it is "
        "getting worse and I do not know what to do."
    ),
    "hesitant": (
        "I am not so sure, maybe it started some days ago, I cannot say "
        "exactly, perhaps it was like that."
    ),
    "relieved": (
        "Thank you, I feel much better now, the child is improving and I am "
        "grateful for the care we received."
    ),
}


def score_reverse(
    transcript: Transcript,
    persona: PersonaSheet,
    embedder: BuiltinEmbedder | None = None,
    weights: dict[str, float] | None = None,
) -> ReverseResult:
    """Weighted persona-fidelity composite over a scripted interview."""
    if transcript.scenario_kind != "reverse":
        raise ValueError(f"expected a reverse transcript, got {transcript.scenario_kind}")
    if embedder is None:
        embedder = BuiltinEmbedder()
    w = check_weights(weights, REVERSE_WEIGHTS) if weights else REVERSE_WEIGHTS

    questions = [t for t in transcript.turns if t.role == "harness"]
    answers = [t for t in transcript.turns if t.role == "model"]
    n_questions = len(questions)

    contradictions = sum(
        1 for t in answers for e in t.events if e.startswith("contradiction:")
    )
    consistency = max(0.0, 1.0 - contradictions / n_questions) if n_questions else 0.0

    asked_fact_ids = {fid for t in questions for fid in t.fact_ids}
    disclosed = {
        fid
        for t in answers
        for fid in t.fact_ids
        if f"contradiction:{fid}" not in t.events
    }
    disclosed &= asked_fact_ids
    completeness = len(disclosed) / len(asked_fact_ids) if asked_fact_ids else 0.0

    answer_vecs = [
        embedder.embed(t.text) for t in answers if tokenize(t.text)
    ]
    if answer_vecs:
        mean_vec = np.mean(answer_vecs, axis=0)
        norm = np.linalg.norm(mean_vec)
        reference = AFFECT_REFERENCES.get(persona.affect, AFFECT_REFERENCES["worried"])
        style = clamp01(cosine(mean_vec / norm, embedder.embed(reference))) if norm > 0 else 0.0
    else:
        style = 0.0

    # Linguistic appropriateness: required locale phrase present when its
    # topic was asked; vacuously appropriate when no phrase topic came up.
    relevant = [
        p for p in persona.locale_phrases if p.fact_id is None or p.fact_id in asked_fact_ids
    ]
    if not relevant:
        linguistic = 1.0
    else:
        all_answers = " ".join(t.text for t in answers).lower()
        linguistic = 0.0
        for phrase in relevant:
            for variant in [phrase.text] + phrase.variants:
                if variant.lower() in all_answers:
                    linguistic = 1.0
                    break
            if linguistic:
                break

    composite = 10.0 * (
        w["consistency"] * consistency
        + w["completeness"] * completeness
        + w["style_realism"] * style
        + w["linguistic"] * linguistic
    )
    return ReverseResult(
        consistency=consistency,
        completeness=completeness,
        style_realism=style,
        linguistic=linguistic,
        composite10=composite,
        contradiction_gate=contradictions <= 1,
        completeness_gate=completeness >= 0.90,
    )


# ---------------------------------------------------------------------------
# Geographic context adaptation
# ---------------------------------------------------------------------------


def _parse_constraint(constraint: str) -> tuple[str, str, list[str]]:
    """'description::forbid=a|b' -> (description, mode, terms)."""
    if "::" in constraint:
        description, rule = constraint.split("::", 1)
        if "=" in rule:
            mode, terms = rule.split("=", 1)
            return description.strip(), mode.strip(), [t.strip() for t in terms.split("|") if t.strip()]
    return constraint.strip(), "", []


def constraint_respected(constraint: str, text: str) -> bool:
    """Keyword rule per constraint: forbid terms must be absent, require
    terms need at least one mention. Ruleless constraints count as
    respected only if their description terms are not violated (no-op)."""
    _, mode, terms = _parse_constraint(constraint)
    lowered = text.lower()
    if mode == "forbid":
        return not any(t.lower() in lowered for t in terms)
    if mode == "require":
        return any(t.lower() in lowered for t in terms)
    return True


def score_cas(
    answer: GeoAnswer,
    key: GeoAnswerKey,
    vocab: Vocabulary | None = None,
    weights: dict[str, float] | None = None,
) -> CasResult:
    """Locale-fit composite: antigen Jaccard, formulation, resources, rationale."""
    if vocab is None:
        vocab = Vocabulary.load()
    w = check_weights(weights, CAS_WEIGHTS) if weights else CAS_WEIGHTS

    pred = {vocab.canonical(a) for a in answer.antigens}
    req = {vocab.canonical(a) for a in key.antigens}
    antigen = jaccard(pred, req)

    formulation = 1.0 if vocab.canonical(answer.formulation) == vocab.canonical(key.formulation) else 0.0

    if key.resource_constraints:
        respected = sum(
            1 for c in key.resource_constraints if constraint_respected(c, answer.counselling)
        )
        resource = respected / len(key.resource_constraints)
    else:
        resource = 1.0

    lowered = answer.counselling.lower()
    rationale = 1.0 if any(f.lower() in lowered for f in key.locale_factors) else 0.0

    cas10 = 10.0 * (
        w["antigen"] * antigen
        + w["formulation"] * formulation
        + w["resource"] * resource
        + w["rationale"] * rationale
    )
    return CasResult(
        antigen_accuracy=antigen,
        formulation_fit=formulation,
        resource_alignment=resource,
        rationale_localization=rationale,
        cas10=cas10,
    )


def delta_cas(
    result_a: CasResult,
    result_b: CasResult,
    answer_a: GeoAnswer,
    answer_b: GeoAnswer,
    key_a: GeoAnswerKey,
    key_b: GeoAnswerKey,
    vocab: Vocabulary | None = None,
) -> float:
    """Paired-scenario flexibility delta.

    delta = mean(cas10) - 10 * max(0, J(pred_a, pred_b) - J(req_a, req_b)).
    Recycling one plan across locales whose keys diverge is penalized,
    possibly below zero. This formula is a local construction satisfying
    that qualitative contract; reports flag it as such.
    """
    if vocab is None:
        vocab = Vocabulary.load()
    pred_a = {vocab.canonical(x) for x in answer_a.antigens}
    pred_b = {vocab.canonical(x) for x in answer_b.antigens}
    req_a = {vocab.canonical(x) for x in key_a.antigens}
    req_b = {vocab.canonical(x) for x in key_b.antigens}
    penalty = 10.0 * max(0.0, jaccard(pred_a, pred_b) - jaccard(req_a, req_b))
    return (result_a.cas10 + result_b.cas10) / 2.0 - penalty


# ---------------------------------------------------------------------------
# Cognitive-bias stress test
# ---------------------------------------------------------------------------


def _stage_diagnoses(turn, vocab: Vocabulary) -> list[str]:
    if turn.structured and "diagnoses" in turn.structured:
        return [vocab.canonical(d) for d in turn.structured["diagnoses"]]
    from .harness import parse_final_text

    parsed = parse_final_text(turn.text)
    return [vocab.canonical(d) for d in parsed.diagnoses]


def _stage_actions_text(turn) -> str:
    parts = [turn.text]
    if turn.structured:
        parts.extend(str(a) for a in turn.structured.get("actions", []))
        if turn.structured.get("plan"):
            parts.append(str(turn.structured["plan"]))
    return "\n".join(parts)


def score_cbst(
    transcript: Transcript,
    case: BiasCase,
    vocab: Vocabulary | None = None,
    embedder: BuiltinEmbedder | None = None,
    tau: float = DETECT_TAU,
    weights: dict[str, float] | None = None,
) -> CbstResult:
    """Anchor flexibility, red-flag recognition, breadth, and actions."""
    if transcript.scenario_kind != "bias":
        raise ValueError(f"expected a bias transcript, got {transcript.scenario_kind}")
    model_turns = transcript.model_turns()
    if len(model_turns) != 2:
        raise ValueError(f"bias transcript needs exactly 2 model turns, has {len(model_turns)}")
    if vocab is None:
        vocab = Vocabulary.load()
    if embedder is None:
        embedder = BuiltinEmbedder()
    w = check_weights(weights, CBST_WEIGHTS) if weights else CBST_WEIGHTS

    stage1, stage2 = model_turns
    dx1 = _stage_diagnoses(stage1, vocab)
    dx2 = _stage_diagnoses(stage2, vocab)
    top1 = dx1[0] if dx1 else ""
    top2 = dx2[0] if dx2 else ""
    correct = vocab.canonical(case.correct_diagnosis)

    revised = bool(top2) and top2 != top1
    lands_correct = top2 == correct or phrase_in_text(correct, top2)
    flex = 1 if (revised and lands_correct) else 0

    stage2_text = _stage_actions_text(stage2)
    recognized = False
    for pattern in case.redflag_patterns:
        if re.search(pattern, stage2_text, re.IGNORECASE):
            recognized = True
            break
    if not recognized and tokenize(case.stage2_redflag):
        flag_vec = embedder.embed(case.stage2_redflag)
        for sentence in sentences(stage2_text):
            if tokenize(sentence) and cosine(embedder.embed(sentence), flag_vec) >= tau:
                recognized = True
                break
    contradiction = 1 if recognized else 0

    expected = {vocab.canonical(d) for d in case.expected_differential}
    listed = {d for d in dx2 if d in expected}
    denom = max(1, case.expected_differential_count)
    breadth = min(1.0, len(listed) / denom)

    if case.expected_actions:
        present = sum(1 for a in case.expected_actions if phrase_in_text(a, stage2_text))
        action = present / len(case.expected_actions)
    else:
        action = 0.0

    cbst10 = 10.0 * (
        w["flex"] * flex
        + w["contradiction"] * contradiction
        + w["breadth"] * breadth
        + w["action"] * action
    )
    return CbstResult(
        anchor_flexibility=flex,
        contradiction_recognition=contradiction,
        breadth=breadth,
        action_appropriateness=action,
        cbst10=cbst10,
    )


def bsi(results: list[CbstResult]) -> float:
    """Bias Susceptibility Index: failure-to-revise rate."""
    if not results:
        raise EmptyInputError("no CBST results")
    return sum(1 for r in results if r.anchor_flexibility == 0) / len(results)


# ---------------------------------------------------------------------------
# Bootstrap aggregation
# ---------------------------------------------------------------------------


def bootstrap_ci(
    samples: list[float],
    resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> AggregateStat:
    """Seeded percentile bootstrap over resampled means.

    Interval endpoints are order statistics of the resampled-mean array,
    so the same seed is bit-reproducible.
    """
    if not samples:
        raise EmptyInputError("no samples")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1) exclusive")

    data = np.asarray(samples, dtype=np.float64)
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = rng.integers(0, data.size, size=(resamples, data.size))
    means = np.sort(data[idx].mean(axis=1))
    alpha = (1.0 - level) / 2.0
    lo_i = int(np.floor(alpha * resamples))
    hi_i = min(resamples - 1, int(np.ceil((1.0 - alpha) * resamples)) - 1)
    return AggregateStat(
        mean=float(data.mean()),
        ci_low=float(means[lo_i]),
        ci_high=float(means[hi_i]),
        n=data.size,
        resamples=resamples,
        level=level,
    )


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

DELTA_CAS_NOTE = (
    "paired delta uses a locally constructed penalty formula: "
    "mean CAS minus 10*max(0, J(pred,pred) - J(req,req)); it flags "
    "recycled cross-locale plans and is not an externally standardized "
    "statistic"
)


@dataclass
class MetricSection:
    cases: list[dict]
    aggregate: AggregateStat | None
    extras: dict = field(default_factory=dict)


def _stat_json(stat: AggregateStat | None) -> dict | None:
    if stat is None:
        return None
    return {
        "mean": stat.mean,
        "ci_low": stat.ci_low,
        "ci_high": stat.ci_high,
        "n": stat.n,
        "resamples": stat.resamples,
        "level": stat.level,
    }


def assemble_report(
    sections: dict[str, MetricSection],
    seed: int = 0,
    resamples: int = 1000,
    config_extras: dict | None = None,
) -> dict:
    """Final report document: per-metric case tables plus aggregates.

    There is deliberately no cross-metric overall score.
    """
    if not any(section.cases for section in sections.values()):
        raise EmptyInputError("no metric results to report")
    report: dict = {
        "config": {"seed": seed, "resamples": resamples, **(config_extras or {})},
        "metrics": {},
        "notes": {},
    }
    for name in sorted(sections):
        section = sections[name]
        entry: dict = {
            "cases": section.cases,
            "aggregate": _stat_json(section.aggregate),
        }
        entry.update(section.extras)
        report["metrics"][name] = entry
    if "cas" in sections:
        report["notes"]["delta_cas"] = DELTA_CAS_NOTE
    return report


METRIC_SCORE_FIELDS = {
    "decision_points": "score10",
    "needle": "score",
    "reverse": "composite10",
    "cas": "cas10",
    "cbst": "cbst10",
}


def report_markdown(report: dict) -> str:
    lines = ["# Evaluation report", ""]
    lines.append("| metric | cases | mean | 95% CI |")
    lines.append("|---|---|---|---|")
    for name, section in report["metrics"].items():
        stat = section.get("aggregate")
        if stat:
            lines.append(
                f"| {name} | {stat['n']} | {stat['mean']:.3f} | "
                f"[{stat['ci_low']:.3f}, {stat['ci_high']:.3f}] |"
            )
        else:
            lines.append(f"| {name} | {len(section['cases'])} | - | - |")
    for key, note in report.get("notes", {}).items():
        lines.append("")
        lines.append(f"note ({key}): {note}")
    lines.append("")
    return "\n".join(lines)


def report_csv(report: dict) -> str:
    """Per-case CSV export: metric,case_id,score."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["metric", "case_id", "score"])
    for name, section in report["metrics"].items():
        score_field = METRIC_SCORE_FIELDS.get(name)
        for case in section["cases"]:
            score = case.get(score_field) if score_field else None
            writer.writerow([name, case.get("case_id", ""), score])
    return buf.getvalue()


def save_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, ensure_ascii=False, sort_keys=True)
        fh.write("\n")
