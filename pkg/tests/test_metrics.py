import json
import random

import numpy as np
import pytest

from guidebench.errors import EmptyInputError
from guidebench.harness import (
    FinalAnswer,
    GeoAnswer,
    ScriptedMockModel,
    Transcript,
    Turn,
    run_bias_session,
    run_decision_session,
    run_geo_query,
    run_needle_query,
    run_reverse_session,
)
from guidebench.metrics import (
    AggregateStat,
    CasResult,
    CbstResult,
    MetricSection,
    NeedleResult,
    ReverseResult,
    assemble_report,
    bootstrap_ci,
    bsi,
    constraint_respected,
    delta_cas,
    detect_clue,
    report_csv,
    report_markdown,
    save_report,
    score_cas,
    score_cbst,
    score_decision_points,
    score_needle,
    score_reverse,
)
from guidebench.scenario import GeoAnswerKey, Needle
from guidebench.vocabulary import Vocabulary
from tests.test_harness import (
    bias_case,
    dv,
    evaluate_script,
    fixed_clock,
    geo_pair,
    mock_model,
    reverse_fixture,
)
from tests.test_scenarios import bundled_needle_case

VOCAB = Vocabulary.load()


def decision_transcript(matched_lists, with_final=True):
    """Synthetic decision transcript: one model turn per matched-id list."""
    turns = [Turn("harness", "opening")]
    for ids in matched_lists:
        turns.append(Turn("model", "query", matched_node_ids=list(ids)))
        turns.append(Turn("harness", "reveal"))
    final = None
    if with_final:
        turns.append(Turn("model", "FINAL: x PLAN: y"))
        final = FinalAnswer(diagnoses=["x"], plan="y", from_marker=True)
    return Transcript(
        transcript_id="t",
        scenario_kind="decision",
        scenario_id="dv-001",
        turns=turns,
        final=final,
    )


# ---------------------------------------------------------------------------
# Decision points
# ---------------------------------------------------------------------------


def test_decision_perfect_case_scores_10():
    transcript = run_decision_session(dv("dv-001"), mock_model(), clock=fixed_clock())
    result = score_decision_points(transcript, dv("dv-001"))
    assert (result.precision, result.recall, result.f) == (1.0, 1.0, 1.0)
    assert result.score10 == 10.0


def test_decision_worked_golden_7_5():
    # 3 of 4 critical nodes asked plus one superfluous query
    transcript = run_decision_session(dv("dv-002"), mock_model(), clock=fixed_clock())
    result = score_decision_points(transcript, dv("dv-002"))
    assert result.n_asked == 4
    assert result.n_asked_critical == 3
    assert result.precision == 0.75
    assert result.recall == 0.75
    assert result.f == 0.75
    assert result.score10 == 7.5


def test_decision_zero_queries_scores_zero():
    transcript = decision_transcript([])
    result = score_decision_points(transcript, dv("dv-001"))
    assert result.n_asked == 0
    assert result.precision == 0.0 and result.recall == 0.0
    assert result.score10 == 0.0


def test_decision_noncritical_matches_count_toward_asked():
    vignette = dv("dv-001")
    vignette.hidden_nodes[3].critical = False
    transcript = decision_transcript([["n-resp-rate"], ["n-vax"]])
    result = score_decision_points(transcript, vignette)
    assert result.n_asked == 2
    assert result.n_asked_critical == 1
    assert result.n_critical == 3


def test_decision_brute_force_oracle_randomized():
    rng = random.Random(4242)
    vignette = dv("dv-001")
    node_ids = [n.node_id for n in vignette.hidden_nodes]
    critical = {n.node_id for n in vignette.hidden_nodes if n.critical}
    for _ in range(300):
        lists = []
        seen = set()
        for _ in range(rng.randint(0, 6)):
            if rng.random() < 0.4:
                lists.append([])
            else:
                pick = [nid for nid in rng.sample(node_ids, rng.randint(1, 2)) if nid not in seen]
                seen.update(pick)
                lists.append(pick)
        transcript = decision_transcript(lists)
        result = score_decision_points(transcript, vignette)

        # independent recomputation from the raw turn log
        asked_nodes = set()
        superfluous = 0
        for ids in lists:
            if ids:
                asked_nodes |= set(ids)
            else:
                superfluous += 1
        n_asked = len(asked_nodes) + superfluous
        inter = len(asked_nodes & critical)
        p = inter / n_asked if n_asked else 0.0
        r = inter / len(critical)
        f = 2 * p * r / (p + r) if p + r else 0.0
        assert result.precision == pytest.approx(p, abs=1e-12)
        assert result.recall == pytest.approx(r, abs=1e-12)
        assert result.score10 == pytest.approx(10 * f, abs=1e-12)


# ---------------------------------------------------------------------------
# Needle
# ---------------------------------------------------------------------------


def test_detect_clue_via_pattern():
    needle = bundled_needle_case().needle
    assert detect_clue("Her recent travel to South Sudan is the key detail.", needle)


def test_detect_clue_absent():
    needle = bundled_needle_case().needle
    assert not detect_clue("Fever with splenomegaly suggests chronic malaria.", needle)


def test_detect_clue_via_embedding_paraphrase():
    needle = Needle(clue_text="she returned from Bentiu in South Sudan recently", patterns=[], implication_terms=[])
    response = "She returned recently from Bentiu region, South Sudan."
    assert detect_clue(response, needle)


def test_needle_full_credit():
    transcript = run_needle_query(bundled_needle_case(), mock_model(), clock=fixed_clock())
    result = score_needle(transcript, bundled_needle_case(), VOCAB)
    assert result.clue_detected and result.correct_diagnosis
    assert result.score == 1.0


def test_needle_half_credit_clue_without_integration():
    case = bundled_needle_case("ndl-002")
    transcript = run_needle_query(case, mock_model(), clock=fixed_clock())
    result = score_needle(transcript, case, VOCAB)
    assert result.clue_detected and not result.correct_diagnosis
    assert result.score == 0.5


def test_needle_zero():
    case = bundled_needle_case()
    model = ScriptedMockModel({"replies": ["FINAL: malaria PLAN: artemether-lumefantrine"]})
    transcript = run_needle_query(case, model, clock=fixed_clock())
    result = score_needle(transcript, case, VOCAB)
    assert result.score == 0.0


def test_needle_synonym_fold_counts_kala_azar():
    case = bundled_needle_case()
    model = ScriptedMockModel(
        {
            "replies": [
                "The travel to South Sudan matters. FINAL: kala-azar, malaria PLAN: "
                "refer for confirmatory testing and antileishmanial therapy"
            ]
        }
    )
    transcript = run_needle_query(case, model, clock=fixed_clock())
    result = score_needle(transcript, case, VOCAB)
    assert result.score == 1.0


# ---------------------------------------------------------------------------
# Reverse
# ---------------------------------------------------------------------------


def test_reverse_worked_golden_8_8():
    result = ReverseResult(
        consistency=1 - 1 / 8,
        completeness=0.9,
        style_realism=0.8,
        linguistic=1.0,
        composite10=10 * (0.4 * (1 - 1 / 8) + 0.3 * 0.9 + 0.2 * 0.8 + 0.1 * 1.0),
    )
    assert result.composite10 == pytest.approx(8.8, abs=1e-12)


def test_reverse_flawless_persona_scores_components():
    persona, script = reverse_fixture()
    transcript = run_reverse_session(persona, script, mock_model(), clock=fixed_clock())
    result = score_reverse(transcript, persona)
    assert result.consistency == 1.0
    assert result.completeness == 1.0
    assert result.linguistic == 1.0
    assert 0.0 <= result.style_realism <= 1.0
    assert result.contradiction_gate and result.completeness_gate
    assert result.composite10 == pytest.approx(
        10 * (0.4 + 0.3 + 0.2 * result.style_realism + 0.1), abs=1e-12
    )


def test_reverse_contradiction_lowers_consistency():
    persona, script = reverse_fixture()
    replies = list(evaluate_script()["sessions"]["t-reverse-rev-diarrhoea-01"])
    replies[2] = "She passed urine this morning as usual, no problem there."
    model = ScriptedMockModel({"sessions": {"t-reverse-rev-diarrhoea-01": replies}})
    transcript = run_reverse_session(persona, script, model, clock=fixed_clock())
    result = score_reverse(transcript, persona)
    assert result.consistency == pytest.approx(1 - 1 / 8, abs=1e-12)
    assert result.contradiction_gate  # exactly one contradiction passes the gate


def test_reverse_consistency_floor_zero():
    turns = []
    for i in range(6):
        turns.append(Turn("harness", f"q{i}", fact_ids=[f"f{i}"]))
        turns.append(
            Turn("model", "answer", events=[f"contradiction:f{i}", f"contradiction:f{i}x"])
        )
    transcript = Transcript("t", "reverse", "p", turns=turns)
    persona, _ = reverse_fixture()
    result = score_reverse(transcript, persona)
    assert result.consistency == 0.0
    assert not result.contradiction_gate


# ---------------------------------------------------------------------------
# CAS / delta
# ---------------------------------------------------------------------------


def kenya_key():
    return geo_pair().scenario_a.answer_key


def test_cas_perfect_10():
    pair = geo_pair()
    answer, _ = run_geo_query(
        pair.scenario_a, mock_model(), VOCAB, clock=fixed_clock(), session_id="t-geo-geo-001-Kenya"
    )
    result = score_cas(answer, pair.scenario_a.answer_key, VOCAB)
    assert result.antigen_accuracy == 1.0
    assert result.formulation_fit == 1.0
    assert result.resource_alignment == 1.0
    assert result.rationale_localization == 1.0
    assert result.cas10 == 10.0


def test_cas_jaccard_worked_golden():
    answer = GeoAnswer({"Pentavalent", "PCV13"}, "Pentavalent", "counselling text", "structured")
    key = GeoAnswerKey({"Pentavalent", "PCV10", "OPV"}, "Pentavalent", [], [])
    result = score_cas(answer, key, VOCAB)
    assert result.antigen_accuracy == pytest.approx(0.25, abs=1e-12)


def test_cas_empty_prediction_zero_jaccard():
    answer = GeoAnswer(set(), "", "text", "extracted")
    key = kenya_key()
    result = score_cas(answer, key, VOCAB)
    assert result.antigen_accuracy == 0.0


def test_cas_constraint_rules():
    assert constraint_respected("no bilirubin testing::forbid=bilirubin", "give vaccines and counsel")
    assert not constraint_respected("no bilirubin testing::forbid=bilirubin", "order a bilirubin test")
    assert constraint_respected("cold chain::require=cold chain", "maintain the cold chain")
    assert not constraint_respected("cold chain::require=cold chain", "store anywhere")


def test_delta_cas_perfect_pair_is_10():
    pair = geo_pair()
    model = mock_model()
    answer_a, _ = run_geo_query(pair.scenario_a, model, VOCAB, clock=fixed_clock(), session_id="t-geo-geo-001-Kenya")
    answer_b, _ = run_geo_query(pair.scenario_b, model, VOCAB, clock=fixed_clock(), session_id="t-geo-geo-001-South_Africa")
    result_a = score_cas(answer_a, pair.scenario_a.answer_key, VOCAB)
    result_b = score_cas(answer_b, pair.scenario_b.answer_key, VOCAB)
    delta = delta_cas(result_a, result_b, answer_a, answer_b, pair.scenario_a.answer_key, pair.scenario_b.answer_key, VOCAB)
    assert delta == pytest.approx(10.0, abs=1e-12)


def test_delta_cas_identical_predictions_penalized():
    # identical predictions across locales with J(req) = 0.2
    key_a = GeoAnswerKey({"A", "B"}, "", [], [])
    key_b = GeoAnswerKey({"B", "C", "D", "E"}, "", [], [])
    assert len({"B"}) / len({"A", "B", "C", "D", "E"}) == pytest.approx(0.2)
    answer = GeoAnswer({"A", "B"}, "", "t", "structured")
    result_a = CasResult(1.0, 0, 1.0, 0, 6.0)
    result_b = CasResult(0.2, 0, 1.0, 0, 6.0)
    delta = delta_cas(result_a, result_b, answer, answer, key_a, key_b, VOCAB)
    # mean CAS 6, penalty 10*(1 - 0.2) = 8 -> delta = -2
    assert delta == pytest.approx(-2.0, abs=1e-12)


def test_delta_cas_control_pair_zero_penalty():
    key = kenya_key()
    answer = GeoAnswer(set(key.antigens), key.formulation, "cold chain malaria endemic", "structured")
    result = score_cas(answer, key, VOCAB)
    delta = delta_cas(result, result, answer, answer, key, key, VOCAB)
    assert delta == pytest.approx(result.cas10, abs=1e-12)


# ---------------------------------------------------------------------------
# CBST / BSI
# ---------------------------------------------------------------------------


def test_cbst_full_revision_scores_10():
    transcript = run_bias_session(bias_case("cbst-anchor-01"), mock_model(), clock=fixed_clock())
    result = score_cbst(transcript, bias_case("cbst-anchor-01"), VOCAB)
    assert result.anchor_flexibility == 1
    assert result.contradiction_recognition == 1
    assert result.breadth == 1.0
    assert result.action_appropriateness == 1.0
    assert result.cbst10 == 10.0


def test_cbst_worked_golden_7_5():
    transcript = run_bias_session(bias_case("cbst-prem-01"), mock_model(), clock=fixed_clock())
    result = score_cbst(transcript, bias_case("cbst-prem-01"), VOCAB)
    assert result.anchor_flexibility == 1
    assert result.contradiction_recognition == 1
    assert result.breadth == 0.5
    assert result.action_appropriateness == 0.0
    assert result.cbst10 == pytest.approx(7.5, abs=1e-12)


def test_cbst_no_revision_bounded():
    transcript = run_bias_session(bias_case("cbst-conf-01"), mock_model(), clock=fixed_clock())
    result = score_cbst(transcript, bias_case("cbst-conf-01"), VOCAB)
    assert result.anchor_flexibility == 0
    assert result.contradiction_recognition == 0
    assert result.cbst10 <= 10 * (0.20 * result.breadth + 0.15 * result.action_appropriateness) + 1e-12


def test_bsi_counting():
    def res(flex):
        return CbstResult(flex, 0, 0.0, 0.0, 0.0)

    assert bsi([res(0)] * 3 + [res(1)] * 7) == pytest.approx(0.3)
    assert bsi([res(1)] * 5) == 0.0
    assert bsi([res(0)] * 5) == 1.0
    with pytest.raises(EmptyInputError):
        bsi([])


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


def test_bootstrap_identical_samples_zero_width():
    stat = bootstrap_ci([4.2] * 25, resamples=500, seed=7)
    assert stat.ci_low == stat.ci_high == stat.mean == 4.2


def test_bootstrap_seeded_reproducible():
    samples = [0.0, 1.0] * 50
    a = bootstrap_ci(samples, resamples=1000, seed=42)
    b = bootstrap_ci(samples, resamples=1000, seed=42)
    assert (a.ci_low, a.ci_high) == (b.ci_low, b.ci_high)
    assert a.ci_low <= 0.5 <= a.ci_high
    assert 0.0 <= a.ci_low <= a.ci_high <= 1.0


def test_bootstrap_contains_mean():
    rng = random.Random(5)
    for trial in range(20):
        samples = [rng.random() * 10 for _ in range(rng.randint(3, 40))]
        stat = bootstrap_ci(samples, resamples=400, seed=trial)
        assert stat.ci_low <= stat.mean <= stat.ci_high


def test_bootstrap_endpoints_are_order_statistics():
    samples = [1.0, 2.0, 5.0, 9.0]
    stat = bootstrap_ci(samples, resamples=200, seed=3)
    data = np.asarray(samples)
    rng = np.random.Generator(np.random.PCG64(3))
    idx = rng.integers(0, 4, size=(200, 4))
    means = np.sort(data[idx].mean(axis=1))
    assert stat.ci_low in means
    assert stat.ci_high in means


def test_bootstrap_level_bounds():
    with pytest.raises(ValueError):
        bootstrap_ci([1.0], level=0.0)
    with pytest.raises(ValueError):
        bootstrap_ci([1.0], level=1.0)
    with pytest.raises(EmptyInputError):
        bootstrap_ci([])


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------


def one_section():
    return MetricSection(
        cases=[{"case_id": "c1", "score": 1.0}],
        aggregate=AggregateStat(1.0, 1.0, 1.0, 1, 100),
    )


def test_report_single_metric():
    report = assemble_report({"needle": one_section()})
    assert list(report["metrics"]) == ["needle"]
    assert len(report["metrics"]["needle"]["cases"]) == 1


def test_report_five_sections_no_overall_score():
    sections = {
        name: one_section()
        for name in ("decision_points", "needle", "reverse", "cas", "cbst")
    }
    report = assemble_report(sections)
    assert len(report["metrics"]) == 5
    flat = json.dumps(report).lower()
    assert "overall" not in flat
    assert "delta_cas" in report["notes"]


def test_report_empty_raises():
    with pytest.raises(EmptyInputError):
        assemble_report({})
    with pytest.raises(EmptyInputError):
        assemble_report({"needle": MetricSection(cases=[], aggregate=None)})


def test_report_markdown_and_csv(tmp_path):
    report = assemble_report({"needle": one_section()})
    md = report_markdown(report)
    assert "| needle | 1 |" in md
    csv_text = report_csv(report)
    assert "metric,case_id,score" in csv_text
    assert "needle,c1," in csv_text
    save_report(report, tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["metrics"]["needle"]
