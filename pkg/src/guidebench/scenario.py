"""Scenario construction and auditing for the five evaluation tracks.

Each scenario kind carries machine-checkable hidden ground truth:

- DecisionVignette: hidden decision nodes with reveal text
- NeedleCase: one decisive buried clue plus distractor diagnoses
- PersonaSheet: a simulated caregiver's ground-truth fact card
- GeoPair: locale-matched vignettes keyed to immunization schedules
- BiasCase: two-stage anchor-and-flip reasoning traps

Scenarios load from hand-authored JSONL files or are drafted via the
text-generation backend against per-kind JSON response schemas.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataGapError, ForgeParseError, StructuralError
from .text import word_count
from .vocabulary import Vocabulary

log = logging.getLogger(__name__)

AFFECT_TAGS = ("worried", "hesitant", "relieved")
BIAS_TYPES = ("anchoring", "confirmation", "premature_closure", "availability")


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass
class Node:
    """A hidden decision point a competent clinician would query."""

    node_id: str
    label: str
    reveal_text: str
    critical: bool = True
    synonyms: list[str] = field(default_factory=list)
    patterns: list[str] = field(default_factory=list)


@dataclass
class DecisionVignette:
    vignette_id: str
    narrative: str
    hidden_nodes: list[Node]
    answer_key: dict  # {"diagnosis": str, "management": str}
    max_turns: int = 20
    query_token_cap: int = 60

    def validate(self) -> list[str]:
        problems = []
        ids = [n.node_id for n in self.hidden_nodes]
        if len(set(ids)) != len(ids):
            problems.append("duplicate node_ids")
        if not any(n.critical for n in self.hidden_nodes):
            problems.append("no critical node")
        if any(not n.reveal_text for n in self.hidden_nodes):
            problems.append("empty reveal_text")
        return problems


@dataclass
class Needle:
    clue_text: str
    patterns: list[str] = field(default_factory=list)
    implication_terms: list[str] = field(default_factory=list)


@dataclass
class ManagementKey:
    text: str
    required_elements: list[str] = field(default_factory=list)


@dataclass
class NeedleCase:
    case_id: str
    narrative: str
    needle: Needle
    target_disease: str
    distractor_diagnoses: list[str]
    management_key: ManagementKey
    locale: str = ""


@dataclass
class PersonaFact:
    fact_id: str
    topic: str
    truthful_answer: str


@dataclass
class LocalePhrase:
    text: str
    variants: list[str] = field(default_factory=list)
    fact_id: str | None = None


@dataclass
class PersonaSheet:
    persona_id: str
    facts: list[PersonaFact]
    demographics: dict  # age, caregiver_role, county
    affect: str
    locale_phrases: list[LocalePhrase] = field(default_factory=list)

    def validate(self) -> list[str]:
        problems = []
        if len(self.facts) < 5:
            problems.append(f"needs >=5 facts, has {len(self.facts)}")
        if self.affect not in AFFECT_TAGS:
            problems.append(f"affect {self.affect!r} outside {AFFECT_TAGS}")
        return problems


@dataclass
class GeoAnswerKey:
    antigens: set[str]
    formulation: str
    resource_constraints: list[str] = field(default_factory=list)
    locale_factors: list[str] = field(default_factory=list)


@dataclass
class GeoScenario:
    locale: str
    setting_tier: str
    narrative: str
    answer_key: GeoAnswerKey


@dataclass
class GeoPair:
    pair_id: str
    scenario_a: GeoScenario
    scenario_b: GeoScenario
    narrative_template: str = ""


@dataclass
class ScheduleEntry:
    country: str
    age_weeks: int
    antigen: str
    formulation: str = ""
    constraints: list[str] = field(default_factory=list)


@dataclass
class BiasCase:
    case_id: str
    bias_type: str
    stage1_narrative: str
    anchor_diagnosis: str
    stage2_redflag: str
    correct_diagnosis: str
    expected_actions: list[str]
    reference_chain: list[str]
    expected_differential: list[str]
    expected_differential_count: int
    redflag_patterns: list[str] = field(default_factory=list)

    def validate(self, vocab: Vocabulary | None = None) -> list[str]:
        problems = []
        if self.bias_type not in BIAS_TYPES:
            problems.append(f"bias_type {self.bias_type!r} outside {BIAS_TYPES}")
        anchor = vocab.canonical(self.anchor_diagnosis) if vocab else self.anchor_diagnosis.lower()
        correct = vocab.canonical(self.correct_diagnosis) if vocab else self.correct_diagnosis.lower()
        if anchor == correct:
            problems.append("anchor diagnosis equals correct diagnosis")
        if self.stage2_redflag.lower() in self.stage1_narrative.lower():
            problems.append("stage2 red flag already present in stage1 narrative")
        return problems


@dataclass
class AuditReport:
    passed: bool
    reasons: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Decision node extraction
# ---------------------------------------------------------------------------

_NODE_LINE_RE = re.compile(r"^\?NODE\s+(.*)$")
_ATTR_RE = re.compile(r'(\w+)="([^"]*)"')
_KNOWN_ATTRS = {"id", "critical", "label", "reveal", "pattern"}


def extract_decision_nodes(flow_text: str, vocab: Vocabulary | None = None) -> list[Node]:
    """Parse `?NODE id=... critical=... label=... reveal=...` marker lines.

    Synonyms are merged from the concept vocabulary by label. Unknown
    attributes or missing required ones raise StructuralError with the
    line number; zero markers yields an empty list with a warning.
    """
    if vocab is None:
        vocab = Vocabulary.load()
    nodes: list[Node] = []
    for lineno, line in enumerate(flow_text.splitlines(), start=1):
        match = _NODE_LINE_RE.match(line.strip())
        if not match:
            continue
        attr_text = match.group(1)
        attrs = dict(_ATTR_RE.findall(attr_text))
        consumed = "".join(_ATTR_RE.sub("", attr_text).split())
        if consumed:
            raise StructuralError(f"unparseable node attributes near {consumed!r}", lineno)
        unknown = set(attrs) - _KNOWN_ATTRS
        if unknown:
            raise StructuralError(f"unknown node attribute {sorted(unknown)[0]!r}", lineno)
        for required in ("id", "label", "reveal"):
            if required not in attrs:
                raise StructuralError(f"node missing attribute {required!r}", lineno)
        critical_raw = attrs.get("critical", "true").lower()
        if critical_raw not in ("true", "false"):
            raise StructuralError(f"critical must be true|false, got {critical_raw!r}", lineno)
        patterns = [attrs["pattern"]] if "pattern" in attrs else []
        nodes.append(
            Node(
                node_id=attrs["id"],
                label=attrs["label"],
                reveal_text=attrs["reveal"],
                critical=critical_raw == "true",
                synonyms=vocab.synonyms_for(attrs["label"]),
                patterns=patterns,
            )
        )
    if not nodes:
        log.warning("flow text contains no ?NODE markers")
    return nodes


# ---------------------------------------------------------------------------
# Needle audit
# ---------------------------------------------------------------------------


def audit_needle_case(case: NeedleCase) -> AuditReport:
    """The four plausibility checks for a needle case, nothing more."""
    reasons = []
    if len(case.distractor_diagnoses) < 3:
        reasons.append(f"distractor count = {len(case.distractor_diagnoses)}, need >= 3")
    occurrences = case.narrative.count(case.needle.clue_text)
    if occurrences != 1:
        reasons.append(f"clue count = {occurrences}")
    if not case.management_key.text.strip() or not case.target_disease.strip():
        reasons.append("management key or target disease missing")
    words = word_count(case.narrative)
    if not 300 <= words <= 500:
        reasons.append(f"narrative is {words} words, need 300-500")
    return AuditReport(passed=not reasons, reasons=reasons)


# ---------------------------------------------------------------------------
# Schedule knowledge base and geo pairs
# ---------------------------------------------------------------------------

SCHEDULE_HEADER = ["country", "age_weeks", "antigen", "formulation", "constraints"]


def load_schedule(path: str | Path) -> list[ScheduleEntry]:
    """Load a schedule KB from CSV; constraints are ';'-separated in-cell."""
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SCHEDULE_HEADER:
            raise StructuralError(
                f"schedule CSV header must be {','.join(SCHEDULE_HEADER)}"
            )
        seen = set()
        for row in reader:
            key = (row["country"], int(row["age_weeks"]), row["antigen"])
            if key in seen:
                raise StructuralError(f"duplicate schedule entry {key}")
            seen.add(key)
            entries.append(
                ScheduleEntry(
                    country=row["country"],
                    age_weeks=int(row["age_weeks"]),
                    antigen=row["antigen"],
                    formulation=row["formulation"],
                    constraints=[c.strip() for c in row["constraints"].split(";") if c.strip()],
                )
            )
    return entries


def bundled_schedule() -> list[ScheduleEntry]:
    from importlib import resources

    ref = resources.files("guidebench.data").joinpath("schedule_fixture.csv")
    with resources.as_file(ref) as path:
        return load_schedule(path)


@dataclass
class GeoTemplate:
    """Narrative template plus per-locale color for matched pairs."""

    narrative: str  # placeholders: {age_weeks}, {place}, {setting}
    places: dict[str, str]  # locale -> rendered place string
    setting_tier: str = "rural dispensary"
    locale_factors: dict[str, list[str]] = field(default_factory=dict)


DEFAULT_GEO_TEMPLATE = GeoTemplate(
    narrative=(
        "A {age_weeks}-week-old infant is brought to a {setting} in {place} "
        "for routine immunisation. The infant is well today and weighs "
        "appropriately for age. Which vaccines are due today, and what "
        "counselling should be given?"
    ),
    places={
        "Kenya": "Kisumu, Kenya",
        "South Africa": "Johannesburg, South Africa",
        "United Kingdom": "Leeds, United Kingdom",
    },
    locale_factors={
        "Kenya": ["malaria endemic", "KEPI schedule", "community health volunteer"],
        "South Africa": ["EPI-SA schedule", "clinic road-to-health card"],
        "United Kingdom": ["NHS schedule", "GP surgery"],
    },
)


def schedule_key(kb: list[ScheduleEntry], locale: str, age_weeks: int) -> GeoAnswerKey:
    """Answer key for one locale and age from the schedule KB."""
    due = [e for e in kb if e.country == locale and e.age_weeks == age_weeks]
    if not due:
        raise DataGapError(f"no schedule coverage for {locale!r} at {age_weeks} weeks")
    antigens = {e.antigen for e in due}
    formulations = sorted({e.formulation for e in due if e.formulation})
    constraints: list[str] = []
    for e in sorted(due, key=lambda e: e.antigen):
        for c in e.constraints:
            if c not in constraints:
                constraints.append(c)
    return GeoAnswerKey(
        antigens=antigens,
        formulation="+".join(formulations),
        resource_constraints=constraints,
        locale_factors=[],
    )


def build_geo_pair(
    kb: list[ScheduleEntry],
    age_weeks: int,
    locale_a: str,
    locale_b: str,
    template: GeoTemplate = DEFAULT_GEO_TEMPLATE,
    pair_id: str | None = None,
) -> GeoPair:
    """Matched vignette pair differing only in locale substitutions."""

    def side(locale: str) -> GeoScenario:
        key = schedule_key(kb, locale, age_weeks)
        key.locale_factors = list(template.locale_factors.get(locale, []))
        place = template.places.get(locale, locale)
        narrative = template.narrative.format(
            age_weeks=age_weeks, place=place, setting=template.setting_tier
        )
        return GeoScenario(
            locale=locale,
            setting_tier=template.setting_tier,
            narrative=narrative,
            answer_key=key,
        )

    return GeoPair(
        pair_id=pair_id or f"geo-{age_weeks}w-{locale_a}-vs-{locale_b}".replace(" ", "_"),
        scenario_a=side(locale_a),
        scenario_b=side(locale_b),
        narrative_template=template.narrative,
    )


# ---------------------------------------------------------------------------
# Backend forging
# ---------------------------------------------------------------------------

FORGE_PROMPTS = {
    "needle": (
        "Write one diagnostic vignette as JSON with keys: case_id, narrative "
        "(300-500 words), needle {clue_text, patterns, implication_terms}, "
        "target_disease, distractor_diagnoses (>=3), management_key {text, "
        "required_elements}, locale. The clue below must appear exactly once, "
        "verbatim, inside the narrative.\nClue: {seed}"
    ),
    "persona": (
        "Write one simulated-caregiver fact card as JSON with keys: "
        "persona_id, facts (>=5 of {fact_id, topic, truthful_answer}), "
        "demographics {age, caregiver_role, county}, affect "
        "(worried|hesitant|relieved), locale_phrases (list of {text, "
        "variants, fact_id}).\nCondition focus: {seed}"
    ),
    "bias": (
        "Write one two-stage reasoning trap as JSON with keys: case_id, "
        "bias_type (anchoring|confirmation|premature_closure|availability), "
        "stage1_narrative, anchor_diagnosis, stage2_redflag, "
        "correct_diagnosis, expected_actions, reference_chain, "
        "expected_differential, expected_differential_count, "
        "redflag_patterns.\nTrap focus: {seed}"
    ),
}


def _require(payload: dict, key: str, kind: str):
    if key not in payload:
        raise ForgeParseError(f"{kind} draft missing key {key!r}")
    return payload[key]


def forge_with_backend(kind: str, seed_input: str, backend):
    """Draft a scenario of ``kind`` via the text backend.

    The backend must reply with a JSON object matching the kind's schema;
    anything else raises ForgeParseError. Drafts must still pass the
    kind's audit before use.
    """
    if kind not in FORGE_PROMPTS:
        raise ValueError(f"unknown scenario kind {kind!r}")
    raw = backend.generate(FORGE_PROMPTS[kind].replace("{seed}", seed_input))
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ForgeParseError(f"{kind} draft is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ForgeParseError(f"{kind} draft must be a JSON object")

    if kind == "needle":
        needle = _require(payload, "needle", kind)
        if not isinstance(needle, dict) or "clue_text" not in needle:
            raise ForgeParseError("needle draft lacks needle.clue_text")
        return NeedleCase(
            case_id=_require(payload, "case_id", kind),
            narrative=_require(payload, "narrative", kind),
            needle=Needle(
                clue_text=needle["clue_text"],
                patterns=list(needle.get("patterns", [])),
                implication_terms=list(needle.get("implication_terms", [])),
            ),
            target_disease=_require(payload, "target_disease", kind),
            distractor_diagnoses=list(_require(payload, "distractor_diagnoses", kind)),
            management_key=ManagementKey(
                text=_require(payload, "management_key", kind).get("text", ""),
                required_elements=list(payload["management_key"].get("required_elements", [])),
            ),
            locale=payload.get("locale", ""),
        )
    if kind == "persona":
        facts_raw = _require(payload, "facts", kind)
        if not isinstance(facts_raw, list):
            raise ForgeParseError("persona facts must be a list")
        return PersonaSheet(
            persona_id=_require(payload, "persona_id", kind),
            facts=[
                PersonaFact(f["fact_id"], f["topic"], f["truthful_answer"])
                for f in facts_raw
            ],
            demographics=_require(payload, "demographics", kind),
            affect=_require(payload, "affect", kind),
            locale_phrases=[
                LocalePhrase(p["text"], list(p.get("variants", [])), p.get("fact_id"))
                for p in payload.get("locale_phrases", [])
            ],
        )
    # bias
    return BiasCase(
        case_id=_require(payload, "case_id", kind),
        bias_type=_require(payload, "bias_type", kind),
        stage1_narrative=_require(payload, "stage1_narrative", kind),
        anchor_diagnosis=_require(payload, "anchor_diagnosis", kind),
        stage2_redflag=_require(payload, "stage2_redflag", kind),
        correct_diagnosis=_require(payload, "correct_diagnosis", kind),
        expected_actions=list(_require(payload, "expected_actions", kind)),
        reference_chain=list(payload.get("reference_chain", [])),
        expected_differential=list(_require(payload, "expected_differential", kind)),
        expected_differential_count=int(_require(payload, "expected_differential_count", kind)),
        redflag_patterns=list(payload.get("redflag_patterns", [])),
    )


# ---------------------------------------------------------------------------
# JSONL serialization
# ---------------------------------------------------------------------------


def _node_to_json(n: Node) -> dict:
    return {
        "node_id": n.node_id,
        "label": n.label,
        "reveal_text": n.reveal_text,
        "critical": n.critical,
        "synonyms": n.synonyms,
        "patterns": n.patterns,
    }


def vignette_to_json(v: DecisionVignette) -> dict:
    return {
        "vignette_id": v.vignette_id,
        "narrative": v.narrative,
        "hidden_nodes": [_node_to_json(n) for n in v.hidden_nodes],
        "answer_key": v.answer_key,
        "max_turns": v.max_turns,
        "query_token_cap": v.query_token_cap,
    }


def vignette_from_json(d: dict) -> DecisionVignette:
    return DecisionVignette(
        vignette_id=d["vignette_id"],
        narrative=d["narrative"],
        hidden_nodes=[Node(**n) for n in d["hidden_nodes"]],
        answer_key=d["answer_key"],
        max_turns=d.get("max_turns", 20),
        query_token_cap=d.get("query_token_cap", 60),
    )


def needle_to_json(c: NeedleCase) -> dict:
    return {
        "case_id": c.case_id,
        "narrative": c.narrative,
        "needle": {
            "clue_text": c.needle.clue_text,
            "patterns": c.needle.patterns,
            "implication_terms": c.needle.implication_terms,
        },
        "target_disease": c.target_disease,
        "distractor_diagnoses": c.distractor_diagnoses,
        "management_key": {
            "text": c.management_key.text,
            "required_elements": c.management_key.required_elements,
        },
        "locale": c.locale,
    }


def needle_from_json(d: dict) -> NeedleCase:
    return NeedleCase(
        case_id=d["case_id"],
        narrative=d["narrative"],
        needle=Needle(**d["needle"]),
        target_disease=d["target_disease"],
        distractor_diagnoses=list(d["distractor_diagnoses"]),
        management_key=ManagementKey(**d["management_key"]),
        locale=d.get("locale", ""),
    )


def persona_to_json(p: PersonaSheet) -> dict:
    return {
        "persona_id": p.persona_id,
        "facts": [
            {"fact_id": f.fact_id, "topic": f.topic, "truthful_answer": f.truthful_answer}
            for f in p.facts
        ],
        "demographics": p.demographics,
        "affect": p.affect,
        "locale_phrases": [
            {"text": lp.text, "variants": lp.variants, "fact_id": lp.fact_id}
            for lp in p.locale_phrases
        ],
    }


def persona_from_json(d: dict) -> PersonaSheet:
    return PersonaSheet(
        persona_id=d["persona_id"],
        facts=[PersonaFact(**f) for f in d["facts"]],
        demographics=d["demographics"],
        affect=d["affect"],
        locale_phrases=[LocalePhrase(**lp) for lp in d.get("locale_phrases", [])],
    )


def geo_pair_to_json(g: GeoPair) -> dict:
    def side(s: GeoScenario) -> dict:
        return {
            "locale": s.locale,
            "setting_tier": s.setting_tier,
            "narrative": s.narrative,
            "answer_key": {
                "antigens": sorted(s.answer_key.antigens),
                "formulation": s.answer_key.formulation,
                "resource_constraints": s.answer_key.resource_constraints,
                "locale_factors": s.answer_key.locale_factors,
            },
        }

    return {
        "pair_id": g.pair_id,
        "scenario_a": side(g.scenario_a),
        "scenario_b": side(g.scenario_b),
        "narrative_template": g.narrative_template,
    }


def geo_pair_from_json(d: dict) -> GeoPair:
    def side(s: dict) -> GeoScenario:
        key = s["answer_key"]
        return GeoScenario(
            locale=s["locale"],
            setting_tier=s["setting_tier"],
            narrative=s["narrative"],
            answer_key=GeoAnswerKey(
                antigens=set(key["antigens"]),
                formulation=key["formulation"],
                resource_constraints=list(key.get("resource_constraints", [])),
                locale_factors=list(key.get("locale_factors", [])),
            ),
        )

    return GeoPair(
        pair_id=d["pair_id"],
        scenario_a=side(d["scenario_a"]),
        scenario_b=side(d["scenario_b"]),
        narrative_template=d.get("narrative_template", ""),
    )


def bias_to_json(b: BiasCase) -> dict:
    return {
        "case_id": b.case_id,
        "bias_type": b.bias_type,
        "stage1_narrative": b.stage1_narrative,
        "anchor_diagnosis": b.anchor_diagnosis,
        "stage2_redflag": b.stage2_redflag,
        "correct_diagnosis": b.correct_diagnosis,
        "expected_actions": b.expected_actions,
        "reference_chain": b.reference_chain,
        "expected_differential": b.expected_differential,
        "expected_differential_count": b.expected_differential_count,
        "redflag_patterns": b.redflag_patterns,
    }


def bias_from_json(d: dict) -> BiasCase:
    return BiasCase(
        case_id=d["case_id"],
        bias_type=d["bias_type"],
        stage1_narrative=d["stage1_narrative"],
        anchor_diagnosis=d["anchor_diagnosis"],
        stage2_redflag=d["stage2_redflag"],
        correct_diagnosis=d["correct_diagnosis"],
        expected_actions=list(d["expected_actions"]),
        reference_chain=list(d.get("reference_chain", [])),
        expected_differential=list(d["expected_differential"]),
        expected_differential_count=d["expected_differential_count"],
        redflag_patterns=list(d.get("redflag_patterns", [])),
    )


_SERIALIZERS = {
    "decision": (vignette_to_json, vignette_from_json),
    "needle": (needle_to_json, needle_from_json),
    "persona": (persona_to_json, persona_from_json),
    "geo": (geo_pair_to_json, geo_pair_from_json),
    "bias": (bias_to_json, bias_from_json),
}


def save_scenarios(kind: str, scenarios: list, path: str | Path) -> None:
    to_json, _ = _SERIALIZERS[kind]
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenarios:
            fh.write(json.dumps(to_json(s), ensure_ascii=False) + "\n")


def load_scenarios(kind: str, path: str | Path) -> list:
    if kind not in _SERIALIZERS:
        raise ValueError(f"unknown scenario kind {kind!r}")
    _, from_json = _SERIALIZERS[kind]
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(from_json(json.loads(line)))
    return out
