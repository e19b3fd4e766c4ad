"""Session orchestration against candidate models.

Defines the vendor-neutral model adapter contract (JSON over HTTP), a
deterministic scripted mock for tests and CI, and the session runners
that produce Transcripts for the scorers:

- decision sessions: iterative ask-to-reveal over hidden nodes
- reverse sessions: the model answers as a caregiver persona
- bias sessions: two-stage anchor-and-flip
- geo / needle queries: one-shot structured answers

The harness never volunteers hidden information; nodes reveal only when
the model's query matches them.
"""

from __future__ import annotations

import json
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import BackendError, ConfigurationError, EmptyInputError
from .retrieval import BuiltinEmbedder, cosine
from .scenario import (
    BiasCase,
    DecisionVignette,
    GeoScenario,
    NeedleCase,
    Node,
    PersonaFact,
    PersonaSheet,
)
from .text import clause_parity, content_tokens, is_token_subsequence, tokenize
from .vocabulary import Vocabulary

FINAL_MARKER = "FINAL:"
PLAN_MARKER = "PLAN:"
DEFAULT_MATCH_TAU = 0.75
DEFAULT_QUERY_TOKEN_CAP = 60
DEFAULT_MAX_TURNS = 20

NO_INFO_REPLY = "No additional information."
STANDING_QUESTION = "What would you like to ask or do next?"


# ---------------------------------------------------------------------------
# Adapter contract
# ---------------------------------------------------------------------------


@dataclass
class ModelRequest:
    session_id: str
    system: str
    messages: list[tuple[str, str]]  # (role, text); roles: harness | model
    schema_hint: dict | None = None
    temperature: float = 0.0


@dataclass
class ModelResponse:
    text: str
    structured: dict | None = None
    latency_ms: float = 0.0


class HttpModelAdapter:
    """Candidate-model adapter speaking JSON over HTTP.

    One retry with exponential backoff on transport failure, then the
    session records a model_error termination.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        auth_token: str | None = None,
        temperature: float = 0.0,
        timeout: float = 60.0,
        backoff: float = 0.5,
    ):
        self.endpoint = endpoint
        self.model = model
        self.auth_token = auth_token
        self.temperature = temperature
        self.timeout = timeout
        self.backoff = backoff

    def complete(self, request: ModelRequest) -> ModelResponse:
        import requests

        payload = {
            "model": self.model,
            "session_id": request.session_id,
            "system": request.system,
            "messages": [{"role": r, "text": t} for r, t in request.messages],
            "temperature": request.temperature or self.temperature,
        }
        if request.schema_hint:
            payload["schema_hint"] = request.schema_hint
        headers = {}
        if self.auth_token:
            headers["Authorization"] = f"Bearer {self.auth_token}"

        last_exc = None
        for attempt in range(2):
            start = time.monotonic()
            try:
                resp = requests.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
                resp.raise_for_status()
                body = resp.json()
                return ModelResponse(
                    text=body.get("text", ""),
                    structured=body.get("structured"),
                    latency_ms=(time.monotonic() - start) * 1000.0,
                )
            except requests.RequestException as exc:
                last_exc = exc
                if attempt == 0:
                    time.sleep(self.backoff * (2**attempt))
        raise BackendError(f"model endpoint failed after retry: {last_exc}", retryable=False)


class ScriptedMockModel:
    """Deterministic mock: replies come from a script, in turn order.

    Script shapes:
      {"replies": [...]}                  one global reply sequence
      {"sessions": {session_id: [...]}}   per-session sequences
    A reply is a string or {"text": ..., "structured": {...}}.
    """

    def __init__(self, script: dict):
        self.global_replies = list(script.get("replies", []))
        self.sessions = {k: list(v) for k, v in script.get("sessions", {}).items()}
        self._cursors: dict[str, int] = {}
        self._global_cursor = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedMockModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))

    def _next_reply(self, session_id: str):
        with self._lock:
            if session_id in self.sessions:
                replies = self.sessions[session_id]
                cursor = self._cursors.get(session_id, 0)
                if cursor >= len(replies):
                    raise BackendError(f"mock script exhausted for session {session_id}")
                self._cursors[session_id] = cursor + 1
                return replies[cursor]
            if not self.global_replies:
                raise BackendError(f"mock script has no replies for session {session_id}")
            reply = self.global_replies[self._global_cursor % len(self.global_replies)]
            self._global_cursor += 1
            return reply

    def complete(self, request: ModelRequest) -> ModelResponse:
        reply = self._next_reply(request.session_id)
        if isinstance(reply, str):
            return ModelResponse(text=reply)
        return ModelResponse(text=reply.get("text", ""), structured=reply.get("structured"))


class CompletionBackend:
    """Single-shot text facade over a chat adapter, for generation calls."""

    def __init__(self, adapter, session_prefix: str = "gen", temperature: float = 0.0):
        self.adapter = adapter
        self.session_prefix = session_prefix
        self.temperature = temperature
        self._count = 0
        self._lock = threading.Lock()

    def generate(self, prompt: str) -> str:
        with self._lock:
            self._count += 1
            count = self._count
        request = ModelRequest(
            session_id=f"{self.session_prefix}-{count:04d}",
            system="",
            messages=[("harness", prompt)],
            temperature=self.temperature,
        )
        return self.adapter.complete(request).text


def adapter_from_config(config: dict):
    """Build an adapter from a config mapping (kind: mock | http)."""
    import os

    kind = config.get("kind")
    if kind == "mock":
        return ScriptedMockModel.from_file(config["script"])
    if kind == "http":
        token = None
        if config.get("auth_env"):
            token = os.environ.get(config["auth_env"])
        return HttpModelAdapter(
            endpoint=config["endpoint"],
            model=config.get("model", "default"),
            auth_token=token,
            temperature=config.get("temperature", 0.0),
            timeout=config.get("timeout", 60.0),
            backoff=config.get("backoff", 0.5),
        )
    raise ConfigurationError(f"unknown model adapter kind {config.get('kind')!r}")


# ---------------------------------------------------------------------------
# Transcript
# ---------------------------------------------------------------------------


@dataclass
class Turn:
    role: str  # harness | model
    text: str
    matched_node_ids: list[str] = field(default_factory=list)
    fact_ids: list[str] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    structured: dict | None = None
    truncated: bool = False
    timestamp: float = 0.0


@dataclass
class FinalAnswer:
    diagnoses: list[str] = field(default_factory=list)
    plan: str = ""
    structured: dict | None = None
    from_marker: bool = True


@dataclass
class Transcript:
    transcript_id: str
    scenario_kind: str
    scenario_id: str
    turns: list[Turn] = field(default_factory=list)
    final: FinalAnswer | None = None
    termination: str = "completed"  # completed | max_turns | model_error

    def model_turns(self) -> list[Turn]:
        return [t for t in self.turns if t.role == "model"]

    def to_json(self) -> dict:
        return {
            "transcript_id": self.transcript_id,
            "scenario_kind": self.scenario_kind,
            "scenario_id": self.scenario_id,
            "turns": [
                {
                    "role": t.role,
                    "text": t.text,
                    "matched_node_ids": t.matched_node_ids,
                    "fact_ids": t.fact_ids,
                    "events": t.events,
                    "structured": t.structured,
                    "truncated": t.truncated,
                    "timestamp": t.timestamp,
                }
                for t in self.turns
            ],
            "final": (
                {
                    "diagnoses": self.final.diagnoses,
                    "plan": self.final.plan,
                    "structured": self.final.structured,
                    "from_marker": self.final.from_marker,
                }
                if self.final
                else None
            ),
            "termination": self.termination,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Transcript":
        final = d.get("final")
        return cls(
            transcript_id=d["transcript_id"],
            scenario_kind=d["scenario_kind"],
            scenario_id=d["scenario_id"],
            turns=[Turn(**t) for t in d["turns"]],
            final=FinalAnswer(**final) if final else None,
            termination=d["termination"],
        )

    def all_model_text(self) -> str:
        return "\n".join(t.text for t in self.turns if t.role == "model")


def save_transcript(transcript: Transcript, path: str | Path) -> None:
    """JSONL: header record, one record per turn, footer with the final."""
    doc = transcript.to_json()
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "type": "header",
            "transcript_id": doc["transcript_id"],
            "scenario_kind": doc["scenario_kind"],
            "scenario_id": doc["scenario_id"],
        }
        fh.write(json.dumps(header, ensure_ascii=False) + "\n")
        for turn in doc["turns"]:
            fh.write(json.dumps({"type": "turn", **turn}, ensure_ascii=False) + "\n")
        footer = {"type": "final", "final": doc["final"], "termination": doc["termination"]}
        fh.write(json.dumps(footer, ensure_ascii=False) + "\n")


def load_transcript(path: str | Path) -> Transcript:
    header = None
    turns = []
    footer = None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            kind = record.pop("type")
            if kind == "header":
                header = record
            elif kind == "turn":
                turns.append(Turn(**record))
            elif kind == "final":
                footer = record
    if header is None or footer is None:
        raise ValueError(f"transcript file {path} missing header or footer")
    final = footer.get("final")
    return Transcript(
        transcript_id=header["transcript_id"],
        scenario_kind=header["scenario_kind"],
        scenario_id=header["scenario_id"],
        turns=turns,
        final=FinalAnswer(**final) if final else None,
        termination=footer["termination"],
    )


# ---------------------------------------------------------------------------
# Query/node matching
# ---------------------------------------------------------------------------


def match_query_to_nodes(
    query: str,
    nodes: list[Node],
    embedder: BuiltinEmbedder | None = None,
    tau: float = DEFAULT_MATCH_TAU,
) -> list[str]:
    """Node ids whose pattern, synonym, or embedded label matches the query."""
    if embedder is None:
        embedder = BuiltinEmbedder()
    query_tokens = tokenize(query)
    matched = []
    qvec = None
    for node in nodes:
        hit = False
        for pattern in node.patterns:
            if re.search(pattern, query, re.IGNORECASE):
                hit = True
                break
        if not hit:
            for phrase in [node.label] + node.synonyms:
                if is_token_subsequence(tokenize(phrase), query_tokens):
                    hit = True
                    break
        if not hit and query_tokens:
            if qvec is None:
                qvec = embedder.embed(query)
            if cosine(qvec, embedder.embed(node.label)) >= tau:
                hit = True
        if hit:
            matched.append(node.node_id)
    return matched


def truncate_to_tokens(text: str, cap: int) -> tuple[str, bool]:
    words = text.split()
    if len(words) <= cap:
        return text, False
    return " ".join(words[:cap]), True


def parse_final_text(text: str) -> FinalAnswer:
    """Parse 'FINAL: dx1, dx2 PLAN: ...' shaped conclusions."""
    body = text.split(FINAL_MARKER, 1)[1] if FINAL_MARKER in text else text
    if PLAN_MARKER in body:
        dx_part, plan = body.split(PLAN_MARKER, 1)
    else:
        dx_part, plan = body, ""
    diagnoses = [d.strip(" .;") for d in re.split(r",|\n|;", dx_part) if d.strip(" .;")]
    return FinalAnswer(diagnoses=diagnoses, plan=plan.strip(), from_marker=FINAL_MARKER in text)


def _final_from_response(response: ModelResponse, from_marker: bool = True) -> FinalAnswer:
    if response.structured and "diagnoses" in response.structured:
        return FinalAnswer(
            diagnoses=list(response.structured.get("diagnoses", [])),
            plan=response.structured.get("plan", ""),
            structured=response.structured,
            from_marker=from_marker,
        )
    parsed = parse_final_text(response.text)
    parsed.from_marker = from_marker and parsed.from_marker
    return parsed


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------

DECISION_SYSTEM = (
    "You are being assessed on stepwise clinical reasoning. Ask one focused "
    "question or request one examination/test per turn. When you are ready "
    'to conclude, reply with "FINAL: <diagnoses, most likely first> '
    'PLAN: <management plan>".'
)


def run_decision_session(
    vignette: DecisionVignette,
    model,
    clock=time.time,
    embedder: BuiltinEmbedder | None = None,
    tau: float = DEFAULT_MATCH_TAU,
) -> Transcript:
    """Iterative ask-to-reveal session over a decision vignette."""
    problems = vignette.validate()
    if problems:
        raise ValueError(f"invalid vignette {vignette.vignette_id}: {problems}")

    transcript = Transcript(
        transcript_id=f"t-decision-{vignette.vignette_id}",
        scenario_kind="decision",
        scenario_id=vignette.vignette_id,
    )
    opening = f"{vignette.narrative}\n\n{STANDING_QUESTION}"
    transcript.turns.append(Turn("harness", opening, timestamp=clock()))
    messages: list[tuple[str, str]] = [("harness", opening)]
    revealed: set[str] = set()

    for _ in range(vignette.max_turns):
        request = ModelRequest(
            session_id=transcript.transcript_id,
            system=DECISION_SYSTEM,
            messages=list(messages),
        )
        try:
            response = model.complete(request)
        except BackendError:
            transcript.termination = "model_error"
            return transcript

        if FINAL_MARKER in response.text or (
            response.structured and "diagnoses" in response.structured
        ):
            transcript.turns.append(Turn("model", response.text, timestamp=clock()))
            transcript.final = _final_from_response(response)
            transcript.termination = "completed"
            return transcript

        query, truncated = truncate_to_tokens(response.text, vignette.query_token_cap)
        events = ["query_truncated"] if truncated else []
        new_ids = [
            nid
            for nid in match_query_to_nodes(query, vignette.hidden_nodes, embedder, tau)
            if nid not in revealed
        ]
        revealed.update(new_ids)
        transcript.turns.append(
            Turn(
                "model",
                response.text,
                matched_node_ids=new_ids,
                events=events,
                truncated=truncated,
                timestamp=clock(),
            )
        )
        messages.append(("model", response.text))

        if new_ids:
            node_by_id = {n.node_id: n for n in vignette.hidden_nodes}
            reveal = " ".join(node_by_id[nid].reveal_text for nid in new_ids)
        else:
            reveal = NO_INFO_REPLY
        reply = f"{reveal}\n\n{STANDING_QUESTION}"
        transcript.turns.append(Turn("harness", reply, timestamp=clock()))
        messages.append(("harness", reply))

    # max turns reached: last model turn stands as the final answer, flagged.
    transcript.termination = "max_turns"
    model_turns = transcript.model_turns()
    if model_turns:
        final = parse_final_text(model_turns[-1].text)
        final.from_marker = False
        transcript.final = final
    return transcript


PERSONA_SYSTEM_TEMPLATE = (
    "You are the {caregiver_role} of the patient. Answer the clinician's "
    "questions truthfully and naturally, in first person, based only on the "
    "facts below. Stay in character; your overall mood is {affect}.\n\nFacts:\n{facts}"
)


def _fact_overlap(answer: str, fact: PersonaFact) -> bool:
    overlap = set(content_tokens(answer)) & set(content_tokens(fact.truthful_answer))
    return bool(overlap)


def detect_fact_events(
    answer: str, facts: list[PersonaFact], prior_answers: dict[str, str]
) -> tuple[list[str], list[str]]:
    """(addressed fact ids, contradiction events) for one persona answer.

    Rule-based: a fact is addressed when the answer shares a content token
    with its truthful answer; a contradiction is an addressed fact whose
    negation parity disagrees with the card, or with an earlier answer
    about the same fact. Crude by design; human review remains the
    backstop for subtle inconsistency.
    """
    addressed = []
    contradictions = []
    for fact in facts:
        if not _fact_overlap(answer, fact):
            continue
        addressed.append(fact.fact_id)
        overlap = set(content_tokens(answer)) & set(content_tokens(fact.truthful_answer))
        truth_parity = clause_parity(fact.truthful_answer, overlap)
        answer_parity = clause_parity(answer, overlap)
        if truth_parity is not None and answer_parity is not None and truth_parity != answer_parity:
            contradictions.append(f"contradiction:{fact.fact_id}")
            continue
        prior = prior_answers.get(fact.fact_id)
        if prior is not None:
            prior_overlap = set(content_tokens(prior)) & set(content_tokens(fact.truthful_answer))
            prior_parity = clause_parity(prior, prior_overlap or overlap)
            if (
                prior_parity is not None
                and answer_parity is not None
                and prior_parity != answer_parity
            ):
                contradictions.append(f"contradiction:{fact.fact_id}")
    return addressed, contradictions


def run_reverse_session(
    persona: PersonaSheet,
    clinician_script: list[dict],
    model,
    clock=time.time,
) -> Transcript:
    """Scripted clinician interview of a model playing the caregiver.

    Script items: {"question": str, "fact_ids": [ids the question targets]}.
    """
    if not 6 <= len(clinician_script) <= 10:
        raise ValueError("clinician script must have 6-10 questions")
    problems = persona.validate()
    if problems:
        raise ValueError(f"invalid persona {persona.persona_id}: {problems}")

    facts_text = "\n".join(f"- {f.topic}: {f.truthful_answer}" for f in persona.facts)
    system = PERSONA_SYSTEM_TEMPLATE.format(
        caregiver_role=persona.demographics.get("caregiver_role", "caregiver"),
        affect=persona.affect,
        facts=facts_text,
    )

    transcript = Transcript(
        transcript_id=f"t-reverse-{persona.persona_id}",
        scenario_kind="reverse",
        scenario_id=persona.persona_id,
    )
    messages: list[tuple[str, str]] = []
    fact_by_id = {f.fact_id: f for f in persona.facts}
    prior_answers: dict[str, str] = {}

    for item in clinician_script:
        question = item["question"]
        target_ids = list(item.get("fact_ids", []))
        transcript.turns.append(
            Turn("harness", question, fact_ids=target_ids, timestamp=clock())
        )
        messages.append(("harness", question))
        request = ModelRequest(
            session_id=transcript.transcript_id, system=system, messages=list(messages)
        )
        try:
            response = model.complete(request)
        except BackendError:
            transcript.termination = "model_error"
            return transcript

        targets = [fact_by_id[fid] for fid in target_ids if fid in fact_by_id]
        addressed, contradictions = detect_fact_events(
            response.text, targets, prior_answers
        )
        for fid in addressed:
            prior_answers.setdefault(fid, response.text)
        transcript.turns.append(
            Turn(
                "model",
                response.text,
                fact_ids=addressed,
                events=contradictions,
                timestamp=clock(),
            )
        )
        messages.append(("model", response.text))

    transcript.termination = "completed"
    return transcript


BIAS_STAGE1_QUESTION = "Given the information so far, what is your working diagnosis?"
BIAS_STAGE2_QUESTION = "Now update your diagnosis and plan."
BIAS_SCHEMA_HINT = {
    "diagnoses": ["ranked differential, most likely first"],
    "actions": ["confirmatory tests or management steps"],
    "plan": "management plan",
}


def run_bias_session(case: BiasCase, model, clock=time.time) -> Transcript:
    """Two-stage anchor-and-flip session; exactly two model turns."""
    if not case.stage2_redflag.strip():
        raise ValueError("stage2 red-flag detail must be non-empty")
    problems = case.validate()
    if problems:
        raise ValueError(f"invalid bias case {case.case_id}: {problems}")

    transcript = Transcript(
        transcript_id=f"t-bias-{case.case_id}",
        scenario_kind="bias",
        scenario_id=case.case_id,
    )
    stage1 = f"{case.stage1_narrative}\n\n{BIAS_STAGE1_QUESTION}"
    transcript.turns.append(Turn("harness", stage1, timestamp=clock()))
    messages = [("harness", stage1)]
    try:
        first = model.complete(
            ModelRequest(
                session_id=transcript.transcript_id,
                system="",
                messages=list(messages),
                schema_hint=BIAS_SCHEMA_HINT,
            )
        )
    except BackendError:
        transcript.termination = "model_error"
        return transcript
    transcript.turns.append(
        Turn("model", first.text, structured=first.structured, timestamp=clock())
    )
    messages.append(("model", first.text))

    stage2 = f"New information: {case.stage2_redflag}\n\n{BIAS_STAGE2_QUESTION}"
    transcript.turns.append(Turn("harness", stage2, timestamp=clock()))
    messages.append(("harness", stage2))
    try:
        second = model.complete(
            ModelRequest(
                session_id=transcript.transcript_id,
                system="",
                messages=list(messages),
                schema_hint=BIAS_SCHEMA_HINT,
            )
        )
    except BackendError:
        transcript.termination = "model_error"
        return transcript
    transcript.turns.append(
        Turn("model", second.text, structured=second.structured, timestamp=clock())
    )

    transcript.final = _final_from_response(second, from_marker=False)
    transcript.termination = "completed"
    return transcript


GEO_SCHEMA_HINT = {
    "antigens": ["vaccine names due today"],
    "formulation": "combination product name",
    "counselling": "counselling text",
}


@dataclass
class GeoAnswer:
    antigens: set[str]
    formulation: str
    counselling: str
    extraction: str  # structured | extracted


def run_geo_query(
    scenario: GeoScenario,
    model,
    vocab: Vocabulary | None = None,
    clock=time.time,
    session_id: str | None = None,
) -> tuple[GeoAnswer, Transcript]:
    """One-shot locale question with structured-answer extraction fallback."""
    if vocab is None:
        vocab = Vocabulary.load()
    transcript = Transcript(
        transcript_id=session_id or f"t-geo-{scenario.locale.replace(' ', '_')}",
        scenario_kind="geo",
        scenario_id=scenario.locale,
    )
    transcript.turns.append(Turn("harness", scenario.narrative, timestamp=clock()))
    try:
        response = model.complete(
            ModelRequest(
                session_id=transcript.transcript_id,
                system="",
                messages=[("harness", scenario.narrative)],
                schema_hint=GEO_SCHEMA_HINT,
            )
        )
    except BackendError:
        transcript.termination = "model_error"
        empty = GeoAnswer(set(), "", "", "extracted")
        return empty, transcript
    transcript.turns.append(
        Turn("model", response.text, structured=response.structured, timestamp=clock())
    )

    if response.structured and "antigens" in response.structured:
        answer = GeoAnswer(
            antigens={vocab.canonical(a) for a in response.structured.get("antigens", [])},
            formulation=response.structured.get("formulation", ""),
            counselling=response.structured.get("counselling", response.text),
            extraction="structured",
        )
    else:
        labels = vocab.match_labels(response.text, kind="antigen")
        formulations = sorted(vocab.match_labels(response.text, kind="formulation"))
        answer = GeoAnswer(
            antigens={vocab.canonical(a) for a in labels},
            formulation=formulations[0] if formulations else "",
            counselling=response.text,
            extraction="extracted",
        )
    transcript.final = FinalAnswer(
        diagnoses=[], plan=answer.counselling, structured=response.structured, from_marker=False
    )
    transcript.termination = "completed"
    return answer, transcript


NEEDLE_PROMPT_SUFFIX = (
    'Give your assessment as "FINAL: <top differential diagnoses, most '
    'likely first> PLAN: <management plan>".'
)


def run_needle_query(case: NeedleCase, model, clock=time.time) -> Transcript:
    """One-shot long-vignette assessment for needle scoring."""
    transcript = Transcript(
        transcript_id=f"t-needle-{case.case_id}",
        scenario_kind="needle",
        scenario_id=case.case_id,
    )
    prompt = f"{case.narrative}\n\n{NEEDLE_PROMPT_SUFFIX}"
    transcript.turns.append(Turn("harness", prompt, timestamp=clock()))
    try:
        response = model.complete(
            ModelRequest(
                session_id=transcript.transcript_id,
                system="",
                messages=[("harness", prompt)],
            )
        )
    except BackendError:
        transcript.termination = "model_error"
        return transcript
    transcript.turns.append(Turn("model", response.text, timestamp=clock()))
    transcript.final = _final_from_response(response)
    transcript.termination = "completed"
    return transcript
