"""Question generation: prompt assembly, MCQ grammar parsing, auditing,
quota balancing, and translation.

The output grammar the backend must follow is strict and line-oriented:

    Question: <question text>
    A) <option>
    B) <option>
    C) <option>
    D) <option>
    Correct: <letter>

Parsing is a single forward pass; malformed blocks are skipped with a
diagnostic naming the first violated rule.
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field, replace

from .corpus import ChangeSet, GuidelineChunk
from .errors import BackendError, McqParseError, StateError
from .text import content_tokens, fnv1a_64, looks_swahili

OPTION_KEYS = ("A", "B", "C", "D")

STATUSES = ("draft", "audited", "in_review", "accepted", "revise", "rejected", "stale")

# Legal lifecycle moves; any status may additionally move to "stale" when a
# guideline update invalidates the cited chunk.
_TRANSITIONS = {
    "draft": {"audited", "stale"},
    "audited": {"in_review", "stale"},
    "in_review": {"accepted", "revise", "rejected", "stale"},
    "accepted": {"stale"},
    "revise": {"stale"},
    "rejected": {"stale"},
    "stale": set(),
}

CASE_PROMPT_TEMPLATE = '''You are a Kenyan healthcare expert who is a post-doctorate level exam constructor.

Create {n} Kenyan healthcare training vignettes. For each vignette:

- 2-3-sentence scenario in a realistic Kenyan setting.
- ONE MCQ in the exact format:

Question: <question text>
A) <option>
B) <option>
C) <option>
D) <option>
Correct: <letter>

End every MCQ with "Correct:".

Paragraph:

"""{paragraph}"""'''


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass
class Citation:
    chunk_id: str
    page_start: int
    page_end: int


@dataclass
class McqItem:
    """A multiple-choice item with provenance and review lifecycle state."""

    item_id: str
    question: str
    options: dict[str, str]
    correct: str
    explanation: str = ""
    citation: Citation | None = None
    language: str = "en"
    part_label: str = ""
    guideline_version: str = ""
    status: str = "draft"
    source_item_id: str | None = None

    def __post_init__(self):
        if set(self.options) != set(OPTION_KEYS):
            raise ValueError("options must be keyed exactly A-D")
        if self.correct not in OPTION_KEYS:
            raise ValueError("correct letter must be one of A-D")
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")

    def to_json(self) -> dict:
        return {
            "item_id": self.item_id,
            "question": self.question,
            "options": dict(self.options),
            "correct": self.correct,
            "explanation": self.explanation,
            "citation": (
                {
                    "chunk_id": self.citation.chunk_id,
                    "page_start": self.citation.page_start,
                    "page_end": self.citation.page_end,
                }
                if self.citation
                else None
            ),
            "language": self.language,
            "part_label": self.part_label,
            "guideline_version": self.guideline_version,
            "status": self.status,
            "source_item_id": self.source_item_id,
        }

    @classmethod
    def from_json(cls, record: dict) -> "McqItem":
        citation = record.get("citation")
        return cls(
            item_id=record["item_id"],
            question=record["question"],
            options=dict(record["options"]),
            correct=record["correct"],
            explanation=record.get("explanation", ""),
            citation=Citation(**citation) if citation else None,
            language=record.get("language", "en"),
            part_label=record.get("part_label", ""),
            guideline_version=record.get("guideline_version", ""),
            status=record.get("status", "draft"),
            source_item_id=record.get("source_item_id"),
        )


@dataclass
class GenerationConfig:
    n_per_chunk: int = 1
    temperature: float = 0.0
    quota_caps: dict[str, int] = field(default_factory=dict)
    translate_fraction: float = 0.10


@dataclass
class AuditResult:
    passed: bool
    item: McqItem | None
    reasons: list[str] = field(default_factory=list)


def transition_status(item: McqItem, new_status: str) -> McqItem:
    """Return a copy of the item moved to ``new_status``; illegal moves raise."""
    if new_status not in _TRANSITIONS.get(item.status, set()):
        raise StateError(f"illegal status transition {item.status} -> {new_status}")
    return replace(item, status=new_status)


# ---------------------------------------------------------------------------
# Prompt assembly
# ---------------------------------------------------------------------------


def escape_paragraph(paragraph: str) -> str:
    """Escape so the triple-quote fence around the paragraph survives."""
    return paragraph.replace("\\", "\\\\").replace('"', '\\"')


def unescape_paragraph(escaped: str) -> str:
    return escaped.replace('\\"', '"').replace("\\\\", "\\")


def build_case_prompt(n: int, paragraph: str) -> str:
    """Render the vignette-generation prompt for one guideline paragraph."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not paragraph.strip():
        raise ValueError("paragraph must be non-empty")
    return CASE_PROMPT_TEMPLATE.format(n=n, paragraph=escape_paragraph(paragraph))


def extract_prompt_paragraph(prompt: str) -> str:
    """Recover the embedded paragraph from a rendered prompt (test hook)."""
    match = re.search(r'"""(.*)"""', prompt, re.DOTALL)
    if not match:
        raise ValueError("prompt has no paragraph fence")
    return unescape_paragraph(match.group(1))


# ---------------------------------------------------------------------------
# MCQ grammar: parse and render
# ---------------------------------------------------------------------------

_QUESTION_RE = re.compile(r"^Question:\s*(.+)$")
_OPTION_RE = re.compile(r"^([A-D])\)\s*(.+)$")
_CORRECT_RE = re.compile(r"^Correct:\s*([A-Za-z])\s*\.?\s*$")


def parse_mcq_output(raw: str) -> tuple[list[McqItem], list[str]]:
    """Parse backend text into draft items plus diagnostics.

    Single forward pass over lines. Each well-formed block (Question line,
    option lines A) through D) in order, Correct line with one letter)
    yields a draft item. A malformed block is skipped with a diagnostic
    naming the first violated rule. Raises McqParseError when no block
    parses at all.
    """
    lines = raw.splitlines()
    items: list[McqItem] = []
    diagnostics: list[str] = []
    i = 0
    n = len(lines)
    while i < n:
        line = lines[i].strip()
        qmatch = _QUESTION_RE.match(line)
        if not qmatch:
            i += 1
            continue
        block_start = i + 1  # 1-based for diagnostics
        question = qmatch.group(1).strip()
        i += 1

        options: dict[str, str] = {}
        failure: str | None = None
        expected = list(OPTION_KEYS)
        while expected and i < n:
            line = lines[i].strip()
            if not line:
                i += 1
                continue
            omatch = _OPTION_RE.match(line)
            if not omatch:
                failure = f"missing option {expected[0]}"
                break
            letter, text = omatch.group(1), omatch.group(2).strip()
            if letter != expected[0]:
                if letter in options:
                    failure = f"duplicate option {letter}"
                else:
                    failure = f"missing option {expected[0]}"
                break
            options[letter] = text
            expected.pop(0)
            i += 1
        if failure is None and expected:
            failure = f"missing option {expected[0]}"

        correct: str | None = None
        if failure is None:
            while i < n and not lines[i].strip():
                i += 1
            if i >= n or not lines[i].strip().startswith("Correct:"):
                failure = "missing Correct terminator"
            else:
                cmatch = _CORRECT_RE.match(lines[i].strip())
                i += 1
                if not cmatch:
                    failure = "malformed Correct line"
                else:
                    letter = cmatch.group(1).upper()
                    if letter not in OPTION_KEYS:
                        failure = f"correct letter {letter} outside A-D"
                    else:
                        correct = letter

        if failure is not None:
            diagnostics.append(f"block at line {block_start}: {failure}")
            continue

        items.append(
            McqItem(
                item_id=make_item_id("", question, correct),
                question=question,
                options=options,
                correct=correct,
            )
        )

    if not items:
        if not diagnostics:
            diagnostics.append("no Question blocks found")
        raise McqParseError(diagnostics)
    return items, diagnostics


def render_mcq_block(item: McqItem) -> str:
    """Render an item back into the strict output grammar."""
    lines = [f"Question: {item.question}"]
    for key in OPTION_KEYS:
        lines.append(f"{key}) {item.options[key]}")
    lines.append(f"Correct: {item.correct}")
    return "\n".join(lines)


def make_item_id(chunk_id: str, question: str, correct: str) -> str:
    return f"mcq-{fnv1a_64(f'{chunk_id}|{question}|{correct}'):016x}"


# ---------------------------------------------------------------------------
# Audit
# ---------------------------------------------------------------------------

_IMPERATIVE_STEMS = frozenset(
    "select choose identify name state list give outline describe calculate determine".split()
)


def _question_shape_ok(question: str) -> bool:
    q = question.strip()
    if not q:
        return False
    if q.endswith("?") or q.endswith(":"):
        return True
    first = q.split()[0].lower()
    return first in _IMPERATIVE_STEMS


def audit_item(item: McqItem, chunk: GuidelineChunk) -> AuditResult:
    """First-pass deterministic audit of a draft item against its chunk.

    Checks: four distinct non-empty options; question interrogative or
    imperative; the correct option shares at least one content token with
    the cited chunk; the language tag matches the detected script. Deeper
    semantic review is the human reviewers' job.
    """
    if item.status != "draft":
        raise StateError(f"audit requires a draft item, got {item.status}")

    reasons: list[str] = []

    texts = [item.options[k].strip() for k in OPTION_KEYS]
    if any(not t for t in texts):
        reasons.append("empty option")
    if len({t.lower() for t in texts}) != len(texts):
        reasons.append("duplicate options")

    if not _question_shape_ok(item.question):
        reasons.append("question not interrogative or imperative")

    correct_tokens = set(content_tokens(item.options[item.correct]))
    chunk_tokens = set(content_tokens(chunk.text))
    if not (correct_tokens & chunk_tokens):
        reasons.append("correct option shares no content token with cited chunk")

    detected = "sw" if looks_swahili(item.question + " " + " ".join(texts)) else "en"
    if detected != item.language:
        reasons.append(f"language tag {item.language!r} does not match detected {detected!r}")

    if reasons:
        return AuditResult(False, None, reasons)
    return AuditResult(True, transition_status(item, "audited"), [])


# ---------------------------------------------------------------------------
# Quota balancing
# ---------------------------------------------------------------------------


def _apply_caps(items: list[McqItem], caps: dict[str, int]) -> list[McqItem]:
    kept: list[McqItem] = []
    counts: dict[str, int] = {}
    for item in sorted(items, key=lambda it: it.item_id):
        cap = caps.get(item.part_label, 0)
        have = counts.get(item.part_label, 0)
        if have < cap:
            counts[item.part_label] = have + 1
            kept.append(item)
    return kept


def enforce_quota(
    items: list[McqItem], distribution: dict[str, float], total_cap: int
) -> list[McqItem]:
    """Cap per-part item counts proportionally to the content distribution.

    Per-part cap is ceil(fraction * total_cap); retention order is
    item_id-ascending within each part, so the operation is deterministic
    and idempotent.
    """
    total = sum(distribution.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"distribution fractions sum to {total}, expected 1.0")
    if total_cap < 1:
        raise ValueError("total_cap must be >= 1")
    import math

    caps = {part: math.ceil(frac * total_cap) for part, frac in distribution.items()}
    return _apply_caps(items, caps)


# ---------------------------------------------------------------------------
# Translation
# ---------------------------------------------------------------------------

TRANSLATE_PROMPT_TEMPLATE = (
    "Translate the following multiple-choice question into Kiswahili. "
    "Keep the same option order and the same correct letter. Reply with "
    "exactly one block in the same format (Question:, A) to D), Correct:).\n\n{block}"
)


def translate_item(item: McqItem, target: str, backend) -> McqItem:
    """Produce a linked Kiswahili variant of an audited or accepted item."""
    if target != "sw":
        raise ValueError(f"unsupported translation target {target!r}")
    if item.language != "en":
        raise StateError("only English items can be translated")
    if item.status not in ("audited", "accepted"):
        raise StateError(f"item must be audited or accepted, got {item.status}")

    prompt = TRANSLATE_PROMPT_TEMPLATE.format(block=render_mcq_block(item))
    raw = backend.generate(prompt)
    try:
        blocks, _ = parse_mcq_output(raw)
    except McqParseError as exc:
        raise McqParseError([f"translation output unparseable: {d}" for d in exc.diagnostics])
    if len(blocks) != 1:
        raise McqParseError([f"translation returned {len(blocks)} blocks, expected 1"])
    translated = blocks[0]
    return McqItem(
        item_id=f"{item.item_id}-sw",
        question=translated.question,
        options=translated.options,
        correct=item.correct,
        explanation="",
        citation=item.citation,
        language="sw",
        part_label=item.part_label,
        guideline_version=item.guideline_version,
        status="in_review",
        source_item_id=item.item_id,
    )


def select_for_translation(items: list[McqItem], fraction: float, seed: int) -> list[McqItem]:
    """Seeded-deterministic subset of items to translate."""
    import random

    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0,1]")
    eligible = sorted(
        (it for it in items if it.language == "en" and it.status in ("audited", "accepted")),
        key=lambda it: it.item_id,
    )
    count = int(len(eligible) * fraction)
    rng = random.Random(seed)
    return sorted(rng.sample(eligible, count), key=lambda it: it.item_id)


# ---------------------------------------------------------------------------
# Batch generation
# ---------------------------------------------------------------------------


@dataclass
class BatchReport:
    items: list[McqItem]
    diagnostics: list[str] = field(default_factory=list)
    failed_chunks: list[str] = field(default_factory=list)
    rejected: int = 0


def _call_backend_per_chunk(
    chunks: list[GuidelineChunk], backend, n_per_chunk: int, parallelism: int
) -> list[str | BackendError]:
    """Backend text (or the failure) per chunk, in chunk order.

    Calls run concurrently up to ``parallelism``; ordering of the result
    list always follows the input. Scripted mocks with a single global
    reply sequence should stay at parallelism 1.
    """
    prompts = [build_case_prompt(n_per_chunk, chunk.text) for chunk in chunks]

    def one(prompt: str) -> str | BackendError:
        try:
            return backend.generate(prompt)
        except BackendError as exc:
            return exc

    if parallelism <= 1:
        return [one(p) for p in prompts]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, prompts))


def generate_batch(
    chunks: list[GuidelineChunk],
    backend,
    config: GenerationConfig,
    guideline_version: str = "unversioned",
    parallelism: int = 1,
) -> BatchReport:
    """Prompt, parse, audit, and quota-balance items for a chunk list.

    Per-chunk backend failures are logged and skipped; the batch fails
    only if every chunk fails.
    """
    if not chunks:
        raise ValueError("chunks must be non-empty")

    audited: list[McqItem] = []
    diagnostics: list[str] = []
    failed: list[str] = []
    rejected = 0

    raw_replies = _call_backend_per_chunk(chunks, backend, config.n_per_chunk, parallelism)
    for chunk, raw in zip(chunks, raw_replies):
        if isinstance(raw, BackendError):
            diagnostics.append(f"chunk {chunk.chunk_id}: backend failure: {raw}")
            failed.append(chunk.chunk_id)
            continue
        try:
            drafts, parse_diags = parse_mcq_output(raw)
        except McqParseError as exc:
            diagnostics.extend(f"chunk {chunk.chunk_id}: {d}" for d in exc.diagnostics)
            failed.append(chunk.chunk_id)
            continue
        diagnostics.extend(f"chunk {chunk.chunk_id}: {d}" for d in parse_diags)
        for draft in drafts:
            draft = replace(
                draft,
                item_id=make_item_id(chunk.chunk_id, draft.question, draft.correct),
                citation=Citation(chunk.chunk_id, chunk.page_start, chunk.page_end),
                part_label=chunk.section_path[0] if chunk.section_path else "",
                guideline_version=guideline_version,
            )
            result = audit_item(draft, chunk)
            if result.passed:
                audited.append(result.item)
            else:
                rejected += 1
                diagnostics.append(
                    f"item {draft.item_id} rejected: " + "; ".join(result.reasons)
                )

    if len(failed) == len(chunks):
        raise BackendError("all chunks failed generation: " + "; ".join(diagnostics))

    if config.quota_caps:
        audited = _apply_caps(audited, config.quota_caps)
    return BatchReport(items=audited, diagnostics=diagnostics, failed_chunks=failed, rejected=rejected)


def mark_stale(items: list[McqItem], changes: ChangeSet) -> list[McqItem]:
    """Items whose citation chunk was removed or modified become stale."""
    gone = set(changes.removed) | {old for old, _ in changes.modified}
    out = []
    for item in items:
        if item.citation and item.citation.chunk_id in gone and item.status != "stale":
            out.append(transition_status(item, "stale"))
        else:
            out.append(item)
    return out


# ---------------------------------------------------------------------------
# Item store (JSONL) and status audit log
# ---------------------------------------------------------------------------


def save_items(items: list[McqItem], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item.to_json(), ensure_ascii=False) + "\n")


def load_items(path) -> list[McqItem]:
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                items.append(McqItem.from_json(json.loads(line)))
    return items


def append_status_log(path, item_id: str, old: str, new: str, actor: str, timestamp: float | None = None) -> None:
    entry = {
        "item_id": item_id,
        "old_status": old,
        "new_status": new,
        "timestamp": timestamp if timestamp is not None else time.time(),
        "actor": actor,
    }
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry) + "\n")
