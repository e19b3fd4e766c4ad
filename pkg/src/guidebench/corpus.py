"""Guideline ingestion: chunking, content distribution, version diffing.

Input is a plain-text interchange format with explicit structure markers
(no OCR or PDF handling here):

    #PART <title>          top-level part heading
    ##SECTION <title>      chapter/section heading
    ###SUBSECTION <title>  subsection heading
    [[page=N]]             page marker, inline or on its own line

Paragraphs are blank-line separated. Chunks split at the deepest heading
level, merge adjacent under-length sub-chunks, and split over-length
paragraphs at sentence boundaries.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import EmptyInputError, StructuralError
from .text import collapse_ws, content_hash, fnv1a_64, sentences, word_count

DEFAULT_MIN_WORDS = 40
DEFAULT_MAX_WORDS = 400

FRONT_MATTER_PART = "Front Matter"

_PAGE_RE = re.compile(r"\[\[page=([^\]]*)\]\]")


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass
class PartHeading:
    label: str
    title: str


@dataclass
class GuidelineDoc:
    """Identity record for an ingested guideline."""

    doc_id: str
    title: str
    publisher: str
    version_tag: str
    parts: list[PartHeading] = field(default_factory=list)
    source_uri: str = ""

    def __post_init__(self):
        if not self.doc_id:
            raise ValueError("doc_id must be non-empty")
        if not self.version_tag:
            raise ValueError("version_tag must be non-empty")


@dataclass
class GuidelineChunk:
    """A semantically coherent guideline excerpt; the retrieval unit."""

    chunk_id: str
    doc_id: str
    section_path: list[str]
    page_start: int
    page_end: int
    text: str
    word_count: int
    content_hash: int

    def to_json(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "doc_id": self.doc_id,
            "section_path": list(self.section_path),
            "page_start": self.page_start,
            "page_end": self.page_end,
            "text": self.text,
            "word_count": self.word_count,
            "content_hash": self.content_hash,
        }

    @classmethod
    def from_json(cls, record: dict) -> "GuidelineChunk":
        return cls(
            chunk_id=record["chunk_id"],
            doc_id=record["doc_id"],
            section_path=list(record["section_path"]),
            page_start=record["page_start"],
            page_end=record["page_end"],
            text=record["text"],
            word_count=record["word_count"],
            content_hash=record["content_hash"],
        )


@dataclass
class ChangeSet:
    """Difference between two chunked versions of the same guideline."""

    added: list[str] = field(default_factory=list)
    removed: list[str] = field(default_factory=list)
    modified: list[tuple[str, str]] = field(default_factory=list)
    affected_items: list[str] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not (self.added or self.removed or self.modified)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


@dataclass
class _Paragraph:
    section_path: tuple[str, ...]
    page_start: int
    page_end: int
    text: str


def _parse_marker_text(doc_text: str) -> list[_Paragraph]:
    """Parse marker-format text into paragraphs tagged with section path
    and page range. Raises StructuralError on malformed structure."""
    part: str | None = None
    section: str | None = None
    subsection: str | None = None
    page = 1

    paragraphs: list[_Paragraph] = []
    buf: list[str] = []
    buf_page_start = page

    def flush():
        nonlocal buf
        text = collapse_ws(" ".join(buf))
        if text:
            path = tuple(
                p for p in (part or FRONT_MATTER_PART, section, subsection) if p
            )
            paragraphs.append(_Paragraph(path, buf_page_start, page, text))
        buf = []

    for lineno, raw in enumerate(doc_text.splitlines(), start=1):
        line = raw.rstrip()
        stripped = line.strip()

        if stripped.startswith("#"):
            flush()
            if stripped.startswith("###SUBSECTION"):
                title = stripped[len("###SUBSECTION"):].strip()
                if not title:
                    raise StructuralError("subsection heading has no title", lineno)
                if section is None:
                    raise StructuralError(
                        f"orphan subsection {title!r} (no enclosing ##SECTION)", lineno
                    )
                subsection = title
            elif stripped.startswith("##SECTION"):
                title = stripped[len("##SECTION"):].strip()
                if not title:
                    raise StructuralError("section heading has no title", lineno)
                if part is None:
                    raise StructuralError(
                        f"orphan section {title!r} (no enclosing #PART)", lineno
                    )
                section = title
                subsection = None
            elif stripped.startswith("#PART"):
                title = stripped[len("#PART"):].strip()
                if not title:
                    raise StructuralError("part heading has no title", lineno)
                part = title
                section = None
                subsection = None
            else:
                raise StructuralError(
                    f"unrecognized heading marker {stripped.split()[0]!r}", lineno
                )
            continue

        # Page markers may sit on their own line or inline in a paragraph.
        page_at_line_start = page

        def _advance(match: re.Match) -> str:
            nonlocal page
            value = match.group(1)
            if not value.isdigit() or int(value) < 1:
                raise StructuralError(f"malformed page marker [[page={value}]]", lineno)
            page = int(value)
            return " "

        line_wo_pages = _PAGE_RE.sub(_advance, line).strip()

        if not line_wo_pages:
            flush()
            continue

        if not buf:
            buf_page_start = page_at_line_start
        buf.append(line_wo_pages)

    flush()
    return paragraphs


# ---------------------------------------------------------------------------
# Chunking
# ---------------------------------------------------------------------------


def _split_oversized(par: _Paragraph, max_words: int) -> list[_Paragraph]:
    """Split a paragraph above max_words at sentence boundaries. A single
    indivisible sentence may still exceed the cap."""
    if word_count(par.text) <= max_words:
        return [par]
    pieces: list[_Paragraph] = []
    buf: list[str] = []
    buf_words = 0
    for sent in sentences(par.text):
        w = word_count(sent)
        if buf and buf_words + w > max_words:
            pieces.append(
                _Paragraph(par.section_path, par.page_start, par.page_end, " ".join(buf))
            )
            buf, buf_words = [], 0
        buf.append(sent)
        buf_words += w
    if buf:
        pieces.append(
            _Paragraph(par.section_path, par.page_start, par.page_end, " ".join(buf))
        )
    return pieces


@dataclass
class _Draft:
    section_path: tuple[str, ...]
    page_start: int
    page_end: int
    parts: list[str]
    words: int


def _mergeable(a: tuple[str, ...], b: tuple[str, ...]) -> tuple[str, ...] | None:
    """Merged section path for adjacent chunks, or None if incompatible.

    Compatible: identical paths, sibling leaves, or parent/child adjacency.
    """
    if a == b:
        return a
    if len(a) == len(b) and a[:-1] == b[:-1]:
        return a[:-1] if a[:-1] else None
    if a == b[: len(a)]:
        return a
    if b == a[: len(b)]:
        return b
    return None


def chunk_document(
    doc_text: str,
    doc_id: str = "doc",
    *,
    max_words: int = DEFAULT_MAX_WORDS,
    min_words: int = DEFAULT_MIN_WORDS,
) -> list[GuidelineChunk]:
    """Chunk marker-format guideline text into provenance-tagged chunks.

    Splits at the deepest heading level, packs paragraphs up to
    ``max_words``, merges adjacent sub-chunks under ``min_words``, and
    splits over-length paragraphs at sentence boundaries.
    """
    if not doc_text or not doc_text.strip():
        raise EmptyInputError("document text is empty")
    if max_words < min_words or min_words < 1:
        raise ValueError("require max_words >= min_words >= 1")

    paragraphs = _parse_marker_text(doc_text)
    if not paragraphs:
        raise EmptyInputError("document has no body text")

    split_pars: list[_Paragraph] = []
    for par in paragraphs:
        split_pars.extend(_split_oversized(par, max_words))

    # Pack consecutive same-path paragraphs greedily up to max_words.
    drafts: list[_Draft] = []
    for par in split_pars:
        w = word_count(par.text)
        last = drafts[-1] if drafts else None
        if (
            last is not None
            and last.section_path == par.section_path
            and last.words + w <= max_words
        ):
            last.parts.append(par.text)
            last.words += w
            last.page_end = max(last.page_end, par.page_end)
        else:
            drafts.append(
                _Draft(par.section_path, par.page_start, par.page_end, [par.text], w)
            )

    # Merge adjacent under-length sub-chunks where paths are compatible.
    i = 0
    while i < len(drafts):
        d = drafts[i]
        if d.words >= min_words:
            i += 1
            continue
        merged = False
        if i + 1 < len(drafts):
            path = _mergeable(d.section_path, drafts[i + 1].section_path)
            if path is not None and d.words + drafts[i + 1].words <= max_words:
                nxt = drafts.pop(i + 1)
                d.section_path = path
                d.parts.extend(nxt.parts)
                d.words += nxt.words
                d.page_start = min(d.page_start, nxt.page_start)
                d.page_end = max(d.page_end, nxt.page_end)
                merged = True
        if not merged and i > 0:
            prev = drafts[i - 1]
            path = _mergeable(prev.section_path, d.section_path)
            if path is not None and prev.words + d.words <= max_words:
                drafts.pop(i)
                prev.section_path = path
                prev.parts.extend(d.parts)
                prev.words += d.words
                prev.page_start = min(prev.page_start, d.page_start)
                prev.page_end = max(prev.page_end, d.page_end)
                i -= 1
                merged = True
        if not merged:
            i += 1

    # Materialize chunks with deterministic ids.
    ordinals: dict[tuple[str, ...], int] = {}
    chunks: list[GuidelineChunk] = []
    for d in drafts:
        ordinal = ordinals.get(d.section_path, 0)
        ordinals[d.section_path] = ordinal + 1
        text = "\n\n".join(d.parts)
        chunks.append(
            GuidelineChunk(
                chunk_id=make_chunk_id(doc_id, d.section_path, ordinal),
                doc_id=doc_id,
                section_path=list(d.section_path),
                page_start=d.page_start,
                page_end=d.page_end,
                text=text,
                word_count=word_count(text),
                content_hash=content_hash(text),
            )
        )
    return chunks


def make_chunk_id(doc_id: str, section_path: tuple[str, ...] | list[str], ordinal: int) -> str:
    """Deterministic chunk id from (doc_id, section_path, ordinal)."""
    path_hash = fnv1a_64("\x1f".join(section_path))
    return f"{doc_id}-{path_hash:016x}-{ordinal:03d}"


# ---------------------------------------------------------------------------
# Distribution and diffing
# ---------------------------------------------------------------------------


def part_distribution(chunks: list[GuidelineChunk]) -> dict[str, float]:
    """Fraction of total word count per top-level part label."""
    if not chunks:
        raise EmptyInputError("no chunks to summarize")
    totals: dict[str, int] = {}
    for chunk in chunks:
        label = chunk.section_path[0] if chunk.section_path else FRONT_MATTER_PART
        totals[label] = totals.get(label, 0) + chunk.word_count
    grand = sum(totals.values())
    if grand == 0:
        raise EmptyInputError("corpus has zero words")
    return {label: count / grand for label, count in totals.items()}


def diff_versions(
    old: list[GuidelineChunk], new: list[GuidelineChunk]
) -> ChangeSet:
    """Diff two chunk lists by (section_path, ordinal-within-path).

    Equal path+hash pairs are dropped; equal path with different hash is a
    modification; path positions present on one side only are adds or
    removals. ``affected_items`` is left empty for the caller to join.
    """

    def keyed(chunks: list[GuidelineChunk]) -> dict[tuple, GuidelineChunk]:
        seen: dict[tuple[str, ...], int] = {}
        table = {}
        for chunk in chunks:
            path = tuple(chunk.section_path)
            ordinal = seen.get(path, 0)
            seen[path] = ordinal + 1
            table[(path, ordinal)] = chunk
        return table

    old_table = keyed(old)
    new_table = keyed(new)

    changes = ChangeSet()
    for key in sorted(set(old_table) | set(new_table)):
        in_old = key in old_table
        in_new = key in new_table
        if in_old and in_new:
            if old_table[key].content_hash != new_table[key].content_hash:
                changes.modified.append(
                    (old_table[key].chunk_id, new_table[key].chunk_id)
                )
        elif in_new:
            changes.added.append(new_table[key].chunk_id)
        else:
            changes.removed.append(old_table[key].chunk_id)
    return changes


# ---------------------------------------------------------------------------
# Chunk store (JSONL on disk)
# ---------------------------------------------------------------------------


def save_chunks(chunks: list[GuidelineChunk], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for chunk in chunks:
            fh.write(json.dumps(chunk.to_json(), ensure_ascii=False) + "\n")


def load_chunks(path: str | Path) -> list[GuidelineChunk]:
    chunks = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                chunks.append(GuidelineChunk.from_json(json.loads(line)))
    return chunks
