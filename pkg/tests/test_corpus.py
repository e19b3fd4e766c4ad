import random

import pytest

from guidebench.corpus import (
    ChangeSet,
    GuidelineChunk,
    chunk_document,
    diff_versions,
    load_chunks,
    part_distribution,
    save_chunks,
)
from guidebench.errors import EmptyInputError, StructuralError
from guidebench.text import collapse_ws

THREE_SECTION_DOC = """\
[[page=1]]
#PART A. Adult Care
##SECTION Fever
Fever in adults is common and most often self limiting. Assess duration,
pattern and associated danger signs before treating.

Persistent fever beyond seven days needs laboratory work up including a
malaria test and a full blood count.

##SECTION Cough
[[page=2]]
Acute cough usually follows a viral infection and resolves within three
weeks without antibiotics.

Chronic cough lasting more than eight weeks should prompt screening for
tuberculosis at the facility.

#PART B. Child Care
##SECTION Diarrhoea
[[page=3]]
Assess every child with diarrhoea for dehydration using skin pinch and
sunken eyes before choosing a treatment plan.

Give low osmolarity oral rehydration solution and zinc for fourteen days
according to the treatment plan selected.
"""


def make_chunk(path, text, doc_id="doc", ordinal=0, page=1):
    from guidebench.corpus import make_chunk_id
    from guidebench.text import content_hash, word_count

    return GuidelineChunk(
        chunk_id=make_chunk_id(doc_id, tuple(path), ordinal),
        doc_id=doc_id,
        section_path=list(path),
        page_start=page,
        page_end=page,
        text=text,
        word_count=word_count(text),
        content_hash=content_hash(text),
    )


# ---------------------------------------------------------------------------
# chunk_document
# ---------------------------------------------------------------------------


def test_three_section_fixture_one_chunk_per_section():
    chunks = chunk_document(THREE_SECTION_DOC, "kenya-l23", max_words=200, min_words=1)
    assert len(chunks) == 3
    assert [c.section_path for c in chunks] == [
        ["A. Adult Care", "Fever"],
        ["A. Adult Care", "Cough"],
        ["B. Child Care", "Diarrhoea"],
    ]
    assert (chunks[0].page_start, chunks[0].page_end) == (1, 1)
    assert (chunks[1].page_start, chunks[1].page_end) == (2, 2)
    assert (chunks[2].page_start, chunks[2].page_end) == (3, 3)


def test_empty_doc_raises():
    with pytest.raises(EmptyInputError):
        chunk_document("", "doc")
    with pytest.raises(EmptyInputError):
        chunk_document("#PART Only Headings\n##SECTION Nothing\n", "doc")


def test_orphan_subsection_is_structural_error():
    doc = "#PART A\n###SUBSECTION Dangling\ntext here\n"
    with pytest.raises(StructuralError) as err:
        chunk_document(doc, "doc")
    assert "Dangling" in str(err.value)


def test_orphan_section_is_structural_error():
    with pytest.raises(StructuralError) as err:
        chunk_document("##SECTION Early\ntext\n", "doc")
    assert "Early" in str(err.value)


def test_unknown_marker_is_structural_error():
    with pytest.raises(StructuralError) as err:
        chunk_document("#CHAPTER One\ntext\n", "doc")
    assert "line 1" in str(err.value)


def test_malformed_page_marker():
    with pytest.raises(StructuralError) as err:
        chunk_document("#PART A\n[[page=xii]]\ntext\n", "doc")
    assert "page" in str(err.value)


def test_oversized_paragraph_splits_at_sentences():
    sentence = "This sentence has exactly eight words in it."
    body = " ".join([sentence] * 12)  # 96 words in one paragraph
    doc = f"#PART A\n##SECTION S\n{body}\n"
    chunks = chunk_document(doc, "doc", max_words=40, min_words=1)
    assert all(c.word_count <= 40 for c in chunks)
    assert len(chunks) == 3  # 5 sentences never fit; 4x8=32 <= 40


def test_indivisible_paragraph_may_exceed_max():
    body = " ".join(f"w{i}" for i in range(60))  # one 60-word "sentence"
    doc = f"#PART A\n##SECTION S\n{body}\n"
    chunks = chunk_document(doc, "doc", max_words=40, min_words=1)
    assert len(chunks) == 1
    assert chunks[0].word_count == 60


def test_small_sibling_subsections_merge():
    doc = (
        "#PART A\n##SECTION S\n"
        "###SUBSECTION One\nshort text here\n"
        "###SUBSECTION Two\nanother short bit\n"
    )
    chunks = chunk_document(doc, "doc", max_words=100, min_words=10)
    assert len(chunks) == 1
    assert chunks[0].section_path == ["A", "S"]
    assert "short text here" in chunks[0].text
    assert "another short bit" in chunks[0].text


def test_front_matter_before_first_part():
    doc = "Preface text about the guideline.\n\n#PART A\n##SECTION S\nbody words\n"
    chunks = chunk_document(doc, "doc", max_words=100, min_words=1)
    assert chunks[0].section_path == ["Front Matter"]


def test_inline_page_marker_sets_paragraph_range():
    doc = "#PART A\n##SECTION S\nstart of paragraph [[page=5]] end of it\n"
    chunks = chunk_document(doc, "doc", max_words=100, min_words=1)
    assert chunks[0].page_start == 1
    assert chunks[0].page_end == 5
    assert "[[page" not in chunks[0].text


def test_word_count_matches_tokenizer():
    chunks = chunk_document(THREE_SECTION_DOC, "doc", max_words=200, min_words=1)
    for c in chunks:
        assert c.word_count == len(c.text.split())


# ---------------------------------------------------------------------------
# Properties: determinism, coverage
# ---------------------------------------------------------------------------

WORDS = "fever cough child dose clinic malaria test plan water salt zinc".split()


def random_marker_doc(rng: random.Random) -> str:
    lines = []
    page = 1
    for p in range(rng.randint(1, 3)):
        lines.append(f"#PART Part {p}")
        for s in range(rng.randint(1, 3)):
            lines.append(f"##SECTION Section {p}.{s}")
            for _ in range(rng.randint(1, 4)):
                if rng.random() < 0.2:
                    page += 1
                    lines.append(f"[[page={page}]]")
                n = rng.randint(3, 30)
                lines.append(" ".join(rng.choice(WORDS) for _ in range(n)) + ".")
                lines.append("")
    return "\n".join(lines) + "\n"


def test_chunking_deterministic_over_random_docs():
    rng = random.Random(7)
    for _ in range(50):
        doc = random_marker_doc(rng)
        a = chunk_document(doc, "d", max_words=25, min_words=5)
        b = chunk_document(doc, "d", max_words=25, min_words=5)
        assert [c.to_json() for c in a] == [c.to_json() for c in b]


def test_coverage_reconstructs_body_text():
    rng = random.Random(11)
    for _ in range(50):
        doc = random_marker_doc(rng)
        chunks = chunk_document(doc, "d", max_words=25, min_words=5)
        body_lines = [
            ln
            for ln in doc.splitlines()
            if ln.strip() and not ln.startswith("#") and not ln.startswith("[[page")
        ]
        expected = collapse_ws(" ".join(body_lines))
        got = collapse_ws(" ".join(c.text for c in chunks))
        assert got == expected


# ---------------------------------------------------------------------------
# part_distribution
# ---------------------------------------------------------------------------


def test_distribution_arithmetic():
    a = make_chunk(["A"], " ".join(["w"] * 300))
    b = make_chunk(["B"], " ".join(["w"] * 100))
    dist = part_distribution([a, b])
    assert dist == {"A": 0.75, "B": 0.25}


def test_distribution_single_part():
    only = make_chunk(["Solo"], "some words here")
    assert part_distribution([only]) == {"Solo": 1.0}


def test_distribution_empty_raises():
    with pytest.raises(EmptyInputError):
        part_distribution([])


def test_distribution_sums_to_one_random():
    rng = random.Random(3)
    for _ in range(100):
        chunks = [
            make_chunk([f"P{rng.randint(0, 4)}"], " ".join(["w"] * rng.randint(1, 50)), ordinal=i)
            for i in range(rng.randint(1, 20))
        ]
        dist = part_distribution(chunks)
        assert abs(sum(dist.values()) - 1.0) < 1e-9
        assert all(v >= 0 for v in dist.values())


# ---------------------------------------------------------------------------
# diff_versions
# ---------------------------------------------------------------------------


def test_diff_identical_is_empty():
    chunks = chunk_document(THREE_SECTION_DOC, "doc", max_words=200, min_words=1)
    assert diff_versions(chunks, chunks).is_empty()


def test_diff_one_edit_is_single_modification():
    old = chunk_document(THREE_SECTION_DOC, "doc", max_words=200, min_words=1)
    edited = THREE_SECTION_DOC.replace("zinc for fourteen days", "zinc for ten days")
    new = chunk_document(edited, "doc", max_words=200, min_words=1)
    changes = diff_versions(old, new)
    assert len(changes.modified) == 1
    assert not changes.added and not changes.removed
    old_id, new_id = changes.modified[0]
    assert old_id == old[2].chunk_id
    assert new_id == new[2].chunk_id


def test_diff_appended_section_is_added():
    old = chunk_document(THREE_SECTION_DOC, "doc", max_words=200, min_words=1)
    extended = THREE_SECTION_DOC + "\n##SECTION Malaria\nNew guidance paragraph on malaria care.\n"
    new = chunk_document(extended, "doc", max_words=200, min_words=1)
    changes = diff_versions(old, new)
    assert len(changes.added) == 1
    assert not changes.removed and not changes.modified


def test_diff_symmetric_under_swap():
    old = chunk_document(THREE_SECTION_DOC, "doc", max_words=200, min_words=1)
    edited = THREE_SECTION_DOC.replace("skin pinch", "skin turgor")
    new = chunk_document(edited + "\n##SECTION Extra\nAppended text paragraph.\n", "doc", max_words=200, min_words=1)
    fwd = diff_versions(old, new)
    rev = diff_versions(new, old)
    assert sorted(fwd.added) == sorted(rev.removed)
    assert sorted(fwd.removed) == sorted(rev.added)
    assert sorted((b, a) for a, b in fwd.modified) == sorted(rev.modified)


def test_changeset_lists_disjoint_random():
    rng = random.Random(13)
    for _ in range(50):
        old_doc = random_marker_doc(rng)
        new_doc = random_marker_doc(rng)
        old = chunk_document(old_doc, "d", max_words=25, min_words=5)
        new = chunk_document(new_doc, "d", max_words=25, min_words=5)
        ch = diff_versions(old, new)
        new_side = set(ch.added) | {b for _, b in ch.modified}
        assert len(new_side) == len(ch.added) + len(ch.modified)


# ---------------------------------------------------------------------------
# Store round-trip
# ---------------------------------------------------------------------------


def test_chunk_store_roundtrip(tmp_path):
    chunks = chunk_document(THREE_SECTION_DOC, "doc", max_words=200, min_words=1)
    path = tmp_path / "chunks.jsonl"
    save_chunks(chunks, path)
    loaded = load_chunks(path)
    assert [c.to_json() for c in loaded] == [c.to_json() for c in chunks]
    first = path.read_text().splitlines()[0]
    for field in ("chunk_id", "doc_id", "section_path", "page_start", "page_end", "text", "word_count", "content_hash"):
        assert field in first
