"""Low-level text utilities shared by every module.

Everything here is pure and deterministic: tokenization, stable hashing,
stopword filtering, crude sentence splitting, and the rule-based
negation-parity check used for fact disclosure / contradiction detection.
"""

from __future__ import annotations

import re

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)
_WS_RE = re.compile(r"\s+")
_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")
_CLAUSE_RE = re.compile(r"[.;,!?]")

# Small bundled English stopword list; enough for content-token overlap
# checks, deliberately not a full NLP stoplist.
STOPWORDS_EN = frozenset(
    """a an the and or but if then else of in on at to for from by with without
    is are was were be been being am do does did done has have had having it its
    this that these those there here he she they them his her their we you i me
    my your our us as so than too very can could will would shall should may
    might must not no nor own same such what which who whom when where why how
    all any both each few more most other some only about into over under again
    further once out up down off above below between during before after while
    s t don now""".split()
)

# Swahili function words used for the cheap language-tag detector.
SWAHILI_FUNCTION_WORDS = frozenset(
    """na ya wa kwa ni za cha la vya katika kwenye hii hizi huyu hawa ile zile
    yake wake zake kuwa kama au lakini pia sana bila baada kabla ndani juu
    chini gani ngapi nini wapi lini ipi ypi ambayo ambaye ambao hana hakuna
    wakati mtoto mgonjwa dawa hospitali daktari""".split()
)

NEGATION_TOKENS = frozenset(
    "no not never none without denies hakuna hana hawana sina".split()
)


def fnv1a_64(text: str) -> int:
    """Stable non-cryptographic 64-bit FNV-1a hash over UTF-8 bytes."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def collapse_ws(text: str) -> str:
    """Collapse all whitespace runs to single spaces and trim."""
    return _WS_RE.sub(" ", text).strip()


def normalize_for_hash(text: str) -> str:
    return collapse_ws(text.lower())


def content_hash(text: str) -> int:
    """64-bit hash of lowercased, whitespace-collapsed text."""
    return fnv1a_64(normalize_for_hash(text))


def tokenize(text: str) -> list[str]:
    """Lowercased, punctuation-stripped word tokens."""
    return _TOKEN_RE.findall(text.lower())


def word_count(text: str) -> int:
    """Token count by Unicode-whitespace splitting (no stemming)."""
    return len(text.split())


def content_tokens(text: str) -> list[str]:
    """Tokens with English stopwords removed."""
    return [t for t in tokenize(text) if t not in STOPWORDS_EN]


def sentences(text: str) -> list[str]:
    """Naive sentence split on terminal punctuation."""
    parts = [p.strip() for p in _SENTENCE_RE.split(text)]
    return [p for p in parts if p]


def is_token_subsequence(needle: list[str], hay: list[str]) -> bool:
    """True if ``needle`` occurs as a consecutive run inside ``hay``."""
    if not needle:
        return False
    n = len(needle)
    for i in range(len(hay) - n + 1):
        if hay[i : i + n] == needle:
            return True
    return False


def phrase_in_text(phrase: str, text: str) -> bool:
    """Case-insensitive token-level phrase containment."""
    return is_token_subsequence(tokenize(phrase), tokenize(text))


def looks_swahili(text: str, min_hits: int = 2) -> bool:
    """Presence-threshold Swahili detector over the function-word list."""
    hits = sum(1 for t in tokenize(text) if t in SWAHILI_FUNCTION_WORDS)
    return hits >= min_hits


def clamp01(x: float) -> float:
    return 0.0 if x < 0.0 else 1.0 if x > 1.0 else x


def jaccard(a: set, b: set) -> float:
    """Jaccard similarity; 1.0 when both sets are empty."""
    if not a and not b:
        return 1.0
    union = a | b
    return len(a & b) / len(union)


def clause_parity(text: str, overlap_tokens: set[str]) -> bool | None:
    """Negation parity of the first clause mentioning any overlap token.

    Returns True if that clause is negated, False if affirmative, None if
    no clause mentions an overlap token. This is a deliberately crude,
    rule-based check; its limits are documented where it is used.
    """
    for clause in _CLAUSE_RE.split(text):
        toks = tokenize(clause)
        if any(t in overlap_tokens for t in toks):
            return any(t in NEGATION_TOKENS for t in toks)
    return None
