"""Hybrid lexical + vector retrieval over guideline chunks.

The lexical side is an Okapi BM25 inverted index; the vector side is an
exact cosine scan over unit vectors (the corpus is ~1e3 chunks, so no ANN
structure is warranted). Results fuse by reciprocal rank with K=60.

The built-in embedder is a deterministic hashed bag-of-tokens (FNV-1a into
256 buckets, L2-normalized) so tests and offline runs need no network;
an HTTP backend plugs in behind the same contract.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

from .corpus import GuidelineChunk
from .errors import BackendError, ConfigurationError, EmptyInputError, NotFoundError
from .text import tokenize, fnv1a_64

BM25_K1 = 1.2
BM25_B = 0.75
RRF_K = 60
BUILTIN_DIM = 256


# ---------------------------------------------------------------------------
# Embedders
# ---------------------------------------------------------------------------


class BuiltinEmbedder:
    """Deterministic hashed bag-of-tokens embedder.

    Lowercase, strip punctuation, FNV-1a each token into ``dim`` buckets,
    accumulate counts, L2-normalize. Order-invariant by construction.
    """

    def __init__(self, dim: int = BUILTIN_DIM):
        self.dim = dim
        self.embedder_id = f"builtin-fnv1a-{dim}"

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise EmptyInputError("cannot embed empty text")
        vec = np.zeros(self.dim, dtype=np.float64)
        for tok in tokens:
            vec[fnv1a_64(tok) % self.dim] += 1.0
        return vec / np.linalg.norm(vec)

    def embed_batch(self, texts: list[str]) -> list[np.ndarray]:
        return [self.embed(t) for t in texts]


class HttpEmbedder:
    """Embedding backend over HTTP.

    Wire contract: POST {"texts": [...]} -> {"vectors": [[...], ...]}.
    The auth token is read from the environment variable named in the
    config, never stored in files.
    """

    def __init__(self, endpoint: str, embedder_id: str = "http", auth_token: str | None = None, timeout: float = 30.0):
        self.endpoint = endpoint
        self.embedder_id = embedder_id
        self.auth_token = auth_token
        self.timeout = timeout
        self.dim: int | None = None

    def embed_batch(self, texts: list[str]) -> list[np.ndarray]:
        for t in texts:
            if not tokenize(t):
                raise EmptyInputError("cannot embed empty text")
        headers = {}
        if self.auth_token:
            headers["Authorization"] = f"Bearer {self.auth_token}"
        try:
            resp = requests.post(
                self.endpoint, json={"texts": texts}, headers=headers, timeout=self.timeout
            )
            resp.raise_for_status()
        except requests.RequestException as exc:
            raise BackendError(f"embedding backend failed: {exc}", retryable=True) from exc
        vectors = resp.json().get("vectors")
        if vectors is None or len(vectors) != len(texts):
            raise BackendError("embedding backend returned malformed response")
        out = []
        for raw in vectors:
            vec = np.asarray(raw, dtype=np.float64)
            norm = np.linalg.norm(vec)
            if norm == 0:
                raise BackendError("embedding backend returned a zero vector")
            out.append(vec / norm)
        self.dim = out[0].shape[0]
        return out

    def embed(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]


_EMBEDDERS = {"builtin": BuiltinEmbedder}


def get_embedder(embedder_id: str, **kwargs):
    """Resolve a registered embedder id; 'builtin' needs no config."""
    if embedder_id == "builtin":
        return BuiltinEmbedder()
    if embedder_id == "http":
        if "endpoint" not in kwargs:
            raise ConfigurationError("http embedder requires an endpoint")
        return HttpEmbedder(**kwargs)
    raise ConfigurationError(f"unknown embedder {embedder_id!r}")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b))


# ---------------------------------------------------------------------------
# Indexes
# ---------------------------------------------------------------------------


@dataclass
class LexicalIndex:
    postings: dict[str, list[tuple[str, int]]]
    doc_lengths: dict[str, int]
    avg_doc_length: float
    corpus_size: int


@dataclass
class VectorIndex:
    dim: int
    vectors: dict[str, np.ndarray]
    embedder_id: str


@dataclass
class RetrievalResult:
    chunk_id: str
    fused_score: float
    final_rank: int
    lexical_rank: int | None = None
    vector_rank: int | None = None


def build_indexes(chunks: list[GuidelineChunk], embedder="builtin") -> tuple[LexicalIndex, VectorIndex]:
    """Build both indexes over the chunk list.

    ``embedder`` may be an embedder id or an embedder object. Aborts with
    the failing chunk_id if any chunk cannot be embedded.
    """
    if not chunks:
        raise EmptyInputError("no chunks to index")
    ids = [c.chunk_id for c in chunks]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ConfigurationError(f"duplicate chunk_id in input: {dupes[0]}")

    if isinstance(embedder, str):
        embedder = get_embedder(embedder)

    postings: dict[str, list[tuple[str, int]]] = {}
    doc_lengths: dict[str, int] = {}
    vectors: dict[str, np.ndarray] = {}
    for chunk in chunks:
        tokens = tokenize(chunk.text)
        doc_lengths[chunk.chunk_id] = len(tokens)
        counts: dict[str, int] = {}
        for tok in tokens:
            counts[tok] = counts.get(tok, 0) + 1
        for tok, tf in counts.items():
            postings.setdefault(tok, []).append((chunk.chunk_id, tf))
        try:
            vectors[chunk.chunk_id] = embedder.embed(chunk.text)
        except Exception as exc:
            raise BackendError(
                f"embedding failed for chunk {chunk.chunk_id}: {exc}"
            ) from exc

    avg = sum(doc_lengths.values()) / len(doc_lengths)
    dim = next(iter(vectors.values())).shape[0]
    lexical = LexicalIndex(postings, doc_lengths, avg, len(doc_lengths))
    vector = VectorIndex(dim, vectors, getattr(embedder, "embedder_id", "unknown"))
    return lexical, vector


def bm25_score(
    query_terms: list[str],
    chunk_id: str,
    index: LexicalIndex,
    k1: float = BM25_K1,
    b: float = BM25_B,
) -> float:
    """Okapi BM25 with +1-smoothed IDF: idf = ln((N - df + 0.5)/(df + 0.5) + 1)."""
    if chunk_id not in index.doc_lengths:
        raise NotFoundError(f"chunk {chunk_id} not indexed")
    dl = index.doc_lengths[chunk_id]
    n = index.corpus_size
    score = 0.0
    for term in query_terms:
        plist = index.postings.get(term)
        if not plist:
            continue
        tf = next((f for cid, f in plist if cid == chunk_id), 0)
        if tf == 0:
            continue
        df = len(plist)
        idf = math.log((n - df + 0.5) / (df + 0.5) + 1.0)
        score += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / index.avg_doc_length))
    return score


def _candidate_bm25_ranking(
    query_terms: list[str], index: LexicalIndex, k1: float, b: float
) -> list[str]:
    """BM25 ranking over the query-matching subcorpus.

    Corpus statistics (N, avgdl) are taken over the matching documents
    only, so growing the corpus with chunks that share no query term can
    never reorder the ranked candidates.
    """
    candidates: set[str] = set()
    for term in set(query_terms):
        for cid, _ in index.postings.get(term, []):
            candidates.add(cid)
    if not candidates:
        return []
    sub_n = len(candidates)
    sub_avg = sum(index.doc_lengths[c] for c in candidates) / sub_n
    scores: dict[str, float] = {}
    for term in query_terms:
        plist = index.postings.get(term)
        if not plist:
            continue
        df = len(plist)  # every doc containing the term is a candidate, so df <= sub_n
        idf = math.log((sub_n - df + 0.5) / (df + 0.5) + 1.0)
        for cid, tf in plist:
            dl = index.doc_lengths[cid]
            scores[cid] = scores.get(cid, 0.0) + idf * tf * (k1 + 1) / (
                tf + k1 * (1 - b + b * dl / sub_avg)
            )
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [cid for cid, _ in ranked]


def search(
    query: str,
    k: int,
    lexical: LexicalIndex,
    vector: VectorIndex,
    embedder="builtin",
    rrf_k: int = RRF_K,
) -> list[RetrievalResult]:
    """Top-k chunks by reciprocal-rank fusion of BM25 and cosine rankings.

    fused_score = sum over systems of 1/(K + rank); a chunk unranked by
    both systems is not returned.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    terms = tokenize(query)
    if not terms:
        raise EmptyInputError("empty query")
    if isinstance(embedder, str):
        embedder = get_embedder(embedder)

    lex_ranking = _candidate_bm25_ranking(terms, lexical, BM25_K1, BM25_B)

    qvec = embedder.embed(query)
    sims = [
        (cid, cosine(qvec, vec))
        for cid, vec in vector.vectors.items()
    ]
    vec_ranking = [
        cid
        for cid, sim in sorted(
            ((c, s) for c, s in sims if s > 0), key=lambda kv: (-kv[1], kv[0])
        )
    ]

    lex_rank = {cid: i + 1 for i, cid in enumerate(lex_ranking)}
    vec_rank = {cid: i + 1 for i, cid in enumerate(vec_ranking)}

    fused: dict[str, float] = {}
    for cid, rank in lex_rank.items():
        fused[cid] = fused.get(cid, 0.0) + 1.0 / (rrf_k + rank)
    for cid, rank in vec_rank.items():
        fused[cid] = fused.get(cid, 0.0) + 1.0 / (rrf_k + rank)

    ordered = sorted(fused.items(), key=lambda kv: (-kv[1], kv[0]))
    results = []
    for i, (cid, score) in enumerate(ordered[:k], start=1):
        results.append(
            RetrievalResult(
                chunk_id=cid,
                fused_score=score,
                final_rank=i,
                lexical_rank=lex_rank.get(cid),
                vector_rank=vec_rank.get(cid),
            )
        )
    return results


# ---------------------------------------------------------------------------
# Persistence (versioned JSON snapshot, round-trip stable)
# ---------------------------------------------------------------------------

SNAPSHOT_FORMAT = 1


def save_indexes(lexical: LexicalIndex, vector: VectorIndex, path: str | Path) -> None:
    payload = {
        "format": SNAPSHOT_FORMAT,
        "lexical": {
            "postings": {t: [[cid, tf] for cid, tf in plist] for t, plist in lexical.postings.items()},
            "doc_lengths": lexical.doc_lengths,
            "avg_doc_length": lexical.avg_doc_length,
            "corpus_size": lexical.corpus_size,
        },
        "vector": {
            "dim": vector.dim,
            "embedder_id": vector.embedder_id,
            "vectors": {cid: vec.tolist() for cid, vec in vector.vectors.items()},
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_indexes(path: str | Path) -> tuple[LexicalIndex, VectorIndex]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != SNAPSHOT_FORMAT:
        raise ConfigurationError(f"unsupported index snapshot format: {payload.get('format')}")
    lex = payload["lexical"]
    lexical = LexicalIndex(
        postings={t: [(cid, tf) for cid, tf in plist] for t, plist in lex["postings"].items()},
        doc_lengths=lex["doc_lengths"],
        avg_doc_length=lex["avg_doc_length"],
        corpus_size=lex["corpus_size"],
    )
    vec = payload["vector"]
    vector = VectorIndex(
        dim=vec["dim"],
        vectors={cid: np.asarray(v, dtype=np.float64) for cid, v in vec["vectors"].items()},
        embedder_id=vec["embedder_id"],
    )
    return lexical, vector
