"""Context-conditioned retrieval of external knowledge snippets.

Retrieval is tf-idf cosine over word tokens: auditable, dependency-free, and
deterministic. Entries are indexed once (term + description tokens); queries
are the content tokens of a dialogue's encoder context.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import SchemaError
from .tensor import Tensor, embedding, mean_rows, scale
from .text import normalize, tokenize


@dataclass(frozen=True)
class KnowledgeSnippet:
    term: str
    description: str


class KnowledgeIndex:
    """Inverted token index plus unit-norm tf-idf vectors per entry.

    idf(t) = ln((1+N)/(1+df(t))) + 1 with N = entry count, so unseen tokens
    still get a finite positive weight and every entry vector has L2 norm 1.
    """

    def __init__(self, entries: list[KnowledgeSnippet], idf: dict[str, float],
                 vectors: list[dict[str, float]], inverted: dict[str, list[int]]):
        self.entries = entries
        self.idf = idf
        self.vectors = vectors
        self.inverted = inverted

    def __len__(self):
        return len(self.entries)

    def idf_of(self, token: str) -> float:
        default = math.log((1 + len(self.entries)) / 1.0) + 1.0
        return self.idf.get(token, default)


def index_knowledge(entries) -> KnowledgeIndex:
    """Build the retrieval index; terms must be unique after normalization."""
    snippets = []
    seen_terms: dict[str, int] = {}
    for i, entry in enumerate(entries):
        snippet = entry if isinstance(entry, KnowledgeSnippet) else \
            KnowledgeSnippet(term=entry["term"], description=entry["description"])
        if not normalize(snippet.term):
            raise SchemaError("knowledge entry has an empty term", field="term")
        if not normalize(snippet.description):
            raise SchemaError(f"knowledge entry {snippet.term!r} has an empty description",
                              field="description")
        key = normalize(snippet.term)
        if key in seen_terms:
            raise SchemaError(f"duplicate knowledge term {snippet.term!r} "
                              f"(entries {seen_terms[key]} and {i})", field="term")
        seen_terms[key] = i
        snippets.append(snippet)
    if not snippets:
        raise SchemaError("knowledge base has no entries")

    n = len(snippets)
    token_lists = [tokenize(s.term) + tokenize(s.description) for s in snippets]
    df: Counter[str] = Counter()
    for toks in token_lists:
        df.update(set(toks))
    idf = {t: math.log((1 + n) / (1 + d)) + 1.0 for t, d in df.items()}

    vectors = []
    inverted: dict[str, list[int]] = {}
    for i, toks in enumerate(token_lists):
        weights = {t: c * idf[t] for t, c in Counter(toks).items()}
        norm = math.sqrt(sum(w * w for w in weights.values()))
        vectors.append({t: w / norm for t, w in weights.items()})
        for t in weights:
            inverted.setdefault(t, []).append(i)
    return KnowledgeIndex(snippets, idf, vectors, inverted)


def retrieve(query_tokens, idx: KnowledgeIndex, k: int = 3):
    """Top-k entries by cosine similarity to the query token bag.

    Returns (snippet, score) pairs, score descending, ties broken by entry
    order; zero-score entries are dropped, so fewer than k results may come
    back. An empty query yields an empty list.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    counts = Counter(query_tokens)
    if not counts:
        return []
    q = {t: c * idx.idf_of(t) for t, c in counts.items()}
    q_norm = math.sqrt(sum(w * w for w in q.values()))
    scores = np.zeros(len(idx))
    for t, w in q.items():
        for entry_id in idx.inverted.get(t, ()):
            scores[entry_id] += w * idx.vectors[entry_id][t]
    scores /= q_norm
    order = sorted((i for i in range(len(idx)) if scores[i] > 0.0),
                   key=lambda i: (-scores[i], i))
    return [(idx.entries[i], float(scores[i])) for i in order[:k]]


def encode_knowledge_ids(desc_token_ids, emb_table: Tensor) -> Tensor:
    """Pool pre-tokenized descriptions into one modality vector.

    Each description is mean-pooled over its token embeddings, then the
    per-snippet vectors are averaged; the result stays differentiable into
    the embedding table. No snippets -> a zero vector.
    """
    d = emb_table.data.shape[1]
    desc_token_ids = [ids for ids in desc_token_ids if len(ids)]
    if not desc_token_ids:
        return Tensor(np.zeros(d))
    pooled = None
    for ids in desc_token_ids:
        vec = mean_rows(embedding(emb_table, np.asarray(ids, dtype=np.intp)))
        pooled = vec if pooled is None else pooled + vec
    return scale(pooled, 1.0 / len(desc_token_ids))


def encode_knowledge(snippets, emb_table: Tensor, vocab) -> Tensor:
    """Tokenizing wrapper over encode_knowledge_ids for snippet objects."""
    ids = [[vocab.id_of(t) for t in tokenize(s.description)] for s in snippets]
    return encode_knowledge_ids(ids, emb_table)


def load_kb(path) -> list[KnowledgeSnippet]:
    """Read a JSONL knowledge base ({"term","description"} per line)."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON ({exc.msg})", line=line_no) from exc
            if not isinstance(obj, dict):
                raise SchemaError("entry is not a JSON object", line=line_no)
            term = obj.get("term")
            desc = obj.get("description")
            if not isinstance(term, str) or not normalize(term):
                raise SchemaError("missing or empty term", line=line_no, field="term")
            if not isinstance(desc, str) or not normalize(desc):
                raise SchemaError("missing or empty description", line=line_no, field="description")
            out.append(KnowledgeSnippet(term=term, description=desc))
    return out


def save_kb(entries, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            record = e if isinstance(e, dict) else {"term": e.term, "description": e.description}
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")
