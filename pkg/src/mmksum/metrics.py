"""Generation quality metrics: BLEU-1..4 and composite, ROUGE-1/2/L,
METEOR-lite, Jaccard similarity, and a greedy embedding-similarity stand-in
for a pretrained-encoder score.

All metrics are pure functions of token lists. Corpus scores are arithmetic
means of per-record scores for every metric (including BLEU) — this differs
from corpus-level BLEU but keeps ablation rows comparable record by record.

embed_sim is explicitly a stand-in computed with the trained model's own
token embeddings; it is never reported under the name of a pretrained
encoder metric.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, fields

import numpy as np

# Suffix-stripping rules for the METEOR-lite stem stage, applied in order;
# the first matching suffix is stripped, and only if >= 3 characters remain.
STEM_RULES = (
    ("sses", "ss"),
    ("ies", "y"),
    ("ing", ""),
    ("ed", ""),
    ("es", ""),
    ("ly", ""),
    ("s", ""),
)


def stem(token: str) -> str:
    for suffix, repl in STEM_RULES:
        if token.endswith(suffix):
            candidate = token[: len(token) - len(suffix)] + repl
            if len(candidate) >= 3:
                return candidate
            break
    return token


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hyp, ref, max_n: int = 4):
    """Modified n-gram precisions with clipping and brevity penalty.

    Returns (per_n, composite), both on a 0-100 scale. per_n[i] reports the
    raw clipped precision, 100 * BP * p_{i+1}. The composite is
    100 * BP * exp(mean of the available log precisions), where a zero raw
    match count for n >= 2 is smoothed by adding 1 to numerator and
    denominator; a zero unigram precision zeroes the composite. An empty
    hypothesis scores all zeros.
    """
    if not ref:
        raise ValueError("bleu: reference must be non-empty")
    hyp = list(hyp)
    ref = list(ref)
    if not hyp:
        return [0.0] * max_n, 0.0
    c, r = len(hyp), len(ref)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    per_n = []
    logs = []
    for n in range(1, max_n + 1):
        hyp_counts = _ngrams(hyp, n)
        total = sum(hyp_counts.values())
        if total == 0:
            per_n.append(0.0)
            continue
        ref_counts = _ngrams(ref, n)
        clipped = sum(min(cnt, ref_counts.get(g, 0)) for g, cnt in hyp_counts.items())
        per_n.append(100.0 * bp * clipped / total)
        smoothed = (clipped + 1) / (total + 1) if clipped == 0 and n >= 2 else clipped / total
        logs.append(math.log(smoothed) if smoothed > 0 else -math.inf)
    if not logs or any(map(math.isinf, logs)):
        composite = 0.0
    else:
        composite = 100.0 * bp * math.exp(sum(logs) / len(logs))
    return per_n, composite


def rouge_n(hyp, ref, n: int):
    """Clipped n-gram overlap F1 on a 0-100 scale; 0 when either side has
    no n-grams."""
    if not ref:
        raise ValueError("rouge_n: reference must be non-empty")
    hyp_counts = _ngrams(list(hyp), n)
    ref_counts = _ngrams(list(ref), n)
    total_h = sum(hyp_counts.values())
    total_r = sum(ref_counts.values())
    if total_h == 0 or total_r == 0:
        return 0.0
    overlap = sum(min(cnt, ref_counts.get(g, 0)) for g, cnt in hyp_counts.items())
    p = overlap / total_h
    r = overlap / total_r
    return 0.0 if p + r == 0 else 100.0 * 2 * p * r / (p + r)


def _lcs_length(a, b) -> int:
    # standard O(|a|*|b|) dynamic program, one rolling row
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hyp, ref):
    """Longest-common-subsequence F1 on a 0-100 scale."""
    if not ref:
        raise ValueError("rouge_l: reference must be non-empty")
    hyp = list(hyp)
    ref = list(ref)
    if not hyp:
        return 0.0
    lcs = _lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(hyp)
    r = lcs / len(ref)
    return 100.0 * 2 * p * r / (p + r)


def _align_meteor(hyp, ref):
    """Leftmost-greedy unigram alignment: exact matches first, then stems.

    Returns matched (hyp_pos, ref_pos) pairs sorted by hyp position.
    """
    pairs = []
    hyp_used = [False] * len(hyp)
    ref_used = [False] * len(ref)
    for key in (lambda t: t, stem):
        ref_keys = [key(t) for t in ref]
        for i, tok in enumerate(hyp):
            if hyp_used[i]:
                continue
            want = key(tok)
            for j, rk in enumerate(ref_keys):
                if not ref_used[j] and rk == want:
                    hyp_used[i] = True
                    ref_used[j] = True
                    pairs.append((i, j))
                    break
    return sorted(pairs)


def meteor_lite(hyp, ref):
    """Alignment-based unigram score on a 0-100 scale.

    F_mean = 10PR/(R + 9P) over matched unigrams; the fragmentation penalty
    0.5 * (chunks/matches)^3 discounts scattered alignments (identical texts
    of length L score 100 * (1 - 0.5/L^3)).
    """
    if not ref:
        raise ValueError("meteor_lite: reference must be non-empty")
    hyp = list(hyp)
    ref = list(ref)
    if not hyp:
        return 0.0
    pairs = _align_meteor(hyp, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p = m / len(hyp)
    r = m / len(ref)
    f_mean = 10 * p * r / (r + 9 * p)
    chunks = 1
    for (h0, r0), (h1, r1) in zip(pairs, pairs[1:]):
        if h1 != h0 + 1 or r1 != r0 + 1:
            chunks += 1
    penalty = 0.5 * (chunks / m) ** 3
    return 100.0 * f_mean * (1.0 - penalty)


def jaccard(hyp, ref):
    """Token-set intersection over union in [0,1]; two empty sets -> 1."""
    hs, rs = set(hyp), set(ref)
    if not hs and not rs:
        return 1.0
    return len(hs & rs) / len(hs | rs)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def embed_sim(hyp, ref, embed_fn):
    """Greedy-matching embedding similarity in [-1,1] (typically [0,1]).

    Precision = mean over hyp tokens of the max cosine to any ref token,
    recall symmetrically; the score is their harmonic mean. embed_fn may be
    a dict or a callable token -> vector (callers supply the trained model's
    embedding with UNK fallback).
    """
    lookup = embed_fn.__getitem__ if isinstance(embed_fn, dict) else embed_fn
    hyp = list(hyp)
    ref = list(ref)
    if not hyp and not ref:
        return 1.0
    if not hyp or not ref:
        return 0.0
    hv = [np.asarray(lookup(t), dtype=np.float64) for t in hyp]
    rv = [np.asarray(lookup(t), dtype=np.float64) for t in ref]
    sim = np.array([[_cosine(h, r) for r in rv] for h in hv])
    p = float(sim.max(axis=1).mean())
    r = float(sim.max(axis=0).mean())
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """One row of scores; 0-100 scale except jaccard and embed_sim (0-1)."""

    b1: float = 0.0
    b2: float = 0.0
    b3: float = 0.0
    b4: float = 0.0
    bleu: float = 0.0
    r1: float = 0.0
    r2: float = 0.0
    rl: float = 0.0
    meteor: float = 0.0
    jaccard: float = 0.0
    embed_sim: float = 0.0

    def values(self) -> list[float]:
        return [getattr(self, f.name) for f in fields(self)]


REPORT_COLUMNS = ("model", "B-1", "B-2", "B-3", "B-4", "BLEU",
                  "R-1", "R-2", "ROUGE-L", "METEOR", "Jaccard", "EmbedSim")


def score_pair(hyp_tokens, ref_tokens, embed_fn=None) -> MetricReport:
    per_n, composite = bleu(hyp_tokens, ref_tokens)
    return MetricReport(
        b1=per_n[0], b2=per_n[1], b3=per_n[2], b4=per_n[3], bleu=composite,
        r1=rouge_n(hyp_tokens, ref_tokens, 1),
        r2=rouge_n(hyp_tokens, ref_tokens, 2),
        rl=rouge_l(hyp_tokens, ref_tokens),
        meteor=meteor_lite(hyp_tokens, ref_tokens),
        jaccard=jaccard(hyp_tokens, ref_tokens),
        embed_sim=embed_sim(hyp_tokens, ref_tokens, embed_fn) if embed_fn else 0.0,
    )


def corpus_report(pairs, embed_fn=None) -> MetricReport:
    """Arithmetic mean of per-record reports over (hyp_tokens, ref_tokens)."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("corpus_report: no records to score")
    reports = [score_pair(h, r, embed_fn) for h, r in pairs]
    mean = MetricReport()
    for f in fields(MetricReport):
        setattr(mean, f.name, sum(getattr(rep, f.name) for rep in reports) / len(reports))
    return mean


def format_row(name: str, report: MetricReport) -> list[str]:
    cells = [name]
    for f, value in zip(fields(MetricReport), report.values()):
        cells.append(f"{value:.4f}" if f.name in ("jaccard", "embed_sim") else f"{value:.2f}")
    return cells


def rows_to_csv(rows, header=REPORT_COLUMNS) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(str(c) for c in row) for row in rows)
    return "\n".join(lines) + "\n"


def rows_to_markdown(rows, header=REPORT_COLUMNS) -> str:
    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join("---" for _ in header) + "|"]
    lines.extend("| " + " | ".join(str(c) for c in row) + " |" for row in rows)
    return "\n".join(lines) + "\n"
