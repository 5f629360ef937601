"""Autoregressive decoding: greedy and beam search with length penalty.

Both strategies are deterministic. The beam core is written against an
abstract next-token log-probability function so tests can rig explicit
distributions and compare against exhaustive path enumeration; the model
path wraps the decoder and computes the encoder states once.
"""

from __future__ import annotations

import numpy as np

from .config import DecodeConfig
from .model import ModelParams, PreparedRecord, decode_step, encode_record, prepare_record
from .text import BOS, EOS, TASK_TOKENS, decode_tokens


def path_score(logprob_total: float, length: int, alpha: float) -> float:
    """Beam score: total log-probability over length**alpha (alpha=0 -> raw)."""
    return logprob_total / (max(length, 1) ** alpha)


def greedy_decode(logprob_fn, eos_id: int, dcfg: DecodeConfig):
    """Argmax decoding; ties resolve to the lowest token id."""
    ids: tuple[int, ...] = ()
    total = 0.0
    for _ in range(dcfg.max_new_tokens):
        logps = logprob_fn(ids)
        tok = int(np.argmax(logps))
        ids = ids + (tok,)
        total += float(logps[tok])
        if tok == eos_id:
            break
    return ids, path_score(total, len(ids), dcfg.length_penalty)


def beam_decode(logprob_fn, eos_id: int, dcfg: DecodeConfig):
    """Width-W beam search.

    Finished hypotheses (EOS emitted) leave the active set; the final answer
    is the best-scoring path among finished and still-active hypotheses,
    ties broken by lexicographically smallest token ids. With width 1 this
    reproduces greedy decoding token for token.
    """
    width = dcfg.beam_width
    alpha = dcfg.length_penalty
    active: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    for _ in range(dcfg.max_new_tokens):
        pool: list[tuple[tuple[int, ...], float]] = []
        for ids, total in active:
            logps = logprob_fn(ids)
            top = np.argsort(-logps, kind="stable")[:width]
            pool.extend((ids + (int(t),), total + float(logps[t])) for t in top)
        pool.sort(key=lambda b: (-b[1], b[0]))
        active = []
        for ids, total in pool:
            if ids[-1] == eos_id:
                finished.append((ids, total))
            elif len(active) < width:
                active.append((ids, total))
        if not active:
            break
    candidates = finished + active
    scored = [(path_score(total, len(ids), alpha), ids) for ids, total in candidates]
    scored.sort(key=lambda s: (-s[0], s[1]))
    best_score, best_ids = scored[0]
    return best_ids, best_score


def decode_ids(logprob_fn, eos_id: int, dcfg: DecodeConfig):
    dcfg.validate()
    if dcfg.strategy == "greedy":
        return greedy_decode(logprob_fn, eos_id, dcfg)
    return beam_decode(logprob_fn, eos_id, dcfg)


def model_logprob_fn(enc, task: str, params: ModelParams):
    """Next-token log-probabilities conditioned on [BOS, TASK_task, *generated].

    Task-control tokens are barred from the distribution: a decoder prefix
    may carry exactly one, so they are never valid continuations."""
    task_id = TASK_TOKENS[task]
    banned = np.fromiter(TASK_TOKENS.values(), dtype=np.intp)

    def logprob_fn(generated: tuple[int, ...]) -> np.ndarray:
        prefix = np.array([BOS, task_id, *generated], dtype=np.intp)
        logits = decode_step(prefix, enc, params).data[-1].copy()
        logits[banned] = -np.inf
        z = logits - logits.max()
        with np.errstate(divide="ignore"):  # banned entries stay -inf
            return z - np.log(np.exp(z).sum())

    return logprob_fn


def generate_from_record(record: PreparedRecord, task: str, params: ModelParams,
                         vocab, dcfg: DecodeConfig):
    """Decode one task output for an already-prepared record.

    Returns (text, score); an immediate EOS yields the empty string. The
    budget is capped so [BOS, TASK, *generated] never exceeds max_len."""
    enc = encode_record(record, params)
    budget = min(dcfg.max_new_tokens, params.cfg.max_len - 2)
    capped = DecodeConfig(strategy=dcfg.strategy, beam_width=dcfg.beam_width,
                          max_new_tokens=budget, length_penalty=dcfg.length_penalty)
    ids, score = decode_ids(model_logprob_fn(enc, task, params), EOS, capped)
    return decode_tokens(ids, vocab), score


def generate(dialogue, task: str, params: ModelParams, vocab, kb_index,
             dcfg: DecodeConfig, retrieval_k: int = 3):
    """Retrieval -> encode -> iterative decode for one dialogue and task."""
    record = prepare_record(dialogue, vocab, kb_index, params.cfg, retrieval_k)
    return generate_from_record(record, task, params, vocab, dcfg)
