"""Vocabulary and speaker-aware dialogue tokenization.

Tokenization is word-level over NFC-normalized, lowercased text with
punctuation split off as separate tokens. Reserved special tokens occupy
ids 0..10 in a fixed order; encoder sequences never contain task-control
tokens, decoder sequences carry exactly one right after BOS.
"""

from __future__ import annotations

import json
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field

from .errors import ContractError, DatasetError, SchemaError

PAD, BOS, EOS, UNK, SEP, PATIENT, DOCTOR, TASK_SUM, TASK_MCS, TASK_DI, KNOW = range(11)

SPECIAL_TOKENS = (
    "<pad>", "<bos>", "<eos>", "<unk>", "<sep>", "<patient>", "<doctor>",
    "<task_sum>", "<task_mcs>", "<task_di>", "<know>",
)

TASK_TOKENS = {"sum": TASK_SUM, "mcs": TASK_MCS, "di": TASK_DI}
TASK_NAMES = {v: k for k, v in TASK_TOKENS.items()}

_WS = re.compile(r"\s+")
_TOKEN = re.compile(r"\w+|[^\w\s]")

VOCAB_FORMAT = "mmksum-vocab"
VOCAB_VERSION = 1
NORMALIZATION_TAG = "nfc-lower-ws"


def normalize(text: str) -> str:
    """NFC, lowercase, whitespace collapsed to single spaces."""
    return _WS.sub(" ", unicodedata.normalize("NFC", text).lower()).strip()


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(normalize(text))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    def __len__(self):
        return len(self.ids)


class Vocabulary:
    """Immutable token<->id bijection with the reserved specials at 0..10."""

    def __init__(self, tokens: list[str], min_freq: int = 1):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise SchemaError("vocabulary must start with the reserved special tokens")
        if len(set(tokens)) != len(tokens):
            raise SchemaError("vocabulary contains duplicate tokens")
        self._tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(tokens)}
        self.min_freq = min_freq

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        """Id of a token, falling back to UNK."""
        return self._ids.get(token, UNK)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise ContractError(f"token id {idx} out of range for vocabulary of size {len(self._tokens)}")
        return self._tokens[idx]

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(self._tokens)

    def to_json(self) -> str:
        payload = {
            "format": VOCAB_FORMAT,
            "version": VOCAB_VERSION,
            "normalization": NORMALIZATION_TAG,
            "min_freq": self.min_freq,
            "tokens": self._tokens,
        }
        return json.dumps(payload, ensure_ascii=False, indent=None, separators=(",", ":"))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("format") != VOCAB_FORMAT:
            raise SchemaError(f"not a vocabulary file: {path}")
        if payload.get("version") != VOCAB_VERSION:
            raise SchemaError(
                f"vocabulary version {payload.get('version')} unsupported (expected {VOCAB_VERSION})")
        if payload.get("normalization") != NORMALIZATION_TAG:
            raise SchemaError(
                f"vocabulary normalization {payload.get('normalization')!r} unsupported")
        return cls(payload["tokens"], min_freq=payload.get("min_freq", 1))


def build_vocab(corpus: list[str], min_freq: int = 1) -> Vocabulary:
    """Count normalized tokens and keep those with frequency >= min_freq.

    Ids are assigned by descending frequency, ties broken lexicographically,
    so the mapping is deterministic for a given corpus.
    """
    if min_freq < 1:
        raise ContractError(f"min_freq must be >= 1, got {min_freq}")
    if not corpus:
        raise DatasetError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(tokenize(text))
    if not counts:
        raise DatasetError("corpus contains no tokens after normalization")
    kept = sorted((tok for tok, c in counts.items() if c >= min_freq),
                  key=lambda tok: (-counts[tok], tok))
    return Vocabulary(list(SPECIAL_TOKENS) + kept, min_freq=min_freq)


_SPEAKER_TAGS = {"patient": PATIENT, "doctor": DOCTOR}


def encode_dialogue(dialogue, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """BOS, then per utterance a speaker tag plus its tokens, SEP between
    utterances, EOS last. Head-preserving truncation keeps EOS final."""
    utterances = dialogue.utterances
    if not utterances:
        raise SchemaError("dialogue has no utterances")
    ids = [BOS]
    for i, utt in enumerate(utterances):
        tag = _SPEAKER_TAGS.get(utt.speaker)
        if tag is None:
            raise SchemaError(f"unknown speaker label {utt.speaker!r}", field="speaker")
        if i:
            ids.append(SEP)
        ids.append(tag)
        ids.extend(vocab.id_of(tok) for tok in tokenize(utt.text))
    ids.append(EOS)
    if len(ids) > max_len:
        ids = ids[: max_len - 1] + [EOS]
    return TokenSequence(tuple(ids))


def encode_target(text: str, vocab: Vocabulary, task: str, max_len: int) -> TokenSequence:
    """Decoder-side sequence [BOS, TASK_*, tokens..., EOS] for teacher forcing."""
    if task not in TASK_TOKENS:
        raise ContractError(f"unknown task {task!r} (expected one of {sorted(TASK_TOKENS)})")
    ids = [BOS, TASK_TOKENS[task]]
    ids.extend(vocab.id_of(tok) for tok in tokenize(text))
    ids.append(EOS)
    if len(ids) > max_len:
        ids = ids[: max_len - 1] + [EOS]
    return TokenSequence(tuple(ids))


def decode_tokens(ids, vocab: Vocabulary) -> str:
    """Strip specials and join remaining tokens with single spaces."""
    seq = ids.ids if isinstance(ids, TokenSequence) else ids
    words = []
    for idx in seq:
        token = vocab.token_of(int(idx))
        if idx >= len(SPECIAL_TOKENS):
            words.append(token)
    return " ".join(words)


def content_token_strings(seq: TokenSequence, vocab: Vocabulary) -> list[str]:
    """Non-special tokens of a sequence as strings (retrieval queries)."""
    return [vocab.token_of(i) for i in seq.ids if i >= len(SPECIAL_TOKENS)]
