"""Transformer encoder-decoder with gated bottleneck adapters.

Pre-norm stacks, learned positional embeddings, tied input/output token
embeddings. After the final encoder layer two adapters run in a fixed order
(knowledge first, then visual); each projects its modality vector into the
hidden space, mixes it with the text state through a per-position sigmoid
gate, and feeds the mix through a bottleneck back onto the residual path.
One shared decoder serves all three generation tasks; the task-control token
at prefix position 1 is the only thing that differs between them.

Shape conventions: hidden states are [len, d_model]; modality vectors are
1-D; masks are boolean numpy arrays with True meaning "blocked".
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, ContractError, DatasetError
from .knowledge import encode_knowledge_ids, retrieve
from .tensor import (Graph, Tensor, add, affine, concat_last, cross_entropy,
                     dropout, embedding, layer_norm, masked_fill, matmul,
                     matmul_nt, mul, relu, scale, sigmoid, slice_last, softmax,
                     rows_broadcast, vec_matmul)
from .text import (BOS, PAD, TASK_TOKENS, TokenSequence, content_token_strings,
                   encode_dialogue, encode_target, tokenize)

_NEG = -1e30  # attention logit for blocked positions
_LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    d_adapter: int = 16
    d_vis: int = 20
    d_know: int = 64
    max_len: int = 96
    vocab_size: int = 0  # 0 = fill in from the built vocabulary
    dropout_rate: float = 0.0
    gate_bias_init: float = 2.0

    def validate(self, require_vocab: bool = True) -> None:
        for f in fields(self):
            if f.name in ("dropout_rate", "gate_bias_init", "vocab_size"):
                continue
            if int(getattr(self, f.name)) < 1:
                raise ConfigError(f"{f.name} must be >= 1, got {getattr(self, f.name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_adapter >= self.d_model:
            raise ConfigError(
                f"d_adapter={self.d_adapter} must stay below d_model={self.d_model} (bottleneck)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")
        if self.d_know != self.d_model:
            raise ConfigError(
                f"d_know={self.d_know} must equal d_model={self.d_model}: the knowledge "
                "vector is a mean of token embeddings, which live in d_model")
        if require_vocab and self.vocab_size < 1:
            raise ConfigError("vocab_size must be set (>= 1) before initializing parameters")

    def with_vocab(self, vocab_size: int) -> "ModelConfig":
        return ModelConfig(**{**{f.name: getattr(self, f.name) for f in fields(self)},
                              "vocab_size": vocab_size})


@dataclass
class AdapterBlock:
    """The five tensors of one gated bottleneck adapter."""

    w_mod: Tensor   # [d_mod, d_model]
    w_gate: Tensor  # [2*d_model, d_model]
    b_gate: Tensor  # [d_model]
    w_down: Tensor  # [d_model, d_adapter]
    w_up: Tensor    # [d_adapter, d_model]


class ModelParams:
    """Named tensor map plus the config it was built for."""

    def __init__(self, cfg: ModelConfig, named: dict[str, Tensor]):
        self.cfg = cfg
        self.named = named

    def __getitem__(self, name: str) -> Tensor:
        return self.named[name]

    def items(self):
        return self.named.items()

    def tensors(self):
        return self.named.values()

    def param_count(self) -> int:
        return sum(t.data.size for t in self.named.values())

    def adapter(self, which: str) -> AdapterBlock:
        p = f"adapter.{which}."
        return AdapterBlock(
            w_mod=self.named[p + "w_mod"], w_gate=self.named[p + "w_gate"],
            b_gate=self.named[p + "b_gate"], w_down=self.named[p + "w_down"],
            w_up=self.named[p + "w_up"])

    def watch_into(self, graph: Graph) -> None:
        graph.watch_all(self.named.values())

    def zero_grads(self) -> None:
        for t in self.named.values():
            t.grad = None


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Deterministic init: weight matrices N(0, 0.02^2), biases 0, layer-norm
    gains 1, gate biases at cfg.gate_bias_init."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    named: dict[str, Tensor] = {}

    def weight(name, *shape):
        named[name] = Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True, name=name)

    def zeros(name, *shape):
        named[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)

    def ln(prefix):
        named[prefix + ".gain"] = Tensor(np.ones(cfg.d_model), requires_grad=True,
                                         name=prefix + ".gain")
        zeros(prefix + ".bias", cfg.d_model)

    def attention(prefix):
        for part in ("q", "k", "v", "o"):
            weight(f"{prefix}.w{part}", cfg.d_model, cfg.d_model)
            zeros(f"{prefix}.b{part}", cfg.d_model)

    def ffn(prefix):
        weight(prefix + ".w1", cfg.d_model, cfg.d_ff)
        zeros(prefix + ".b1", cfg.d_ff)
        weight(prefix + ".w2", cfg.d_ff, cfg.d_model)
        zeros(prefix + ".b2", cfg.d_model)

    weight("emb.tok", cfg.vocab_size, cfg.d_model)
    weight("emb.pos", cfg.max_len, cfg.d_model)
    for i in range(cfg.n_enc_layers):
        ln(f"enc.{i}.ln1")
        attention(f"enc.{i}.attn")
        ln(f"enc.{i}.ln2")
        ffn(f"enc.{i}.ffn")
    ln("enc.final_ln")
    for which, d_mod in (("know", cfg.d_know), ("vis", cfg.d_vis)):
        weight(f"adapter.{which}.w_mod", d_mod, cfg.d_model)
        weight(f"adapter.{which}.w_gate", 2 * cfg.d_model, cfg.d_model)
        named[f"adapter.{which}.b_gate"] = Tensor(
            np.full(cfg.d_model, float(cfg.gate_bias_init)), requires_grad=True,
            name=f"adapter.{which}.b_gate")
        weight(f"adapter.{which}.w_down", cfg.d_model, cfg.d_adapter)
        weight(f"adapter.{which}.w_up", cfg.d_adapter, cfg.d_model)
    for i in range(cfg.n_dec_layers):
        ln(f"dec.{i}.ln1")
        attention(f"dec.{i}.self")
        ln(f"dec.{i}.ln2")
        attention(f"dec.{i}.cross")
        ln(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ffn")
    ln("dec.final_ln")
    return ModelParams(cfg, named)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _multi_head_attention(params: ModelParams, prefix: str, q_src: Tensor,
                          kv_src: Tensor, blocked: np.ndarray | None) -> Tensor:
    cfg = params.cfg
    dh = cfg.d_model // cfg.n_heads
    q = add(matmul(q_src, params[prefix + ".wq"]), params[prefix + ".bq"])
    k = add(matmul(kv_src, params[prefix + ".wk"]), params[prefix + ".bk"])
    v = add(matmul(kv_src, params[prefix + ".wv"]), params[prefix + ".bv"])
    heads = []
    for h in range(cfg.n_heads):
        lo, hi = h * dh, (h + 1) * dh
        scores = scale(matmul_nt(slice_last(q, lo, hi), slice_last(k, lo, hi)),
                       1.0 / math.sqrt(dh))
        if blocked is not None:
            scores = masked_fill(scores, blocked, _NEG)
        heads.append(matmul(softmax(scores, axis=-1), slice_last(v, lo, hi)))
    return add(matmul(concat_last(heads), params[prefix + ".wo"]), params[prefix + ".bo"])


def _ffn(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    hidden = relu(add(matmul(x, params[prefix + ".w1"]), params[prefix + ".b1"]))
    return add(matmul(hidden, params[prefix + ".w2"]), params[prefix + ".b2"])


def _ln(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, params[prefix + ".gain"], params[prefix + ".bias"], _LN_EPS)


def _maybe_dropout(x: Tensor, params: ModelParams, train_mode: bool, rng) -> Tensor:
    if train_mode and params.cfg.dropout_rate > 0.0 and rng is not None:
        return dropout(x, params.cfg.dropout_rate, rng)
    return x


def gated_fusion(h: Tensor, modality: Tensor, blk: AdapterBlock) -> Tensor:
    """Per-position convex mix g*h + (1-g)*m' with a learned sigmoid gate.

    modality is 1-D; its projection is broadcast over all positions. A large
    positive gate bias saturates g toward 1, making the mix collapse onto the
    text state h.
    """
    n = h.data.shape[0]
    projected = rows_broadcast(vec_matmul(modality, blk.w_mod), n)
    gate = sigmoid(add(matmul(concat_last([h, projected]), blk.w_gate), blk.b_gate))
    return add(mul(gate, h), mul(affine(gate, -1.0, 1.0), projected))


def adapter_fuse(h: Tensor, modality: Tensor, blk: AdapterBlock) -> Tensor:
    """Residual bottleneck over the gate-fused state: out = h + Wu*relu(Wd*ln(fused)).

    The internal layer norm is parameter-free (gain 1, bias 0). With w_up at
    zero the output equals h exactly, which is the text-only bypass."""
    fused = gated_fusion(h, modality, blk)
    d = h.data.shape[-1]
    normed = layer_norm(fused, Tensor(np.ones(d)), Tensor(np.zeros(d)), _LN_EPS)
    return add(h, matmul(relu(matmul(normed, blk.w_down)), blk.w_up))


@dataclass
class EncoderStates:
    """Encoder output plus the key mask decoders need for cross-attention."""

    h: Tensor                 # [len, d_model]
    key_mask: np.ndarray      # bool [len], True where attendable (non-PAD)


def _as_ids(tokens) -> np.ndarray:
    ids = tokens.ids if isinstance(tokens, TokenSequence) else tokens
    return np.asarray(ids, dtype=np.intp)


def encode(tokens, know_vec: Tensor | None, vis_vec: Tensor | None,
           params: ModelParams, train_mode: bool = False, rng=None,
           apply_adapters: bool = True) -> EncoderStates:
    """Run the encoder stack and fuse the modality vectors.

    know_vec/vis_vec may be None for an absent modality (treated as zero
    vectors, which keeps the text-only reduction exact). PAD keys are masked
    out of every attention row."""
    cfg = params.cfg
    ids = _as_ids(tokens)
    n = ids.shape[0]
    if n < 1 or n > cfg.max_len:
        raise ConfigError(f"encoder input length {n} outside [1, {cfg.max_len}]")
    if know_vec is None:
        know_vec = Tensor(np.zeros(cfg.d_know))
    if vis_vec is None:
        vis_vec = Tensor(np.zeros(cfg.d_vis))
    if know_vec.data.shape != (cfg.d_know,):
        raise ConfigError(f"knowledge vector shape {know_vec.data.shape} != ({cfg.d_know},)")
    if vis_vec.data.shape != (cfg.d_vis,):
        raise ConfigError(f"visual vector shape {vis_vec.data.shape} != ({cfg.d_vis},)")

    key_mask = ids != PAD
    blocked = np.broadcast_to(~key_mask[None, :], (n, n)).copy()

    x = add(embedding(params["emb.tok"], ids),
            embedding(params["emb.pos"], np.arange(n, dtype=np.intp)))
    x = _maybe_dropout(x, params, train_mode, rng)
    for i in range(cfg.n_enc_layers):
        normed = _ln(params, f"enc.{i}.ln1", x)
        attn = _multi_head_attention(params, f"enc.{i}.attn", normed, normed, blocked)
        x = add(x, _maybe_dropout(attn, params, train_mode, rng))
        x = add(x, _maybe_dropout(_ffn(params, f"enc.{i}.ffn", _ln(params, f"enc.{i}.ln2", x)),
                                  params, train_mode, rng))
    x = _ln(params, "enc.final_ln", x)
    if apply_adapters:
        x = adapter_fuse(x, know_vec, params.adapter("know"))
        x = adapter_fuse(x, vis_vec, params.adapter("vis"))
    return EncoderStates(h=x, key_mask=key_mask)


def _validate_decoder_prefix(ids: np.ndarray) -> None:
    task_ids = set(TASK_TOKENS.values())
    if ids.shape[0] < 2 or ids[0] != BOS or int(ids[1]) not in task_ids:
        raise ContractError(
            "decoder prefix must begin [BOS, TASK_*]; got ids " + repr(ids[:2].tolist()))
    extra = [int(t) for t in ids[2:] if int(t) in task_ids]
    if extra:
        raise ContractError(f"duplicate task-control token(s) {extra} inside decoder prefix")


def decode_step(prefix, enc: EncoderStates, params: ModelParams,
                train_mode: bool = False, rng=None) -> Tensor:
    """Teacher-forced decoder pass: causal self-attention, cross-attention
    over the encoder states, logits through the tied embedding transpose.

    Returns logits [prefix_len, vocab_size]; the same parameters serve every
    task, only the task token at position 1 differs."""
    cfg = params.cfg
    ids = _as_ids(prefix)
    _validate_decoder_prefix(ids)
    n = ids.shape[0]
    if n > cfg.max_len:
        raise ConfigError(f"decoder prefix length {n} exceeds max_len {cfg.max_len}")
    causal = np.triu(np.ones((n, n), dtype=bool), k=1)
    cross_blocked = np.broadcast_to(~enc.key_mask[None, :],
                                    (n, enc.key_mask.shape[0])).copy()

    x = add(embedding(params["emb.tok"], ids),
            embedding(params["emb.pos"], np.arange(n, dtype=np.intp)))
    x = _maybe_dropout(x, params, train_mode, rng)
    for i in range(cfg.n_dec_layers):
        normed = _ln(params, f"dec.{i}.ln1", x)
        x = add(x, _maybe_dropout(
            _multi_head_attention(params, f"dec.{i}.self", normed, normed, causal),
            params, train_mode, rng))
        normed = _ln(params, f"dec.{i}.ln2", x)
        x = add(x, _maybe_dropout(
            _multi_head_attention(params, f"dec.{i}.cross", normed, enc.h, cross_blocked),
            params, train_mode, rng))
        x = add(x, _maybe_dropout(_ffn(params, f"dec.{i}.ffn", _ln(params, f"dec.{i}.ln3", x)),
                                  params, train_mode, rng))
    x = _ln(params, "dec.final_ln", x)
    return matmul_nt(x, params["emb.tok"])


# ---------------------------------------------------------------------------
# record preparation and the multi-task objective
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreparedRecord:
    """A dialogue reduced to model inputs, with retrieval already cached."""

    dialogue_id: str
    enc_ids: tuple[int, ...]
    know_desc_ids: tuple[tuple[int, ...], ...]  # token ids per retrieved description
    vis: tuple[float, ...] | None
    dec_ids: dict[str, tuple[int, ...]]         # task -> [BOS, TASK, ..., EOS]


def prepare_record(dialogue, vocab, kb_index, cfg: ModelConfig,
                   retrieval_k: int = 3) -> PreparedRecord:
    """Tokenize a dialogue, run retrieval once over its full encoder context,
    and cache everything the model needs (spec'd single-retrieval contract)."""
    seq = encode_dialogue(dialogue, vocab, cfg.max_len)
    hits = []
    if kb_index is not None:
        query = content_token_strings(seq, vocab)
        hits = retrieve(query, kb_index, k=retrieval_k)
    desc_ids = tuple(tuple(vocab.id_of(t) for t in tokenize(s.description))
                     for s, _ in hits)
    vis = None
    if dialogue.visual is not None:
        if len(dialogue.visual) != cfg.d_vis:
            raise ConfigError(
                f"dialogue {dialogue.id!r} visual has {len(dialogue.visual)} entries, "
                f"model expects d_vis={cfg.d_vis}")
        vis = tuple(dialogue.visual)
    dec_ids = {task: encode_target(dialogue.target_for(task), vocab, task, cfg.max_len).ids
               for task in TASK_TOKENS}
    return PreparedRecord(dialogue_id=dialogue.id, enc_ids=seq.ids,
                          know_desc_ids=desc_ids, vis=vis, dec_ids=dec_ids)


def prepare_records(dialogues, vocab, kb_index, cfg: ModelConfig,
                    retrieval_k: int = 3) -> list[PreparedRecord]:
    return [prepare_record(d, vocab, kb_index, cfg, retrieval_k) for d in dialogues]


def record_know_vec(record: PreparedRecord, params: ModelParams) -> Tensor:
    return encode_knowledge_ids(record.know_desc_ids, params["emb.tok"])


def record_vis_vec(record: PreparedRecord, params: ModelParams) -> Tensor:
    if record.vis is None:
        return Tensor(np.zeros(params.cfg.d_vis))
    return Tensor(np.asarray(record.vis, dtype=np.float64))


def encode_record(record: PreparedRecord, params: ModelParams,
                  train_mode: bool = False, rng=None) -> EncoderStates:
    return encode(np.asarray(record.enc_ids, dtype=np.intp),
                  record_know_vec(record, params), record_vis_vec(record, params),
                  params, train_mode=train_mode, rng=rng)


def teacher_labels(dec_ids) -> tuple[np.ndarray, np.ndarray]:
    """Split [BOS, TASK, y.., EOS] into decoder input and next-token labels.

    The first label (BOS -> TASK) is replaced by PAD and ignored: the task
    token is given, never predicted."""
    ids = _as_ids(dec_ids)
    dec_in = ids[:-1]
    labels = ids[1:].copy()
    labels[0] = PAD
    return dec_in, labels


def multitask_forward(batch, tasks, params: ModelParams, train_mode: bool = False,
                      rngs: dict | None = None) -> dict[str, Tensor]:
    """Per-task teacher-forced cross-entropy, one encoder pass per dialogue.

    batch is a list of PreparedRecord; tasks a subset of {sum, mcs, di}.
    Returns {task: scalar loss}, each the mean over records."""
    tasks = list(tasks)
    unknown = [t for t in tasks if t not in TASK_TOKENS]
    if unknown or not tasks:
        raise ContractError(f"tasks must be a non-empty subset of {sorted(TASK_TOKENS)}, "
                            f"got {tasks}")
    if not batch:
        raise DatasetError("empty batch")
    rngs = rngs or {}
    for record in batch:
        missing = [t for t in tasks if t not in record.dec_ids]
        if missing:
            raise DatasetError(
                f"record {record.dialogue_id!r} lacks gold target(s) {missing}")

    sums: dict[str, Tensor] = {}
    for record in batch:
        enc = encode_record(record, params, train_mode=train_mode, rng=rngs.get("enc"))
        for task in tasks:
            dec_in, labels = teacher_labels(record.dec_ids[task])
            logits = decode_step(dec_in, enc, params, train_mode=train_mode,
                                 rng=rngs.get(task))
            loss = cross_entropy(logits, labels, ignore_id=PAD)
            sums[task] = loss if task not in sums else add(sums[task], loss)
    return {task: scale(total, 1.0 / len(batch)) for task, total in sums.items()}
