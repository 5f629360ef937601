import numpy as np
import pytest

from mmksum import generation as G
from mmksum.config import DecodeConfig
from mmksum.generation import generate_from_record
from mmksum.text import SPECIAL_TOKENS


def rigged_logprob_fn(vocab_size, seed):
    """Deterministic context-dependent log-probabilities for tests."""
    rng = np.random.default_rng(seed)
    cache = {}

    def fn(prefix):
        if prefix not in cache:
            local = np.random.default_rng((seed, len(prefix), hash(prefix) & 0xFFFF))
            logits = local.normal(size=vocab_size) * 3.0
            z = logits - logits.max()
            cache[prefix] = z - np.log(np.exp(z).sum())
        return cache[prefix]

    return fn


def exhaustive_best(logprob_fn, eos_id, vocab_size, dcfg):
    """Enumerate every path up to max_new_tokens; same scoring and tie-break
    as the beam implementation."""
    best = None

    def walk(prefix, total):
        nonlocal best
        if prefix and (prefix[-1] == eos_id or len(prefix) == dcfg.max_new_tokens):
            score = G.path_score(total, len(prefix), dcfg.length_penalty)
            cand = (score, prefix)
            if best is None or (-cand[0], cand[1]) < (-best[0], best[1]):
                best = cand
            return
        logps = logprob_fn(prefix)
        for tok in range(vocab_size):
            walk(prefix + (tok,), total + float(logps[tok]))

    walk((), 0.0)
    return best[1], best[0]


class TestBeamCore:
    @pytest.mark.parametrize("seed", range(8))
    @pytest.mark.parametrize("alpha", [0.0, 0.6])
    def test_wide_beam_matches_exhaustive_enumeration(self, seed, alpha):
        vocab, steps = 4, 3
        dcfg = DecodeConfig(strategy="beam", beam_width=vocab ** steps,
                            max_new_tokens=steps, length_penalty=alpha)
        fn = rigged_logprob_fn(vocab, seed)
        got_ids, got_score = G.beam_decode(fn, eos_id=0, dcfg=dcfg)
        want_ids, want_score = exhaustive_best(fn, 0, vocab, dcfg)
        assert got_ids == want_ids
        assert got_score == pytest.approx(want_score, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_width_one_equals_greedy_on_rigged_models(self, seed):
        vocab = 7
        fn = rigged_logprob_fn(vocab, seed)
        dcfg_g = DecodeConfig(strategy="greedy", beam_width=1, max_new_tokens=6)
        dcfg_b = DecodeConfig(strategy="beam", beam_width=1, max_new_tokens=6)
        g_ids, g_score = G.greedy_decode(fn, eos_id=0, dcfg=dcfg_g)
        b_ids, b_score = G.beam_decode(fn, eos_id=0, dcfg=dcfg_b)
        assert g_ids == b_ids
        assert g_score == pytest.approx(b_score, abs=1e-12)

    def test_immediate_eos_yields_single_eos(self):
        def fn(prefix):
            logps = np.full(5, -10.0)
            logps[0] = -0.01
            return logps

        ids, score = G.greedy_decode(fn, eos_id=0, dcfg=DecodeConfig(max_new_tokens=8))
        assert ids == (0,)

    def test_alpha_zero_score_is_raw_logprob(self):
        fn = rigged_logprob_fn(4, 3)
        dcfg = DecodeConfig(strategy="greedy", beam_width=1, max_new_tokens=3,
                            length_penalty=0.0)
        ids, score = G.greedy_decode(fn, eos_id=0, dcfg=dcfg)
        total = 0.0
        for i in range(len(ids)):
            total += float(fn(ids[:i])[ids[i]])
        assert score == pytest.approx(total, abs=1e-12)

    def test_length_penalty_divides_by_len_pow_alpha(self):
        assert G.path_score(-6.0, 4, 0.5) == pytest.approx(-6.0 / 2.0)
        assert G.path_score(-6.0, 4, 0.0) == -6.0

    def test_beam_keeps_finished_hypotheses_competitive(self):
        # token 1 then EOS scores better than three mediocre tokens
        def fn(prefix):
            if prefix == ():
                return np.log(np.array([0.05, 0.9, 0.05]))
            if prefix == (1,):
                return np.log(np.array([0.98, 0.01, 0.01]))
            return np.log(np.array([0.1, 0.1, 0.8]))

        dcfg = DecodeConfig(strategy="beam", beam_width=3, max_new_tokens=3)
        ids, _ = G.beam_decode(fn, eos_id=0, dcfg=dcfg)
        assert ids == (1, 0)


class TestModelGeneration:
    def test_deterministic(self, tiny_trained):
        exp, dialogues, kb, result = tiny_trained
        record = result.records["train"][0]
        a = generate_from_record(record, "sum", result.params, result.vocab, exp.decode)
        b = generate_from_record(record, "sum", result.params, result.vocab, exp.decode)
        assert a == b

    def test_output_contains_no_special_tokens(self, tiny_trained):
        exp, dialogues, kb, result = tiny_trained
        for record in result.records["train"][:4]:
            text, score = generate_from_record(record, "mcs", result.params,
                                               result.vocab, exp.decode)
            assert isinstance(text, str) and np.isfinite(score)
            for special in SPECIAL_TOKENS:
                assert special not in text

    def test_width_one_beam_equals_greedy_on_trained_model(self, tiny_trained):
        exp, dialogues, kb, result = tiny_trained
        greedy = DecodeConfig(strategy="greedy", beam_width=1, max_new_tokens=16)
        beam1 = DecodeConfig(strategy="beam", beam_width=1, max_new_tokens=16)
        for record in result.records["train"]:
            for task in ("sum", "mcs", "di"):
                g = generate_from_record(record, task, result.params, result.vocab, greedy)
                b = generate_from_record(record, task, result.params, result.vocab, beam1)
                assert g[0] == b[0]
                assert g[1] == pytest.approx(b[1], abs=1e-12)

    def test_generate_full_path(self, tiny_trained):
        exp, dialogues, kb, result = tiny_trained
        text, score = G.generate(dialogues[0], "sum", result.params, result.vocab,
                                 result.kb_index, exp.decode)
        assert isinstance(text, str)
        assert score <= 0.0
