import json
import math
import pathlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmksum import metrics as M
from oracles import (oracle_bleu, oracle_jaccard, oracle_meteor, oracle_rouge_l,
                     oracle_rouge_n)

GOLDEN = json.loads((pathlib.Path(__file__).parent / "golden" / "metrics_golden.json")
                    .read_text(encoding="utf-8"))


def token_lists():
    return st.lists(st.sampled_from("a b c d e fever cough rash".split()),
                    min_size=1, max_size=8)


class TestGoldenFile:
    def test_has_30_pairs(self):
        assert len(GOLDEN) == 30

    @pytest.mark.parametrize("record", GOLDEN, ids=lambda r: f"{r['hyp'][:16]}|{r['ref'][:16]}")
    def test_implementation_matches_frozen_oracle_values(self, record):
        hyp, ref = record["hyp"].split(), record["ref"].split()
        per_n, composite = M.bleu(hyp, ref)
        assert per_n[0] == pytest.approx(record["b1"], abs=1e-6)
        assert per_n[1] == pytest.approx(record["b2"], abs=1e-6)
        assert per_n[2] == pytest.approx(record["b3"], abs=1e-6)
        assert per_n[3] == pytest.approx(record["b4"], abs=1e-6)
        assert composite == pytest.approx(record["bleu"], abs=1e-6)
        assert M.rouge_n(hyp, ref, 1) == pytest.approx(record["r1"], abs=1e-6)
        assert M.rouge_n(hyp, ref, 2) == pytest.approx(record["r2"], abs=1e-6)
        assert M.rouge_l(hyp, ref) == pytest.approx(record["rl"], abs=1e-6)
        assert M.meteor_lite(hyp, ref) == pytest.approx(record["meteor"], abs=1e-6)
        assert M.jaccard(hyp, ref) == pytest.approx(record["jaccard"], abs=1e-6)

    @pytest.mark.parametrize("record", GOLDEN, ids=lambda r: f"{r['hyp'][:16]}|{r['ref'][:16]}")
    def test_live_oracles_still_agree_with_frozen_values(self, record):
        hyp, ref = record["hyp"].split(), record["ref"].split()
        per_n, composite = oracle_bleu(hyp, ref)
        assert per_n[3] == pytest.approx(record["b4"], abs=1e-12)
        assert composite == pytest.approx(record["bleu"], abs=1e-12)
        assert oracle_rouge_l(hyp, ref) == pytest.approx(record["rl"], abs=1e-12)
        assert oracle_rouge_n(hyp, ref, 2) == pytest.approx(record["r2"], abs=1e-12)
        assert oracle_meteor(hyp, ref) == pytest.approx(record["meteor"], abs=1e-12)
        assert oracle_jaccard(hyp, ref) == pytest.approx(record["jaccard"], abs=1e-12)


class TestBleu:
    def test_identical_long_enough_scores_100(self):
        hyp = "rest well and drink warm fluids".split()
        per_n, composite = M.bleu(hyp, hyp)
        assert per_n == [100.0] * 4 and composite == 100.0

    def test_worked_brevity_penalty_example(self):
        # hand oracle: c=3, r=5, p1=3/3 -> 100*exp(1-5/3) = 51.342...
        per_n, _ = M.bleu("the cat sat".split(), "the cat sat on mat".split())
        assert per_n[0] == pytest.approx(100.0 * math.exp(1.0 - 5.0 / 3.0), abs=1e-9)
        assert per_n[0] == pytest.approx(51.34, abs=0.01)

    def test_zero_fourgram_overlap_composite_positive_via_smoothing(self):
        hyp = "a b c x d e f".split()
        ref = "a b c y d e f".split()
        _, composite = M.bleu(hyp, ref)
        assert composite > 0.0

    def test_empty_hypothesis_all_zeros(self):
        per_n, composite = M.bleu([], "a b".split())
        assert per_n == [0.0] * 4 and composite == 0.0

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError):
            M.bleu("a".split(), [])

    @given(token_lists())
    @settings(max_examples=100, deadline=None)
    def test_matches_oracle_on_random_pairs(self, toks):
        ref = list(reversed(toks)) + ["d"]
        per_n, composite = M.bleu(toks, ref)
        o_per_n, o_comp = oracle_bleu(toks, ref)
        assert per_n == pytest.approx(o_per_n, abs=1e-9)
        assert composite == pytest.approx(o_comp, abs=1e-9)


class TestRouge:
    def test_identical_is_100(self):
        toks = "a b c".split()
        assert M.rouge_n(toks, toks, 1) == 100.0
        assert M.rouge_l(toks, toks) == 100.0

    def test_disjoint_is_0(self):
        assert M.rouge_n("a b".split(), "c d".split(), 1) == 0.0
        assert M.rouge_l("a b".split(), "c d".split()) == 0.0

    def test_worked_unigram_example(self):
        # P = R = 2/3 -> F1 = 2/3
        assert M.rouge_n("a b c".split(), "a b d".split(), 1) == pytest.approx(200 / 3, abs=1e-9)

    def test_worked_lcs_example(self):
        # LCS=3, P=1, R=0.5 -> F1 = 66.67
        score = M.rouge_l("the cat sat".split(), "the cat sat on the mat".split())
        assert score == pytest.approx(200 / 3, abs=1e-9)

    def test_reversed_lcs_is_one_token(self):
        from oracles import oracle_lcs
        assert oracle_lcs("c b a".split(), "a b c".split()) == 1
        assert M.rouge_l("c b a".split(), "a b c".split()) == pytest.approx(100 / 3, abs=1e-9)

    @given(token_lists(), token_lists())
    @settings(max_examples=100, deadline=None)
    def test_lcs_matches_exhaustive_enumeration(self, a, b):
        assert M._lcs_length(a, b) == __import__("oracles").oracle_lcs(a, b)


class TestMeteor:
    def test_identity_penalty_formula(self):
        # chunks=1, matches=L -> 100*(1 - 0.5/L^3); L=3 -> 98.148...
        score = M.meteor_lite("a b c".split(), "a b c".split())
        assert score == pytest.approx(100.0 * (1 - 0.5 / 27), abs=1e-9)
        assert score == pytest.approx(98.15, abs=0.01)

    def test_disjoint_is_zero(self):
        assert M.meteor_lite("a b".split(), "x y".split()) == 0.0

    def test_stem_stage_matches_plural(self):
        assert M.meteor_lite(["cats"], ["cat"]) == pytest.approx(50.0, abs=1e-9)

    @given(st.integers(min_value=1, max_value=8))
    @settings(max_examples=20, deadline=None)
    def test_identity_formula_any_length(self, L):
        toks = [f"w{i}" for i in range(L)]
        assert M.meteor_lite(toks, toks) == pytest.approx(100.0 * (1 - 0.5 / L ** 3), abs=1e-9)


class TestJaccard:
    def test_worked_example(self):
        assert M.jaccard("a b".split(), "b c".split()) == pytest.approx(1 / 3)

    def test_both_empty(self):
        assert M.jaccard([], []) == 1.0

    @given(token_lists(), st.randoms(use_true_random=False))
    @settings(max_examples=100, deadline=None)
    def test_permutation_invariant(self, toks, rnd):
        shuffled = list(toks)
        rnd.shuffle(shuffled)
        assert M.jaccard(shuffled, toks) == M.jaccard(toks, toks)
        assert M.jaccard(shuffled, toks) == 1.0

    def test_order_sensitivity_contrast(self):
        # reordering changes BLEU-2 and ROUGE-L but never Jaccard
        a = "a b c d".split()
        b = "d c b a".split()
        assert M.bleu(a, b)[0][1] != M.bleu(a, a)[0][1]
        assert M.rouge_l(a, b) != M.rouge_l(a, a)
        assert M.jaccard(a, b) == M.jaccard(a, a)


class TestEmbedSim:
    EMB = {
        "hot": np.array([1.0, 0.0]),
        "warm": np.array([0.8, 0.6]),
        "cold": np.array([0.0, 1.0]),
    }

    def test_identical_sequences_are_1(self):
        assert M.embed_sim(["hot", "cold"], ["hot", "cold"], self.EMB) == pytest.approx(1.0)

    def test_orthogonal_embeddings_are_0(self):
        assert M.embed_sim(["hot"], ["cold"], self.EMB) == pytest.approx(0.0)

    def test_hand_cosine_example(self):
        # cos(hot, warm) = 0.8; single tokens -> P = R = 0.8 -> F1 = 0.8
        assert M.embed_sim(["hot"], ["warm"], self.EMB) == pytest.approx(0.8, abs=1e-12)

    def test_greedy_matching_two_tokens(self):
        # hyp [hot, cold] vs ref [warm]: P = mean(0.8, 0.6) = 0.7, R = max = 0.8
        score = M.embed_sim(["hot", "cold"], ["warm"], self.EMB)
        p, r = 0.7, 0.8
        assert score == pytest.approx(2 * p * r / (p + r), abs=1e-12)


class TestReporting:
    def test_identity_row_maxima(self):
        toks = "patient reports fever and chills".split()
        rep = M.score_pair(toks, toks, embed_fn=lambda t: np.array([1.0, 2.0]))
        assert rep.b1 == rep.bleu == rep.r1 == rep.rl == 100.0
        assert rep.jaccard == 1.0 and rep.embed_sim == pytest.approx(1.0)

    def test_corpus_mean_of_records(self):
        pairs = [("a b".split(), "a b".split()), ("x".split(), "y".split())]
        rep = M.corpus_report(pairs)
        assert rep.r1 == pytest.approx(50.0)
        assert rep.jaccard == pytest.approx(0.5)

    def test_csv_and_markdown_shape(self):
        row = M.format_row("MM-MDS", M.MetricReport(b1=47.31, jaccard=0.2571))
        csv = M.rows_to_csv([row])
        assert csv.splitlines()[0] == "model,B-1,B-2,B-3,B-4,BLEU,R-1,R-2,ROUGE-L,METEOR,Jaccard,EmbedSim"
        assert csv.splitlines()[1].startswith("MM-MDS,47.31,")
        md = M.rows_to_markdown([row])
        assert md.startswith("| model | B-1 |")
