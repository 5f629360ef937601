import json

import numpy as np
import pytest

from mmksum import text as X
from mmksum.data import Dialogue, SummaryTriple, Utterance
from mmksum.errors import ContractError, DatasetError, SchemaError


def make_dialogue(utts):
    return Dialogue(id="d0", utterances=tuple(Utterance(*u) for u in utts),
                    visual=None, targets=SummaryTriple("m", "d", "s"))


class TestBuildVocab:
    def test_min_freq_filters(self):
        v = X.build_vocab(["a a b"], min_freq=2)
        assert v.tokens == X.SPECIAL_TOKENS + ("a",)

    def test_min_freq_one_keeps_singletons(self):
        v = X.build_vocab(["x"], min_freq=1)
        assert "x" in v

    def test_equal_frequency_breaks_ties_lexicographically(self):
        v = X.build_vocab(["beta alpha", "alpha beta"], min_freq=1)
        assert v.id_of("alpha") < v.id_of("beta")

    def test_frequency_orders_ids(self):
        v = X.build_vocab(["zz zz zz aa"], min_freq=1)
        assert v.id_of("zz") < v.id_of("aa")

    def test_empty_corpus_rejected(self):
        with pytest.raises(DatasetError):
            X.build_vocab([], min_freq=1)

    def test_specials_occupy_first_eleven_ids(self):
        v = X.build_vocab(["hello"], min_freq=1)
        assert v.token_of(X.PAD) == "<pad>"
        assert v.token_of(X.KNOW) == "<know>"
        assert v.id_of("hello") == len(X.SPECIAL_TOKENS)

    def test_save_load_roundtrip(self, tmp_path):
        v = X.build_vocab(["fever cough fever"], min_freq=1)
        path = tmp_path / "vocab.json"
        v.save(path)
        again = X.Vocabulary.load(path)
        assert again.tokens == v.tokens

    def test_version_mismatch_refused(self, tmp_path):
        payload = json.loads(X.build_vocab(["x"]).to_json())
        payload["version"] = 99
        path = tmp_path / "vocab.json"
        path.write_text(json.dumps(payload), encoding="utf-8")
        with pytest.raises(SchemaError):
            X.Vocabulary.load(path)


class TestNormalize:
    def test_lowercase_and_collapse(self):
        assert X.normalize("  Fever\tAND   chills ") == "fever and chills"

    def test_punctuation_split(self):
        assert X.tokenize("fever, cough.") == ["fever", ",", "cough", "."]

    def test_nfc(self):
        composed = "café"
        decomposed = "café"
        assert X.tokenize(composed) == X.tokenize(decomposed)


class TestEncodeDialogue:
    def test_single_utterance(self):
        v = X.build_vocab(["fever"])
        seq = X.encode_dialogue(make_dialogue([("patient", "fever")]), v, max_len=16)
        assert seq.ids == (X.BOS, X.PATIENT, v.id_of("fever"), X.EOS)

    def test_sep_between_utterances(self):
        v = X.build_vocab(["fever rest"])
        seq = X.encode_dialogue(
            make_dialogue([("patient", "fever"), ("doctor", "rest")]), v, max_len=16)
        assert list(seq.ids).count(X.SEP) == 1
        assert seq.ids == (X.BOS, X.PATIENT, v.id_of("fever"), X.SEP,
                           X.DOCTOR, v.id_of("rest"), X.EOS)

    def test_truncation_keeps_head_and_eos(self):
        v = X.build_vocab(["w"])
        long = make_dialogue([("patient", " ".join(["w"] * 50))])
        seq = X.encode_dialogue(long, v, max_len=10)
        assert len(seq) == 10
        assert seq.ids[-1] == X.EOS
        assert seq.ids[0] == X.BOS

    def test_unknown_speaker_rejected(self):
        v = X.build_vocab(["x"])
        with pytest.raises(SchemaError):
            X.encode_dialogue(make_dialogue([("nurse", "x")]), v, max_len=8)

    def test_encoder_sequences_carry_no_task_tokens(self):
        v = X.build_vocab(["fever headache rash"])
        seq = X.encode_dialogue(
            make_dialogue([("patient", "fever headache"), ("doctor", "rash")]), v, 32)
        assert not any(i in (X.TASK_SUM, X.TASK_MCS, X.TASK_DI) for i in seq.ids)
        assert seq.ids[-1] == X.EOS

    def test_oov_maps_to_unk(self):
        v = X.build_vocab(["fever"])
        seq = X.encode_dialogue(make_dialogue([("patient", "fever zebra")]), v, 16)
        assert X.UNK in seq.ids


class TestEncodeTarget:
    def test_prefix_structure(self):
        v = X.build_vocab(["better"])
        seq = X.encode_target("better", v, task="mcs", max_len=8)
        assert seq.ids == (X.BOS, X.TASK_MCS, v.id_of("better"), X.EOS)

    def test_unknown_task_rejected(self):
        v = X.build_vocab(["x"])
        with pytest.raises(ContractError):
            X.encode_target("x", v, task="qa", max_len=8)


class TestDecodeTokens:
    def test_specials_stripped(self):
        v = X.build_vocab(["fever"])
        assert X.decode_tokens([X.BOS, v.id_of("fever"), X.EOS], v) == "fever"

    def test_empty_content(self):
        v = X.build_vocab(["x"])
        assert X.decode_tokens([X.BOS, X.EOS], v) == ""

    def test_out_of_range_rejected(self):
        v = X.build_vocab(["x"])
        with pytest.raises(ContractError):
            X.decode_tokens([len(v) + 5], v)

    def test_roundtrip_on_random_invocab_strings(self):
        v = X.build_vocab(["fever cough rash chills , . and with the for"])
        words = [t for t in v.tokens[len(X.SPECIAL_TOKENS):]]
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 9))
            s = " ".join(words[int(i)] for i in rng.integers(0, len(words), n))
            dlg = make_dialogue([("patient", s)])
            seq = X.encode_dialogue(dlg, v, max_len=64)
            assert X.decode_tokens(seq, v) == X.normalize(s)
