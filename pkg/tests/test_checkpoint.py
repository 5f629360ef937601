import struct

import numpy as np
import pytest

from mmksum import checkpoint as C
from mmksum.errors import CheckpointError
from mmksum.model import ModelConfig, init_params
from mmksum.text import build_vocab

CFG = ModelConfig(d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                  d_ff=32, d_adapter=8, d_vis=20, d_know=16, max_len=32,
                  vocab_size=40)


@pytest.fixture()
def setup(tmp_path):
    params = init_params(CFG, seed=9)
    vocab = build_vocab(["fever cough rash " * 3])
    path = tmp_path / "model.mmks"
    return params, vocab, path


class TestRoundTrip:
    def test_within_f32_rounding(self, setup):
        params, vocab, path = setup
        C.save_checkpoint(path, params, vocab, step=17, metrics={"dev_loss": 1.25})
        loaded, header = C.load_checkpoint(path)
        assert header["step"] == 17
        assert header["metrics"]["dev_loss"] == 1.25
        assert set(loaded.named) == set(params.named)
        for name, p in params.items():
            got = loaded[name].data
            denom = np.maximum(np.abs(p.data), 1e-12)
            assert np.max(np.abs(got - p.data) / denom) <= 1e-6, name

    def test_config_restored(self, setup):
        params, vocab, path = setup
        C.save_checkpoint(path, params, vocab)
        loaded, _ = C.load_checkpoint(path)
        assert loaded.cfg == CFG

    def test_vocab_hash_verified(self, setup):
        params, vocab, path = setup
        C.save_checkpoint(path, params, vocab)
        _, header = C.load_checkpoint(path)
        C.verify_vocab(header, vocab)  # same vocab passes
        other = build_vocab(["totally different words here"])
        with pytest.raises(CheckpointError):
            C.verify_vocab(header, other)

    def test_deterministic_bytes(self, setup, tmp_path):
        params, vocab, path = setup
        C.save_checkpoint(path, params, vocab, step=3)
        path2 = tmp_path / "again.mmks"
        C.save_checkpoint(path2, params, vocab, step=3)
        assert path.read_bytes() == path2.read_bytes()


class TestRefusals:
    def test_bad_magic(self, setup):
        params, vocab, path = setup
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError) as exc:
            C.load_checkpoint(path)
        assert "magic" in str(exc.value)

    def test_version_mismatch_refused(self, setup):
        params, vocab, path = setup
        C.save_checkpoint(path, params, vocab)
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError) as exc:
            C.load_checkpoint(path)
        assert "version 99" in str(exc.value)

    def test_truncation_detected(self, setup):
        params, vocab, path = setup
        C.save_checkpoint(path, params, vocab)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError) as exc:
            C.load_checkpoint(path)
        assert "truncated" in str(exc.value)

    def test_no_partial_file_on_crash(self, setup, monkeypatch, tmp_path):
        params, vocab, _ = setup
        target = tmp_path / "crash.mmks"

        real_pack = struct.pack
        calls = {"n": 0}

        def flaky_pack(fmt, *args):
            calls["n"] += 1
            if calls["n"] == 30:
                raise RuntimeError("simulated crash mid-write")
            return real_pack(fmt, *args)

        monkeypatch.setattr(C.struct, "pack", flaky_pack)
        with pytest.raises(RuntimeError):
            C.save_checkpoint(target, params, vocab)
        assert not target.exists()  # temp file never renamed
