"""Binary model checkpoints.

Layout: magic "MMKS", little-endian u32 format version, u64 header length,
UTF-8 JSON header (model config, vocab hash, train step, metrics snapshot),
then per tensor: u32 name length + name bytes, u32 rank, u32 dims, row-major
little-endian f32 payload. Training math is f64; storing f32 halves the file
and round-trips within 1e-6 relative. Writes go to a temp file followed by
an atomic rename, so a crashed run never leaves a partial checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, ModelParams
from .tensor import Tensor

MAGIC = b"MMKS"
FORMAT_VERSION = 1


def vocab_hash(vocab) -> str:
    return hashlib.sha256(vocab.to_json().encode("utf-8")).hexdigest()


def save_checkpoint(path, params: ModelParams, vocab, step: int = 0,
                    metrics: dict | None = None) -> None:
    path = Path(path)
    header = {
        "model_config": {f.name: getattr(params.cfg, f.name) for f in fields(ModelConfig)},
        "vocab_sha256": vocab_hash(vocab),
        "step": int(step),
        "metrics": metrics or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for name in sorted(params.named):
            data = params.named[name].data
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f4").tobytes())
    os.replace(tmp, path)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelParams, header dict).

    A version mismatch is refused outright rather than reinterpreted."""
    path = Path(path)
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {version} not supported (expected {FORMAT_VERSION})")
        (header_len,) = struct.unpack("<Q", _read_exact(fh, 8, "header length"))
        header = json.loads(_read_exact(fh, header_len, "header").decode("utf-8"))
        named: dict[str, Tensor] = {}
        while True:
            raw = fh.read(4)
            if not raw:
                break
            if len(raw) != 4:
                raise CheckpointError("truncated checkpoint while reading tensor name length")
            (name_len,) = struct.unpack("<I", raw)
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"{name} rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"{name} dims"))
            count = int(np.prod(dims)) if rank else 1
            payload = _read_exact(fh, 4 * count, f"{name} payload")
            arr = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
            named[name] = Tensor(arr, requires_grad=True, name=name)
    cfg = ModelConfig(**header["model_config"])
    cfg.validate()
    params = ModelParams(cfg, named)
    return params, header


def verify_vocab(header: dict, vocab) -> None:
    expected = header.get("vocab_sha256")
    actual = vocab_hash(vocab)
    if expected != actual:
        raise CheckpointError(
            f"vocabulary hash mismatch: checkpoint was trained with {expected[:12]}..., "
            f"the provided vocabulary hashes to {actual[:12]}...")
