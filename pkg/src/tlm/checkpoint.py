"""Single-file model checkpoints: a JSON manifest followed by raw float64 buffers.

Layout::

    b"TLMCKPT\\0" | u32 format version | u64 manifest length | manifest JSON | buffers

Buffers are little-endian float64 in manifest order, so a load reproduces
every parameter bit for bit.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .attention import RegularizerSpec
from .transformer import BlockConfig, ModelConfig, Transformer

MAGIC = b"TLMCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def model_config_to_dict(cfg: ModelConfig) -> dict:
    block = cfg.block
    reg = block.regularizer
    return {
        "vocab_size": cfg.vocab_size,
        "max_len": cfg.max_len,
        "layers": cfg.layers,
        "architecture": cfg.architecture,
        "num_classes": cfg.num_classes,
        "block": {
            "d_emb": block.d_emb,
            "heads": block.heads,
            "ffn_hidden": block.ffn_hidden,
            "hidden_dropout": block.hidden_dropout,
            "ln_eps": block.ln_eps,
            "regularizer": {
                "schemes": sorted(reg.schemes),
                "rate": reg.rate,
                "p_self": reg.p_self,
                "encoder_rate": reg.encoder_rate,
                "decoder_rate": reg.decoder_rate,
                "cross_attention_tlm": reg.cross_attention_tlm,
                "independent_decoder_strategy": reg.independent_decoder_strategy,
            },
        },
    }


def model_config_from_dict(d: dict) -> ModelConfig:
    block = dict(d["block"])
    block["regularizer"] = RegularizerSpec(**block["regularizer"])
    return ModelConfig(
        vocab_size=d["vocab_size"], max_len=d["max_len"], layers=d["layers"],
        block=BlockConfig(**block), architecture=d["architecture"], num_classes=d["num_classes"],
    )


def save_checkpoint(model: Transformer, path, extra: dict | None = None) -> Path:
    path = Path(path)
    tensors, offset, blobs = [], 0, []
    for name, p in model.named_parameters():
        buf = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(buf)})
        offset += len(buf)
        blobs.append(buf)
    manifest = {
        "version": VERSION,
        "model": model_config_to_dict(model.cfg),
        "tensors": tensors,
        "extra": extra or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for buf in blobs:
            fh.write(buf)
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    manifest = json.loads(raw[start: start + hlen])
    body = raw[start + hlen:]
    state = {}
    for t in manifest["tensors"]:
        chunk = body[t["offset"]: t["offset"] + t["nbytes"]]
        if len(chunk) != t["nbytes"]:
            raise CheckpointError(f"{path}: truncated buffer for {t['name']}")
        state[t["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(t["shape"]).astype(np.float64)
    return manifest, state


def load_checkpoint(path) -> Transformer:
    manifest, state = read_checkpoint(path)
    model = Transformer(model_config_from_dict(manifest["model"]))
    model.load_state_dict(state)
    return model
