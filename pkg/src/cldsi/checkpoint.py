"""Versioned binary model checkpoints.

Layout: magic "MXDS", u32 version, u32 header length, JSON header
(config, timestep, per-layer expert metadata, trainability flags), u32
block count, then named little-endian array blocks.  Round trips are
bitwise lossless, including NaN threshold entries.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict

import numpy as np

from .mixlora import LoRAExpertPair
from .model import Seq2SeqModel, TransformerConfig

MAGIC = b"MXDS"
VERSION = 1

_DTYPES = {0: "<f8", 1: "<i8"}
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.int64): 1}


def _write_block(f, name, arr):
    nb = name.encode("utf-8")
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    code = _DTYPE_CODES[np.dtype(arr.dtype)]
    f.write(struct.pack("<BB", code, arr.ndim))
    for s in arr.shape:
        f.write(struct.pack("<I", s))
    f.write(np.ascontiguousarray(arr).astype(_DTYPES[code]).tobytes())


def _read_block(f):
    (nlen,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, nlen).decode("utf-8")
    code, ndim = struct.unpack("<BB", _read_exact(f, 2))
    shape = tuple(struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    raw = _read_exact(f, count * 8)
    arr = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(shape).copy()
    return name, arr


def _read_exact(f, n):
    raw = f.read(n)
    if len(raw) != n:
        raise ValueError("truncated checkpoint")
    return raw


def save_checkpoint(model: Seq2SeqModel, path=None) -> bytes:
    header = {
        "config": asdict(model.config),
        "timestep": model.timestep,
        "slow_learner_factor": model.slow_learner_factor,
        "trainable": model.trainable,
        "mix_layers": {
            str(l): {
                "n_experts": model.decoder_layer(l).n_experts,
                "created_at": [e.created_at for e in model.decoder_layer(l).experts],
                "frozen": [e.frozen for e in model.decoder_layer(l).experts],
                "frozen_cols": list(model.decoder_layer(l).router.frozen_cols),
                "kind": model.decoder_layer(l).router.kind,
                "top_k": model.decoder_layer(l).router.top_k,
                "lora_scale": model.decoder_layer(l).lora_scale,
            }
            for l in model.mix_layer_ids()
        },
    }
    buf = io.BytesIO()
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(hb)))
    buf.write(hb)
    params = model.named_params()
    extra = {f"meta.dec.{l}.ema_tau": model.decoder_layer(l).ema_tau for l in model.mix_layer_ids()}
    buf.write(struct.pack("<I", len(params) + len(extra)))
    for name in sorted(params):
        _write_block(buf, name, params[name])
    for name in sorted(extra):
        _write_block(buf, name, extra[name])
    data = buf.getvalue()
    if path is not None:
        with open(path, "wb") as f:
            f.write(data)
    return data


def load_checkpoint(src) -> Seq2SeqModel:
    """Rebuild a model from bytes or a file path."""
    if isinstance(src, bytes):
        data = src
    else:
        with open(src, "rb") as f:
            data = f.read()
    f = io.BytesIO(data)
    magic = f.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    version, hlen = struct.unpack("<II", _read_exact(f, 8))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(_read_exact(f, hlen).decode("utf-8"))

    config = TransformerConfig(**header["config"])
    model = Seq2SeqModel(config)
    model.timestep = header["timestep"]
    model.slow_learner_factor = header["slow_learner_factor"]

    # grow expert lists to the checkpointed counts before loading arrays
    for l_str, meta in header["mix_layers"].items():
        layer = model.decoder_layer(int(l_str))
        rng = np.random.default_rng(0)
        while layer.n_experts < meta["n_experts"]:
            layer.experts.append(
                LoRAExpertPair.new(layer.dim, layer.hidden, layer.experts[0].rank, rng)
            )
            layer.router.weights = np.concatenate(
                [layer.router.weights, np.zeros((layer.dim, 1))], axis=1
            )
        for e, c, fr in zip(layer.experts, meta["created_at"], meta["frozen"]):
            e.created_at = c
            e.frozen = fr
        layer.router.frozen_cols = list(meta["frozen_cols"])
        layer.router.kind = meta["kind"]
        layer.router.top_k = meta["top_k"]
        layer.lora_scale = meta["lora_scale"]

    (n_blocks,) = struct.unpack("<I", _read_exact(f, 4))
    params = model.named_params()
    seen = set()
    for _ in range(n_blocks):
        name, arr = _read_block(f)
        seen.add(name)
        if name.startswith("meta.dec."):
            l = int(name.split(".")[2])
            model.decoder_layer(l).ema_tau = arr
        elif name in params:
            if params[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {params[name].shape} vs {arr.shape}")
            params[name][...] = arr
        else:
            raise ValueError(f"unknown parameter block {name!r}")
    missing = set(params) - seen
    if missing:
        raise ValueError(f"checkpoint is missing parameter blocks: {sorted(missing)[:3]}...")
    model.trainable = dict(header["trainable"])
    return model
