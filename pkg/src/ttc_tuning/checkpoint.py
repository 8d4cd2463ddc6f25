"""Binary checkpoints.

Layout (all integers little-endian u32)::

    b"TTCT" | version | entry count
    entry*: name length | name (UTF-8) | rank | dims[rank] | payload (little-endian f64)
    metadata: pair count | (key length | key | value length | value)*   (UTF-8)

Metadata keys written by ``save_model``: ``seed``, ``stage``, ``config``,
``spec`` and ``attachments`` (JSON list of ``{kind, desc}``).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import Tensor
from .vit import ModelSpec, TransformerModel, attachment_from_description

MAGIC = b"TTCT"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    """Malformed, truncated or unsupported checkpoint file."""


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)


def _u32(v: int) -> bytes:
    return _U32.pack(int(v))


def _text(s: str) -> bytes:
    b = s.encode("utf-8")
    return _u32(len(b)) + b


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, _u32(VERSION), _u32(len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        a = np.asarray(arr)
        if a.dtype != np.float64:
            raise CheckpointError(f"tensor {name!r} has dtype {a.dtype}; checkpoints store float64")
        parts.append(_text(name))
        parts.append(_u32(a.ndim))
        parts.extend(_u32(d) for d in a.shape)
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    parts.append(_u32(len(ckpt.meta)))
    for k, v in ckpt.meta.items():
        parts.append(_text(k))
        parts.append(_text(v))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def text(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"invalid UTF-8 in checkpoint: {e}") from None


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}; expected {VERSION}")
    ckpt = Checkpoint()
    for _ in range(r.u32()):
        name = r.text()
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        ckpt.tensors[name] = data
    for _ in range(r.u32()):
        key = r.text()
        ckpt.meta[key] = r.text()
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint metadata")
    return ckpt


def save(path, ckpt: Checkpoint) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())


# ---------------------------------------------------------------- models


def model_checkpoint(model, stage: str = "", config: str = "", seed: int | None = None) -> Checkpoint:
    atts = [{"kind": a.kind, "desc": a.describe()} for a in model.attachments]
    meta = {
        "seed": str(model.seed if seed is None else seed),
        "stage": stage,
        "config": config,
        "spec": json.dumps(asdict(model.spec), sort_keys=True),
        "model_seed": str(model.seed),
        "attachments": json.dumps(atts, sort_keys=True),
    }
    return Checkpoint(tensors={n: t.data for n, t in model.params.items()}, meta=meta)


def model_from_checkpoint(ckpt: Checkpoint) -> TransformerModel:
    try:
        spec = ModelSpec(**json.loads(ckpt.meta["spec"]))
        atts = json.loads(ckpt.meta.get("attachments", "[]"))
        seed = int(ckpt.meta.get("model_seed", ckpt.meta.get("seed", "0")))
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"checkpoint metadata lacks a usable model description: {e}") from None
    model = TransformerModel(spec, seed=seed)
    for a in atts:
        model.attach(attachment_from_description(a["kind"], a["desc"]))
    missing = set(model.params) - set(ckpt.tensors)
    extra = set(ckpt.tensors) - set(model.params)
    if missing or extra:
        raise CheckpointError(f"checkpoint tensors do not match the model: missing {sorted(missing)[:4]}, "
                              f"unexpected {sorted(extra)[:4]}")
    for n, t in model.params.items():
        arr = ckpt.tensors[n]
        if arr.shape != t.shape:
            raise CheckpointError(f"tensor {n!r} has shape {arr.shape}, model expects {t.shape}")
        model.params[n] = Tensor(arr.copy())
    return model


def save_model(path, model, stage: str = "", config: str = "", seed: int | None = None) -> None:
    save(path, model_checkpoint(model, stage, config, seed))


def load_model(path) -> tuple[TransformerModel, dict[str, str]]:
    ckpt = load(path)
    return model_from_checkpoint(ckpt), ckpt.meta
