"""Binary checkpoint format.

Layout: ``b"DATN"``, version byte ``0x01``, u32-LE length + UTF-8 ``key=value``
config blob, u32-LE tensor count, then per tensor: u32-LE length + UTF-8 name,
u32-LE rank, u32-LE dims, raw float64 little-endian data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import format_kv, model_config_from_kv, model_config_to_kv, parse_kv
from .corpus import Vocab
from .model import Model
from .tensor import Tensor

MAGIC = b"DATN"
VERSION = 1
PASS1_PREFIX = "pass1/"
# fields that change the parameter set or the forward computation
ARCH_FIELDS = ("src_vocab", "tgt_vocab", "model_dim", "ff_dim", "layers", "heads", "attention",
               "integration")
SENTENCE_FIELDS = ARCH_FIELDS[:6]


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def _blob(b: bytes) -> bytes:
    return _u32(len(b)) + b


def save_checkpoint(params: dict[str, np.ndarray], config: dict[str, str], path) -> None:
    out = bytearray(MAGIC)
    out.append(VERSION)
    out += _blob(format_kv(config).encode("utf-8"))
    out += _u32(len(params))
    for name, arr in params.items():
        a = np.asarray(arr, dtype="<f8")
        out += _blob(name.encode("utf-8"))
        out += _u32(a.ndim)
        for n in a.shape:
            out += _u32(n)
        out += a.tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {self.pos} "
                                           f"(wanted {n} more of {len(self.data)})")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    rd = _Reader(data)
    rd.take(4)
    version = rd.take(1)[0]
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    config = parse_kv(rd.take(rd.u32()).decode("utf-8"))
    params = {}
    for _ in range(rd.u32()):
        name = rd.take(rd.u32()).decode("utf-8")
        shape = tuple(rd.u32() for _ in range(rd.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(rd.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if rd.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - rd.pos} trailing bytes")
    return params, config


def save_model(model: Model, path, src_vocab: Vocab | None = None,
               tgt_vocab: Vocab | None = None) -> None:
    cfg = model_config_to_kv(model.cfg)
    cfg["has_context"] = str(model.has_context)
    if src_vocab is not None:
        cfg["vocab.src"] = " ".join(src_vocab.user_tokens)
    if tgt_vocab is not None:
        cfg["vocab.tgt"] = " ".join(tgt_vocab.user_tokens)
    params = {k: v.data for k, v in model.params.items()}
    if model.sentence_params is not None:
        params.update({PASS1_PREFIX + k: v.data for k, v in model.sentence_params.items()})
    save_checkpoint(params, cfg, path)


def load_model(path, expect=None):
    """Rebuild a :class:`Model` (and vocabularies when stored) from ``path``.

    ``expect`` (a ModelConfig) makes architecture differences an error; the
    attention variant and integration side only count when the checkpoint
    carries a context layer.  Returns ``(model, src_vocab, tgt_vocab)``.
    """
    raw, kv = load_checkpoint(path)
    cfg = model_config_from_kv(kv)
    if expect is not None:
        fields = ARCH_FIELDS if kv.get("has_context") == "True" else SENTENCE_FIELDS
        diff = [f for f in fields if getattr(expect, f) != getattr(cfg, f)]
        if diff:
            raise ConfigMismatchError(
                f"{path}: checkpoint differs in {', '.join(f'{f}={getattr(cfg, f)}' for f in diff)}")
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()
              if not k.startswith(PASS1_PREFIX)}
    model = Model(cfg, params)
    pass1 = {k[len(PASS1_PREFIX):]: Tensor(v, name=k) for k, v in raw.items()
             if k.startswith(PASS1_PREFIX)}
    model.sentence_params = pass1 or None
    src_vocab = Vocab(kv["vocab.src"].split()) if kv.get("vocab.src") else None
    tgt_vocab = Vocab(kv["vocab.tgt"].split()) if kv.get("vocab.tgt") else None
    return model, src_vocab, tgt_vocab


def check_compatible(model: Model, path) -> None:
    """Raise ConfigMismatchError if ``path`` cannot be loaded into ``model``."""
    load_model(path, expect=model.cfg)
