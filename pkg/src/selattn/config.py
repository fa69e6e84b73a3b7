"""Model and training configuration, stored as ``key=value`` text."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

ATTENTION_VARIANTS = ("flat-sentence", "flat-word", "hier-sparse-soft", "hier-sparse-sparse")
INTEGRATIONS = ("encoder", "decoder")
SETTINGS = ("offline", "online")


@dataclass(frozen=True)
class ModelConfig:
    src_vocab: int = 0
    tgt_vocab: int = 0
    model_dim: int = 128
    ff_dim: int = 512
    layers: int = 2
    heads: int = 4
    dropout_sentence: float = 0.1
    dropout_context: float = 0.2
    label_smoothing: float = 0.1
    attention: str = "hier-sparse-soft"
    integration: str = "encoder"
    setting: str = "online"
    max_positions: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.heads <= 0 or self.model_dim % self.heads:
            raise ValueError(f"heads={self.heads} must divide model_dim={self.model_dim}")
        for rate in (self.dropout_sentence, self.dropout_context, self.label_smoothing):
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"rate {rate} outside [0, 1)")
        if self.attention not in ATTENTION_VARIANTS:
            raise ValueError(f"attention must be one of {ATTENTION_VARIANTS}")
        if self.integration not in INTEGRATIONS:
            raise ValueError(f"integration must be one of {INTEGRATIONS}")
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def hierarchical(self) -> bool:
        return self.attention.startswith("hier")

    @property
    def word_normalizer(self) -> str:
        return "sparsemax" if self.attention == "hier-sparse-sparse" else "softmax"

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_docs: int = 1
    max_epochs: int = 20
    patience: int = 3
    freeze_sentence: bool = False
    seed: int = 0


def _coerce(value: str, typ):
    if typ is bool or typ == "bool":
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return value.strip()


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def format_kv(pairs: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in pairs.items())


def _build(cls, kv: dict[str, str]):
    known = {f.name: f.type for f in fields(cls)}
    args = {k: _coerce(v, known[k]) for k, v in kv.items() if k in known}
    return cls(**args)


def load_configs(text: str) -> tuple[ModelConfig, TrainConfig]:
    """Parse one file holding both model and training keys; unknown keys are an error."""
    kv = parse_kv(text)
    names = {f.name for f in fields(ModelConfig)} | {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(kv) - names)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return _build(ModelConfig, kv), _build(TrainConfig, kv)


def model_config_to_kv(cfg: ModelConfig) -> dict[str, str]:
    return {f.name: str(getattr(cfg, f.name)) for f in fields(cfg)}


def model_config_from_kv(kv: dict[str, str]) -> ModelConfig:
    return _build(ModelConfig, kv)
