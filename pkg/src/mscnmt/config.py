"""Model and training configuration with a flat ``key=value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Tuple

MODES = ("baseline", "plain_deep", "bsc", "msc")
ABLATIONS = (
    "fusion_additive",
    "context_cell_as_ffn",
    "remove_cxt_enc_attention",
    "remove_contextual",
    "per_block_gru",
)


class ConfigError(ValueError):
    """A configuration value violates its contract; ``field`` names the key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class MscConfig:
    n_blocks: int = 2
    layers_per_block: List[int] = field(default_factory=lambda: [1, 1])
    d_model: int = 16
    d_ffn: int = 32
    heads: int = 2
    dp_a: float = 0.0
    dp_r: float = 0.0
    mode: str = "msc"
    fusion_additive: bool = False
    context_cell_as_ffn: bool = False
    remove_cxt_enc_attention: bool = False
    remove_contextual: bool = False
    per_block_gru: bool = False
    vocab_size: int = 32
    max_len: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        if self.n_blocks < 1:
            raise ConfigError("n_blocks", "must be >= 1")
        if len(self.layers_per_block) != self.n_blocks:
            raise ConfigError(
                "layers_per_block",
                f"has {len(self.layers_per_block)} entries but n_blocks={self.n_blocks}",
            )
        if any(m < 1 for m in self.layers_per_block):
            raise ConfigError("layers_per_block", "every block needs at least one layer")
        for name in ("d_model", "d_ffn", "heads", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be positive")
        if self.d_model % self.heads:
            raise ConfigError("heads", f"must divide d_model={self.d_model}")
        for name in ("dp_a", "dp_r"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(name, "must lie in [0, 1)")

    @property
    def encoder_depth(self) -> int:
        return sum(self.layers_per_block)

    @property
    def decoder_depth(self) -> int:
        return self.n_blocks

    @property
    def collaborative(self) -> bool:
        """Decoder block n attends encoder block n (bsc and msc)."""
        return self.mode in ("bsc", "msc")

    @property
    def contextual(self) -> bool:
        return self.mode == "msc" and not self.remove_contextual

    def replace(self, **changes) -> "MscConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class TrainConfig:
    label_smoothing: float = 0.1
    warmup_steps: int = 4000
    max_steps: int = 1000
    lr_scale: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    l2_lambda: float = 0.0
    tokens_per_batch: int = 2048
    seed: int = 1
    checkpoint_every: int = 1000
    keep_last: int = 5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing", "must lie in [0, 1)")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps", "must be >= 1")
        if self.l2_lambda < 0:
            raise ConfigError("l2_lambda", "must be >= 0")
        if self.max_steps < 0:
            raise ConfigError("max_steps", "must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every", "must be >= 1")
        if self.keep_last < 1:
            raise ConfigError("keep_last", "must be >= 1")
        if self.tokens_per_batch < 1:
            raise ConfigError("tokens_per_batch", "must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _parse_value(cls, name: str, raw: str):
    ftype = {f.name: f.type for f in fields(cls)}[name]
    raw = raw.strip()
    try:
        if ftype in ("bool", bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
        if ftype in ("List[int]",):
            return [int(x) for x in raw.split(",") if x.strip()]
        return raw
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {ftype}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config_text(text: str) -> Tuple[MscConfig, TrainConfig, dict]:
    """Parse ``key=value`` lines into model config, train config and extras.

    Keys of either dataclass are accepted; ``step`` and ``seed``-like metadata
    written by checkpoints land in ``extras``.  Unknown keys raise
    :class:`ConfigError` naming the key.
    """
    model_keys = {f.name for f in fields(MscConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    model_kw, train_kw, extras = {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in model_keys:
            model_kw[key] = _parse_value(MscConfig, key, value)
        elif key in train_keys:
            train_kw[key] = _parse_value(TrainConfig, key, value)
        elif key.startswith("meta."):
            extras[key[5:]] = value
        else:
            raise ConfigError(key, "unknown configuration key")
    if "n_blocks" in model_kw and "layers_per_block" not in model_kw:
        raise ConfigError("layers_per_block", "required when n_blocks is given")
    return MscConfig(**model_kw), TrainConfig(**train_kw), extras


def format_config_text(cfg: MscConfig, tcfg: TrainConfig | None = None, extras: dict | None = None) -> str:
    lines = [f"{f.name}={_format_value(getattr(cfg, f.name))}" for f in fields(MscConfig)]
    if tcfg is not None:
        lines += [f"{f.name}={_format_value(getattr(tcfg, f.name))}" for f in fields(TrainConfig)]
    for key, value in (extras or {}).items():
        lines.append(f"meta.{key}={value}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> Tuple[MscConfig, TrainConfig, dict]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))
