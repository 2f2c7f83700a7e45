"""Run configuration: ``key = value`` files with command-line overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping

from .distill import TrainerConfig
from .encoder import EncoderConfig
from .errors import ConfigError, ParseError
from .retrieval import DEFAULT_B, DEFAULT_K1

SEED_ENV = "RANKFORGE_SEED"


@dataclass
class RunConfig:
    # encoder
    layers: int = 2
    heads: int = 4
    hidden: int = 32
    ffn: int = 64
    max_len: int = 64
    dropout: float = 0.0
    vocab_size: int = 0  # 0 = keep every token seen in the corpus
    # trainer
    epochs: int = 50
    batch_size: int = 32
    lr_head: float = 1e-3
    lr_encoder: float = 1e-4
    margin: float = 1.0
    clip_norm: float = 5.0
    val_k: int = 20
    # data
    bm25_k1: float = DEFAULT_K1
    bm25_b: float = DEFAULT_B
    top_k: int = 100
    per_query: int = 10
    test_fold: int = 0
    fold_seed: int = 0
    seed: int = 0
    # model
    combiner_activation: str = "relu"
    # paths
    corpus: str = ""
    queries: str = ""
    qrels: str = ""
    vocab: str = ""
    sources: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "sources"]

    def set(self, key: str, raw, source: str) -> None:
        key = key.strip().replace("-", "_")
        if key not in self.keys():
            raise ConfigError(f"unknown config key {key!r} ({source})")
        kind = type(getattr(type(self)(), key))
        try:
            if kind is bool:
                value = str(raw).lower() in ("1", "true", "yes", "on")
            else:
                value = kind(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__} ({source})") from exc
        setattr(self, key, value)
        self.sources[key] = source

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(vocab_size=vocab_size, layers=self.layers, heads=self.heads, hidden=self.hidden,
                             ffn=self.ffn, max_len=self.max_len, dropout=self.dropout).validate()

    def trainer_config(self) -> TrainerConfig:
        return TrainerConfig(epochs=self.epochs, batch_size=self.batch_size, lr_head=self.lr_head,
                             lr_encoder=self.lr_encoder, margin=self.margin, seed=self.seed, val_k=self.val_k,
                             clip_norm=self.clip_norm).validate()

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.keys()}

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.as_dict().items())

    def check_paths(self, *keys: str) -> None:
        for k in keys:
            p = getattr(self, k)
            if not p:
                raise ConfigError(f"config key {k!r} is required")
            if not Path(p).is_file():
                raise ConfigError(f"{k}: no such file {p}")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}: expected 'key = value'", n)
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides: Mapping[str, object] | None = None,
                env: Mapping[str, str] | None = None) -> RunConfig:
    """Defaults < RANKFORGE_SEED < config file < explicit overrides."""
    env = os.environ if env is None else env
    cfg = RunConfig()
    if env.get(SEED_ENV):
        cfg.set("seed", env[SEED_ENV], f"env {SEED_ENV}")
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for k, v in parse_config_text(text, str(path)).items():
            cfg.set(k, v, str(path))
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg.set(k, v, "command line")
    return cfg
