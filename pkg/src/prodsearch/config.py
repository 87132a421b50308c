"""Run configuration: one dataclass, a key=value file format, presets, stage seeds."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable

ENCODERS = ("gru1", "gru2", "transformer")
SOURCES = ("qp", "augmented")
PRESETS = tuple(f"{e}-{s}" for e in ENCODERS for s in SOURCES)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    preset: str = "transformer-qp"
    seed: int = 1

    # synthetic data
    n_products: int = 2000
    n_queries: int = 3000
    n_sessions: int = 20000

    # graphs and triplets
    broad_threshold: float = 0.3
    top_k: int = 100
    walks_per_node: int = 5
    walk_length: int = 5
    split_ratio: float = 0.85
    broad_same_atg_prob: float = 0.0
    narrow_same_atg_prob: float = 0.5
    pp_same_atg_prob: float = 0.5
    product_text: str = "description"

    # tokenizer
    vocab_size: int = 4000
    prefix_space: int = 1  # 1 -> every text gets a leading space before tokenization
    max_len: int = 64

    # GRU
    gru_dim: int = 64
    gru_epochs: int = 5
    gru_batch: int = 64
    gru_lr: float = 1e-3

    # transformer
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    d_out: int = 64
    pooling: str = "mean"
    pre_epochs: int = 1
    pre_batch: int = 8
    pre_lr: float = 3e-4
    pre_evals: int = 6
    pre_eval_queries: int = 100
    mask_rate: float = 0.15
    ft_epochs: int = 2
    ft_batch: int = 8
    ft_lr: float = 3e-4
    cut_fraction: float = 0.1
    stlr_ratio: float = 32.0
    weight_decay: float = 0.01

    # the augmented set is several times larger than the QP set, so it gets its own
    # epoch count (GRU and fine-tuning alike) to keep the triplet budget comparable
    augmented_epochs: int = 1

    # loss, evaluation and index
    margin: float = 0.5
    ann_trees: int = 16
    ann_leaf: int = 32
    ann_search_k: int = 0  # 0 -> index default
    retrieve_k: int = 50

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError(f"split_ratio must lie in (0, 1), got {self.split_ratio}")

    @property
    def encoder(self) -> str:
        return self.preset.split("-")[0]

    @property
    def source(self) -> str:
        return self.preset.split("-")[1]

    def train_epochs(self, default: int) -> int:
        return self.augmented_epochs if self.source == "augmented" else default

    def stage_seed(self, stage: str) -> int:
        return stage_seed(self.seed, stage)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def subset(self, keys: Iterable[str]) -> dict:
        d = asdict(self)
        return {k: d[k] for k in sorted(keys)}


def stage_seed(seed: int, stage: str) -> int:
    """Stable 32-bit seed for one pipeline stage."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    typ = _TYPES[key]
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from exc


def parse_pairs(lines: Iterable[str], source: str = "<overrides>") -> dict:
    out = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (), **explicit) -> RunConfig:
    """Defaults, then the file, then ``key=value`` overrides, then explicit keyword values."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_pairs(p.read_text(encoding="utf-8").splitlines(), str(p)))
    values.update(parse_pairs(overrides))
    values.update({k: v for k, v in explicit.items() if v is not None})
    return replace(RunConfig(), **values)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())
