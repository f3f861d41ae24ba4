"""Flat ``key = value`` run configuration.

Precedence for every key: command-line flag > config file > built-in default.
Blank lines and lines starting with ``#`` are ignored. Unknown keys are errors.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # encoder / adapter shape
    k_tokens: int = 5
    inject_layer: int = 3
    propagate_rep: bool = False
    heads: int = 1            # cross-attention heads in the fusion block
    beta: float = 1.0
    # objective
    alpha: float = 0.5
    lam: float = 1.0
    # adaptation
    lr: float = 5e-3
    epochs: int = 30
    batch_size: int = 32
    shots: int = 16
    variant: str = "FULL"
    seed: int = 0
    # backbone pre-training
    pretrain_lr: float = 3e-4
    pretrain_epochs: int = 12
    pretrain_batch: int = 8
    # data
    n_per_class: int = 64
    pretrain_per_class: int = 64
    # evaluation
    base_weight: float = 0.5
    conditioned: bool = True
    eval_every: int = 0
    seeds: str = "0,1,2"
    variants: str = "FULL,PHASE_ONLY,AMP_ONLY,SPATIAL,PHASE_AND_SPATIAL"
    # paths
    data_dir: str = "data"
    output_dir: str = "runs"

    def seed_list(self) -> list[int]:
        try:
            return [int(s) for s in self.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"seeds must be a comma-separated list of integers, got {self.seeds!r}") from None

    def variant_list(self) -> list[str]:
        return [v.strip().upper() for v in self.variants.split(",") if v.strip()]


# file keys that differ from the attribute name
ALIASES = {"lambda": "lam"}
FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def key_to_field(key: str) -> str:
    k = key.strip().replace("-", "_")
    return ALIASES.get(k, k)


def _coerce(name: str, raw):
    kind = FIELD_TYPES[name]
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    try:
        if kind == "bool":
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if kind == "int":
            return int(s)
        if kind == "float":
            return float(s)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {s!r} as {kind}") from None
    return s


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        name = key_to_field(key)
        if name not in FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key.strip()!r}")
        out[name] = _coerce(name, value)
    return out


def load(path=None, overrides: dict | None = None) -> RunConfig:
    """Default config, updated by the file at ``path`` and then by non-None ``overrides``."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"missing config file: {p}")
        values.update(parse_text(p.read_text(), str(p)))
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        name = key_to_field(k)
        if name not in FIELD_TYPES:
            raise ConfigError(f"unknown key {k!r}")
        values[name] = _coerce(name, v)
    cfg = replace(RunConfig(), **values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if not 0.0 <= cfg.alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {cfg.alpha}")
    if cfg.lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {cfg.lam}")
    if cfg.k_tokens < 1:
        raise ConfigError(f"k_tokens must be >= 1, got {cfg.k_tokens}")
    if cfg.epochs < 1 or cfg.pretrain_epochs < 0:
        raise ConfigError("epochs must be positive")
    if not 0.0 <= cfg.base_weight <= 1.0:
        raise ConfigError(f"base_weight must lie in [0, 1], got {cfg.base_weight}")
    cfg.seed_list()


def dumps(cfg: RunConfig) -> str:
    inv = {v: k for k, v in ALIASES.items()}
    return "".join(f"{inv.get(f.name, f.name)} = {getattr(cfg, f.name)}\n" for f in fields(RunConfig))
