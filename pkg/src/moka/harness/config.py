"""Run configuration: a flat JSON object with a fixed key set.

Unknown keys are rejected; missing keys take the defaults below.
"""

from __future__ import annotations

import dataclasses
import difflib
import json
from dataclasses import dataclass, field, fields
from typing import Any

from ..adapters import CROSS_MODES, VARIANTS, AdapterSpec
from ..errors import ConfigError, ContractError
from ..netmodel import NetDims
from ..numkernel import PRECISIONS
from ..training import OptimConfig, SyntheticTaskSpec, TrainSettings


@dataclass(frozen=True)
class RunConfig:
    # adapter
    variant: str = "moka"
    rank: int = 4
    lambdas: dict = field(default_factory=dict)
    cross_mode: str | None = None
    extra_query: str | None = None
    extra_key: str | None = None
    extra_lambda: float = 1.0
    # task
    modalities: tuple = ("audio", "visual", "text")
    tokens: tuple = (8, 8, 16)
    text: str = "text"
    target: str = "visual"
    embed_dim: int = 32
    classes: int = 8
    noise: float = 0.1
    signal: float = 2.0
    distractors: bool = False
    task_seed: int = 0
    # network
    hidden_dim: int = 32
    depth: int = 2
    attach: tuple | None = None
    pool: str = "all"
    backbone_seed: int = 0
    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_ratio: float = 0.03
    batch_size: int = 16
    # run
    steps: int = 2000
    eval_every: int = 250
    eval_size: int = 512
    train_size: int = 4096
    seeds: tuple = (0, 1, 2)
    precision: str = "f32"
    out_dir: str = "runs"

    def __post_init__(self):
        for name in ("modalities", "tokens", "seeds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.attach is not None:
            object.__setattr__(self, "attach", tuple(self.attach))
        object.__setattr__(self, "lambdas", {str(k): float(v) for k, v in dict(self.lambdas).items()})
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        try:
            resolved = self.adapter_spec().cross_mode
            self.task_spec()
            self.net_dims()
        except ContractError as exc:
            raise ConfigError(str(exc)) from None
        object.__setattr__(self, "cross_mode", resolved)

    def adapter_spec(self, seed: int = 0) -> AdapterSpec:
        return AdapterSpec(self.variant, self.rank, self.lambdas, self.cross_mode, seed,
                           self.extra_query, self.extra_key, self.extra_lambda)

    def task_spec(self) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(self.modalities, self.tokens, self.text, self.target, self.embed_dim,
                                 self.classes, self.noise, self.signal, self.distractors, self.task_seed)

    def net_dims(self) -> NetDims:
        return NetDims(self.embed_dim, self.hidden_dim, self.depth, self.classes, self.attach, self.pool)

    def optim(self) -> OptimConfig:
        return OptimConfig(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay,
                           self.warmup_ratio, self.batch_size)

    def settings(self) -> TrainSettings:
        return TrainSettings(self.steps, self.eval_every, self.eval_size, self.train_size,
                             self.precision, self.backbone_seed)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_variant(self, label: str) -> "RunConfig":
        return self.replace(**variant_fields(label))

    @property
    def label(self) -> str:
        return self.adapter_spec().label

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else (dict(v) if isinstance(v, dict) else v)
        return out


KEYS = tuple(f.name for f in fields(RunConfig))

# Named variants accepted on the command line and in protocol tables.
NAMED_VARIANTS = {
    "lora": {"variant": "lora", "cross_mode": "none"},
    "multiple_lora": {"variant": "multiple_lora", "cross_mode": "none"},
    "unimodal_lora": {"variant": "unimodal_lora", "cross_mode": "none"},
    "uni_plus_mm": {"variant": "uni_plus_mm", "cross_mode": "none"},
    "uni_plus_mm_gated": {"variant": "uni_plus_mm_gated", "cross_mode": "none"},
    "moka": {"variant": "moka", "cross_mode": "task_centric"},
    "moka_wo_ca": {"variant": "moka", "cross_mode": "none"},
    "moka_reversed_query": {"variant": "moka", "cross_mode": "reversed_query"},
    "moka_naive": {"variant": "moka", "cross_mode": "naive"},
    "moka_projected": {"variant": "moka", "cross_mode": "projected"},
}


def variant_fields(label: str) -> dict:
    if label in NAMED_VARIANTS:
        return {"extra_query": None, "extra_key": None, **NAMED_VARIANTS[label]}
    if label.startswith("moka_extra_pair"):
        query = label[len("moka_extra_pair"):].lstrip("_") or None
        return {"variant": "moka", "cross_mode": "extra_pair", "extra_query": query, "extra_key": None}
    raise ConfigError(f"unknown variant {label!r}; choose from {', '.join(variant_names())}")


def variant_names() -> list[str]:
    return list(NAMED_VARIANTS) + ["moka_extra_pair_<modality>"]


def _coerce(data: dict) -> dict:
    mode = data.get("cross_mode")
    if isinstance(mode, str) and mode.startswith("extra_pair:"):
        data = dict(data, cross_mode="extra_pair", extra_query=mode.split(":", 1)[1])
    if "cross_mode" in data and data["cross_mode"] is not None and data["cross_mode"] not in CROSS_MODES:
        raise ConfigError(f"unknown cross_mode {data['cross_mode']!r}; choose from {', '.join(CROSS_MODES)}")
    return data


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = [k for k in data if k not in KEYS]
    if unknown:
        hints = []
        for k in unknown:
            close = difflib.get_close_matches(k, KEYS, n=1)
            hints.append(f"{k!r}" + (f" (did you mean {close[0]!r}?)" if close else ""))
        raise ConfigError("unknown config key(s): " + ", ".join(hints))
    try:
        return RunConfig(**_coerce(data))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(text: str) -> RunConfig:
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(data)


def emit_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2) + "\n"
