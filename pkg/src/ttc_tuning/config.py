"""Flat ``key = value`` run configuration.

Sections map onto dataclasses: ``model.*`` (ModelSpec), ``data.*`` (DatasetSpec
plus ``data.path`` for an on-disk dataset), ``stage1.*`` / ``stage2.*``
(StageConfig), ``ttc.*`` (TTCConfig), ``baseline.*`` (BaselineConfig) and
``pretrain.*`` (PretrainConfig). Top-level keys are ``method``, ``protocol``,
``lr_scales``, ``seed`` and ``threads``. ``#`` starts a comment. Unknown keys
and malformed values are errors that name the offending key.
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields
from typing import Any

from .data import DatasetSpec
from .petl import METHODS
from .pipeline import MethodConfig, PretrainConfig
from .plan import TrainPlan
from .vit import ModelSpec


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class DataConfig(DatasetSpec):
    path: str = ""


@dataclass
class StageConfig:
    enabled: bool = True
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 30
    batch_size: int = 32
    schedule: str = "cosine"
    tune_ln: bool = True

    def plan(self, seed: int) -> TrainPlan:
        return TrainPlan(optimizer=self.optimizer, lr=self.lr, weight_decay=self.weight_decay,
                         momentum=self.momentum, betas=(self.beta1, self.beta2),
                         epochs=self.epochs, batch_size=self.batch_size,
                         schedule=self.schedule, seed=seed)


@dataclass
class TTCConfig:
    k: int = 0  # 0 means D / 8
    depth: int = -1  # -1 means every layer
    position: str = "after_mlp"
    selector: str = "tis"
    aggregate: str = "row"
    bias: bool = True
    mode: str = "channels"
    score_batches: int = 0  # 0 means the whole training pool


@dataclass
class BaselineConfig:
    adapter_dim: int = 0  # 0 means D / 16
    adapter_act: str = "relu"
    prompt_len: int = 10
    ssf_patch_embed: bool = False


@dataclass
class RunConfig:
    method: str = "ttc"
    protocol: str = "direct"
    lr_scales: tuple[float, ...] = (1.0,)
    seed: int = 0
    threads: int = 1
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataConfig = field(default_factory=DataConfig)
    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: StageConfig = field(default_factory=lambda: StageConfig(lr=5e-4))
    ttc: TTCConfig = field(default_factory=TTCConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def method_config(self) -> MethodConfig:
        t, b = self.ttc, self.baseline
        return MethodConfig(
            stage1=self.stage1.plan(self.seed), stage2=self.stage2.plan(self.seed),
            stage1_enabled=self.stage1.enabled, tune_ln=self.stage2.tune_ln,
            k=t.k or None, depth=None if t.depth < 0 else t.depth, position=t.position,
            selector=t.selector, aggregate=t.aggregate, bias=t.bias, mode=t.mode,
            score_batches=t.score_batches or None, adapter_dim=b.adapter_dim or None,
            adapter_act=b.adapter_act, prompt_len=b.prompt_len, ssf_patch_embed=b.ssf_patch_embed,
            protocol=self.protocol, lr_scales=tuple(self.lr_scales), seed=self.seed,
            threads=self.threads,
        )


SECTIONS = ("model", "data", "stage1", "stage2", "ttc", "baseline", "pretrain")
_TOP = ("method", "protocol", "lr_scales", "seed", "threads")


def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _parse_value(key: str, raw: str, kind) -> Any:
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if typing.get_origin(kind) is tuple:
            return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}", key) from None
    raise ConfigError(f"{key}: unsupported type {kind}", key)


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_pairs(text: str) -> list[tuple[str, str, int]]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, _, val = (s.strip() for s in body.partition("="))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out.append((key, val, lineno))
    return out


def parse_config(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    pairs = [(k, v) for k, v, _ in parse_pairs(text)]
    if overrides:
        pairs += list(overrides.items())
    values: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    top: dict[str, Any] = {}
    top_hints = _hints(RunConfig)
    for key, raw in pairs:
        section, dot, name = key.partition(".")
        if not dot:
            if key not in _TOP:
                raise ConfigError(f"unknown config key {key!r}", key)
            top[key] = _parse_value(key, raw, top_hints[key])
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown config key {key!r}", key)
        hints = _hints(top_hints[section])
        if name not in hints:
            raise ConfigError(f"unknown config key {key!r}", key)
        values[section][name] = _parse_value(key, raw, hints[name])
    built = {}
    for s in SECTIONS:
        cls = top_hints[s]
        kw = values[s]
        if s == "stage2":
            kw = {"lr": 5e-4, **kw}
        try:
            built[s] = cls(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{s}: {e}", s) from None
    cfg = RunConfig(**top, **built)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {cfg.method!r}", "method")
    if cfg.protocol not in ("direct", "select"):
        raise ConfigError(f"protocol must be direct or select, got {cfg.protocol!r}", "protocol")
    if not cfg.lr_scales or any(s <= 0 for s in cfg.lr_scales):
        raise ConfigError("lr_scales must be a non-empty list of positive numbers", "lr_scales")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1", "threads")
    if not cfg.data.path:
        if cfg.data.classes != cfg.model.num_classes:
            raise ConfigError(f"data.classes={cfg.data.classes} but model.num_classes="
                              f"{cfg.model.num_classes}", "data.classes")
        if cfg.data.image_size != cfg.model.image_size:
            raise ConfigError(f"data.image_size={cfg.data.image_size} but model.image_size="
                              f"{cfg.model.image_size}", "data.image_size")
    for name in ("stage1", "stage2"):
        st = getattr(cfg, name)
        try:
            st.plan(cfg.seed)
        except ValueError as e:
            raise ConfigError(f"{name}: {e}", name) from None
    t = cfg.ttc
    if not 0 <= t.k <= cfg.model.dim:
        raise ConfigError(f"ttc.k={t.k} outside [0, {cfg.model.dim}]", "ttc.k")
    if t.depth > cfg.model.depth:
        raise ConfigError(f"ttc.depth={t.depth} exceeds model.depth={cfg.model.depth}", "ttc.depth")
    checks = {
        "ttc.position": (t.position, ("after_mhsa", "after_mlp", "both")),
        "ttc.selector": (t.selector, ("tis", "l2norm", "random")),
        "ttc.aggregate": (t.aggregate, ("row", "element", "signed")),
        "ttc.mode": (t.mode, ("channels", "weights")),
        "baseline.adapter_act": (cfg.baseline.adapter_act, ("relu", "gelu")),
    }
    for key, (val, allowed) in checks.items():
        if val not in allowed:
            raise ConfigError(f"{key} must be one of {allowed}, got {val!r}", key)


def to_text(cfg: RunConfig) -> str:
    """Canonical form: every key, top-level first, then sections in fixed order."""
    lines = [f"{k} = {_format_value(getattr(cfg, k))}" for k in _TOP]
    for s in SECTIONS:
        obj = getattr(cfg, s)
        lines.extend(f"{s}.{f.name} = {_format_value(getattr(obj, f.name))}" for f in fields(obj))
    return "\n".join(lines) + "\n"


def load_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), overrides)
