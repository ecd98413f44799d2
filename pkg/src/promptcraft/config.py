"""Flat ``section.key = value`` configuration covering every stage of the pipeline.

Lines starting with ``#`` are comments.  Unknown sections or keys are
errors, so typos never silently fall back to defaults.  Values are coerced
to the dataclass field types; ``none`` clears an optional field.
"""

from __future__ import annotations

import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable

from .data.pipeline import DataConfig
from .data.text import ModifierLexicon
from .lm.model import ModelConfig
from .oracles import DEFAULT_SEEDS, OracleConfig
from .ppo import PPOConfig
from .reward import CompositeConfig, RMConfig
from .sft import SFTConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    max_new_tokens: int = 128
    tie_eps: float = 0.05
    judge_seeds: str = ",".join(str(s) for s in DEFAULT_SEEDS)
    probe_size: int = 64
    ablation_steps: int = 2000

    def seeds(self) -> tuple[int, ...]:
        return tuple(int(s) for s in self.judge_seeds.split(",") if s.strip())


@dataclass(frozen=True)
class CorpusConfig:
    n_records: int = 1000
    high_fraction: float = 0.5
    noise_fraction: float = 0.03
    lexicon: str = ""  # path to a tab-separated phrase list; empty for the built-in list


# Desk-scale model used by the pipeline.  Three blocks make the two-thirds freeze exact;
# the context covers the longest reward-model pair encoding (~415 tokens).
DESK_MODEL = ModelConfig(n_layers=3, d_model=64, n_heads=4, context=512)


def overfit_sft() -> SFTConfig:
    """Deliberate over-fitting preset.  A from-scratch desk model needs far more passes
    than four epochs before it copies the input and emits fluent modifiers."""
    return SFTConfig(epochs=40, lr=3e-3, batch_size=16)


def desk_ppo() -> PPOConfig:
    """Learning rate sized for the small untied policy; keeps KL near the target."""
    return PPOConfig(lr=5e-5)


@dataclass
class PipelineConfig:
    model: ModelConfig = DESK_MODEL
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    data: DataConfig = field(default_factory=DataConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    sft: SFTConfig = field(default_factory=overfit_sft)
    rm: RMConfig = field(default_factory=RMConfig)
    ppo: PPOConfig = field(default_factory=desk_ppo)
    composite: CompositeConfig = field(default_factory=CompositeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def lexicon(self) -> ModifierLexicon:
        return self.oracle.lexicon

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(
            self,
            data=replace(self.data, seed=seed),
            sft=replace(self.sft, seed=seed),
            rm=replace(self.rm, seed=seed),
            ppo=replace(self.ppo, seed=seed),
        )


SECTIONS = tuple(f.name for f in fields(PipelineConfig))
_SKIP = {("oracle", "lexicon")}


def _coerce(raw: str, tp: Any, where: str) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() == "none":
            return None
        tp = args[0]
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot read {raw!r} as {tp.__name__}") from exc
    raise ConfigError(f"{where}: unsupported field type {tp}")


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{source}:{n}: key {key!r} has no section")
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"{source}:{n}: unknown section {section!r}")
        out.setdefault(section, {})[name] = value
    return out


def apply(cfg: PipelineConfig, values: dict[str, dict[str, str]]) -> PipelineConfig:
    updates = {}
    for section, kv in values.items():
        current = getattr(cfg, section)
        hints = typing.get_type_hints(type(current))
        names = {f.name for f in fields(current)}
        changes = {}
        for key, raw in kv.items():
            if key not in names:
                raise ConfigError(f"unknown key {section}.{key}")
            if section == "oracle" and key == "lexicon":
                changes[key] = ModifierLexicon.load(raw.strip())
                continue
            changes[key] = _coerce(raw, hints[key], f"{section}.{key}")
        try:
            updates[section] = replace(current, **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [{section}] settings: {exc}") from exc
    new = replace(cfg, **updates)
    if "corpus" in values and "lexicon" in values["corpus"] and new.corpus.lexicon and "oracle" not in updates:
        new = replace(new, oracle=replace(new.oracle, lexicon=ModifierLexicon.load(new.corpus.lexicon)))
    return new


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> PipelineConfig:
    """Defaults, then the file at ``path``, then ``section.key=value`` overrides."""
    cfg = PipelineConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        cfg = apply(cfg, parse_lines(p.read_text().splitlines(), str(p)))
    overrides = list(overrides)
    if overrides:
        cfg = apply(cfg, parse_lines(overrides, "<overrides>"))
    return cfg


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            if (section, f.name) in _SKIP:
                continue
            value = getattr(obj, f.name)
            lines.append(f"{section}.{f.name} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


def as_dict(cfg: PipelineConfig) -> dict:
    out = {}
    for section in SECTIONS:
        obj = getattr(cfg, section)
        out[section] = {f.name: getattr(obj, f.name) for f in fields(obj) if (section, f.name) not in _SKIP}
    return out


__all__ = ["ConfigError", "EvalConfig", "CorpusConfig", "PipelineConfig", "DESK_MODEL", "load_config",
           "dump_config", "parse_lines", "apply", "as_dict"]
