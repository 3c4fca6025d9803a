"""Flat dotted-key run configuration.

A config file is plain text, one ``section.key = value`` assignment per line,
``#`` starting a comment.  Lists are comma separated.  Every key has a typed
default, so an empty file is a valid configuration; unknown keys and values
that do not parse are :class:`ConfigError`.

>>> cfg = RunConfig()
>>> cfg.set("bilevel.K", "5").bilevel.K
5
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable

from ..objectives import LEARNED_KINDS, OUTER_MODES, TRAIN_MODES
from ..tasks import FAMILIES
from .evaluation import EVAL_MODES


class ConfigError(ValueError):
    """Invalid configuration text, key or value."""


@dataclass
class SuiteSection:
    seed: int = 0
    families: list[str] = field(default_factory=lambda: list(FAMILIES))
    tasks_per_family: int = 6
    instances_per_task: int = 32
    n_content: int = 8
    min_len: int = 2
    max_len: int = 5


@dataclass
class SplitSection:
    test_types: list[str] = field(default_factory=lambda: ["rotate", "presence"])
    n_meta_test: int = 2
    valid_per_task: int = 10
    method: str = "random"  # random | kmeans
    candidates: int = 16


@dataclass
class ModelSection:
    dim: int = 32
    latent: int = 8
    init_scale: float = 0.5


@dataclass
class InstructionSection:
    mode: str = "definition"
    kind: str = "extractor_ic"
    length: int = 4
    pool_size: int = 2
    expectation: bool = False


@dataclass
class PhiSection:
    """Per-parameterization outer settings; an empty value inherits ``bilevel.*``."""

    embedder_dp_outer_optimizer: str = ""
    embedder_dp_outer_lr: str = "0.002"
    embedder_ic_outer_optimizer: str = ""
    embedder_ic_outer_lr: str = "0.002"
    extractor_dp_outer_optimizer: str = "sgd"
    extractor_dp_outer_lr: str = "30"
    extractor_ic_outer_optimizer: str = "adam"
    extractor_ic_outer_lr: str = "0.1"


@dataclass
class BilevelSection:
    K: int = 20
    M: int = 1
    gamma: float = 0.01
    inner_lr: float = 0.01
    outer_lr: float = 0.05
    inner_optimizer: str = "adam"
    outer_optimizer: str = "adam"
    n_outer: int = 100
    batch_size: int = 16
    outer_batch_size: int = 16
    outer_mode: str = "definition"
    patience: int = 0
    check_contraction: bool = False
    carry_inner_state: bool = False


@dataclass
class TrainSection:
    epochs: float = 30.0
    lr: float = 0.01
    optimizer: str = "adam"
    batch_size: int = 16


@dataclass
class EvalSection:
    mode: str = "zero-shot-definition"
    max_len: int = 8
    exemplar_seed: int = 0


@dataclass
class RunSection:
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = ""
    name: str = "run"
    arms: list[str] = field(default_factory=list)
    sweep_axis: str = "length"
    sweep_values: list[int] = field(default_factory=list)
    eval_every: int = 10


SECTIONS = {
    "suite": SuiteSection,
    "split": SplitSection,
    "model": ModelSection,
    "instruction": InstructionSection,
    "bilevel": BilevelSection,
    "phi": PhiSection,
    "train": TrainSection,
    "eval": EvalSection,
    "run": RunSection,
}


def _field_types(cls) -> dict[str, str]:
    return {f.name: f.type for f in fields(cls)}


def _convert(text: str, type_name: str, key: str) -> Any:
    text = text.strip()
    try:
        if type_name == "int":
            return int(text)
        if type_name == "float":
            return float(text)
        if type_name == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if type_name == "str":
            return text
        if type_name == "list[str]":
            return [t.strip() for t in text.split(",") if t.strip()]
        if type_name == "list[int]":
            return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot read {text!r} as {type_name}") from exc
    raise ConfigError(f"{key}: unsupported type {type_name}")  # pragma: no cover


@dataclass
class RunConfig:
    suite: SuiteSection = field(default_factory=SuiteSection)
    split: SplitSection = field(default_factory=SplitSection)
    model: ModelSection = field(default_factory=ModelSection)
    instruction: InstructionSection = field(default_factory=InstructionSection)
    bilevel: BilevelSection = field(default_factory=BilevelSection)
    phi: PhiSection = field(default_factory=PhiSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def set(self, key: str, value: str) -> "RunConfig":
        """Assign one dotted key from its text form, in place."""
        section, _, name = key.strip().partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        types = _field_types(SECTIONS[section])
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(getattr(self, section), name, _convert(value, types[name], key))
        return self

    def get(self, key: str) -> Any:
        section, _, name = key.partition(".")
        return getattr(getattr(self, section), name)

    def items(self) -> Iterable[tuple[str, Any]]:
        for section in SECTIONS:
            sec = getattr(self, section)
            for f in fields(sec):
                yield f"{section}.{f.name}", getattr(sec, f.name)

    def to_text(self) -> str:
        lines = []
        for key, value in self.items():
            if isinstance(value, list):
                value = ", ".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def copy(self) -> "RunConfig":
        return RunConfig(**{s: replace(getattr(self, s)) for s in SECTIONS}).with_lists_copied()

    def with_lists_copied(self) -> "RunConfig":
        for section in SECTIONS:
            sec = getattr(self, section)
            for f in fields(sec):
                v = getattr(sec, f.name)
                if isinstance(v, list):
                    setattr(sec, f.name, list(v))
        return self

    def validate(self) -> "RunConfig":
        s = self.suite
        unknown = [f for f in s.families if f not in FAMILIES]
        if unknown:
            raise ConfigError(f"suite.families: unknown family {unknown[0]!r}")
        if s.tasks_per_family < 1 or s.instances_per_task < 2:
            raise ConfigError("suite: need at least one task per family and two instances per task")
        if not 1 <= s.min_len <= s.max_len:
            raise ConfigError("suite: need 1 <= min_len <= max_len")
        missing = [t for t in self.split.test_types if t not in s.families]
        if missing:
            raise ConfigError(f"split.test_types: {missing[0]!r} is not a suite family")
        if self.split.method not in ("random", "kmeans"):
            raise ConfigError(f"split.method must be random or kmeans, got {self.split.method!r}")
        if self.split.n_meta_test < 1:
            raise ConfigError("split.n_meta_test must be >= 1")
        if self.instruction.mode not in TRAIN_MODES:
            raise ConfigError(f"instruction.mode: unknown mode {self.instruction.mode!r}")
        if self.instruction.kind not in LEARNED_KINDS:
            raise ConfigError(f"instruction.kind: unknown parameterization {self.instruction.kind!r}")
        if self.instruction.length < 1 or self.instruction.pool_size < 1:
            raise ConfigError("instruction.length and instruction.pool_size must be >= 1")
        if self.bilevel.outer_mode not in OUTER_MODES:
            raise ConfigError(f"bilevel.outer_mode: unknown mode {self.bilevel.outer_mode!r}")
        if self.eval.mode not in EVAL_MODES:
            raise ConfigError(f"eval.mode: unknown mode {self.eval.mode!r}")
        if not self.run.seeds:
            raise ConfigError("run.seeds must be nonempty")
        if self.model.dim < 1 or self.model.latent < 1:
            raise ConfigError("model dimensions must be >= 1")
        if self.run.eval_every < 0:
            raise ConfigError("run.eval_every must be >= 0")
        try:
            for kind in (None,) + LEARNED_KINDS:
                self.hypergrad_config(self.run.seeds[0], kind)
        except ValueError as exc:
            raise ConfigError(f"bilevel: {exc}") from exc
        return self

    def outer_settings(self, kind: str | None) -> tuple[str, float]:
        """Outer optimizer name and rate for a parameterization kind."""
        opt, lr = self.bilevel.outer_optimizer, self.bilevel.outer_lr
        if kind is not None:
            opt = getattr(self.phi, f"{kind}_outer_optimizer").strip() or opt
            text = getattr(self.phi, f"{kind}_outer_lr").strip()
            if text:
                lr = _convert(text, "float", f"phi.{kind}_outer_lr")
        return opt, lr

    def hypergrad_config(self, seed: int, kind: str | None = None):
        from ..bilevel import HypergradConfig

        b = self.bilevel
        outer_optimizer, outer_lr = self.outer_settings(kind)
        return HypergradConfig(
            K=b.K,
            M=b.M,
            gamma=b.gamma,
            inner_lr=b.inner_lr,
            outer_lr=outer_lr,
            inner_optimizer=b.inner_optimizer,
            outer_optimizer=outer_optimizer,
            seed=seed,
            check_contraction=b.check_contraction,
            carry_inner_state=b.carry_inner_state,
        )

    def output_dir(self, override: str | None = None) -> Path:
        """``override``, else ``run.out``, else ``$BILOPT_OUT``, else ``./bilopt_out``."""
        root = override or self.run.out or os.environ.get("BILOPT_OUT") or "bilopt_out"
        return Path(root)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {raw.strip()!r}")
        try:
            cfg.set(key.strip(), value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from exc
    return cfg


def load_config(path, overrides: Iterable[str] = ()) -> RunConfig:
    """Read ``path``, apply ``KEY=VALUE`` overrides in order, then validate."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    cfg = parse_config(p.read_text(), str(p))
    return apply_overrides(cfg, overrides).validate()


def apply_overrides(cfg: RunConfig, overrides: Iterable[str]) -> RunConfig:
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override must be KEY=VALUE, got {item!r}")
        cfg.set(key.strip(), value)
    return cfg
