"""Experiment configuration as flat ``section.key = value`` text.

Every dataclass field of every component config is addressable by a dotted
path, e.g. ``hafed_train.optimizer.lr0 = 0.001``. Values are Python literals;
bare words are read as strings.
"""
from __future__ import annotations

import ast
import copy
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .agent import PpoConfig
from .core import OptimizerConfig
from .datagen import SyntheticConfig
from .hafed import HafedConfig, HafedTrainConfig
from .tsu import TsuConfig


class ConfigError(ValueError):
    """Unknown key, bad value, or invalid combination of settings."""


@dataclass
class DataConfig:
    path: str = ""                 # existing dataset directory; empty means generate in memory
    n_pos: int = 100
    n_neg: int = 100
    split_fracs: tuple[float, float, float] = (0.6, 0.2, 0.2)


@dataclass
class EvalConfig:
    budgets: tuple[float, ...] = (0.1, 0.2)
    policy: str = "deterministic"   # deterministic | full | top-k | top-p
    top_k: int = 5
    top_p: float = 0.9
    random_repeats: int = 3         # seeds for the random-policy and random-sampling baselines
    ece_bins: int = 10


@dataclass
class AblationConfig:
    """Switches for the ablation variants; each maps to one comparison row."""
    feature_degradation: bool = False   # weaker features: more noise, smaller separation
    degraded_noise_scale: float = 1.5
    degraded_separation_scale: float = 0.75
    single_branch: bool = False         # M = 1 in the classifier
    global_update: bool = False         # learned update applied to every unvisited patch
    local_update: bool = False          # only the visited row changes
    random_policy: bool = False
    terminal_reward: bool = False
    random_sampling: bool = False       # random patch subset classified on its own


@dataclass
class ExperimentConfig:
    name: str = "default"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    data: DataConfig = field(default_factory=DataConfig)
    generator: SyntheticConfig = field(default_factory=SyntheticConfig)
    # Positive synthetic slides carry 1-8 tumor patches, so masking the top-scored
    # instances often hides every witness and acts as label noise; off by default here.
    hafed: HafedConfig = field(default_factory=lambda: HafedConfig(mask_prob=0.0))
    hafed_train: HafedTrainConfig = field(default_factory=HafedTrainConfig)
    tsu: TsuConfig = field(default_factory=TsuConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        g = self.generator
        if self.hafed.d != g.d or self.tsu.d != g.d:
            raise ConfigError(f"hafed.d / tsu.d must equal generator.d={g.d}")
        if self.hafed.k != g.k:
            raise ConfigError(f"hafed.k must equal generator.k={g.k}")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed required")
        if self.eval.policy not in ("deterministic", "full", "top-k", "top-p"):
            raise ConfigError(f"eval.policy: unknown policy {self.eval.policy!r}")
        for f in self.eval.budgets:
            if not 0 < f <= 1:
                raise ConfigError(f"eval.budgets: {f} outside (0, 1]")
        if abs(sum(self.data.split_fracs) - 1.0) > 1e-9:
            raise ConfigError("data.split_fracs: must sum to 1")
        if self.ablation.global_update and self.ablation.local_update:
            raise ConfigError("ablation: global_update and local_update are mutually exclusive")

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in flatten(self))

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return apply_overrides(cls(), parse_lines(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def flatten(obj, prefix: str = "") -> list[tuple[str, object]]:
    out = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.extend(flatten(value, key + "."))
        else:
            out.append((key, value))
    return out


def parse_lines(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def _coerce(key: str, text: str, current):
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        value = text
    if isinstance(current, bool):
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {text!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {text!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {text!r}")
        return float(value)
    if isinstance(current, tuple):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = (value,)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a sequence, got {text!r}")
        return tuple(value)
    if isinstance(current, str):
        return str(value)
    return value


def apply_overrides(config: ExperimentConfig, pairs) -> ExperimentConfig:
    """Copy of ``config`` with dotted-key overrides applied and re-validated."""
    config = copy.deepcopy(config)
    for key, text in pairs:
        *path, leaf = key.split(".")
        target = config
        for part in path:
            if not dataclasses.is_dataclass(target) or not hasattr(target, part):
                raise ConfigError(f"{key}: unknown configuration key")
            target = getattr(target, part)
        names = {f.name for f in dataclasses.fields(target)} if dataclasses.is_dataclass(target) else set()
        if leaf not in names or dataclasses.is_dataclass(getattr(target, leaf)):
            raise ConfigError(f"{key}: unknown configuration key")
        setattr(target, leaf, _coerce(key, text, getattr(target, leaf)))
    try:
        _revalidate(config)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return config


def _revalidate(obj) -> None:
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            _revalidate(value)
    post = getattr(obj, "__post_init__", None)
    if post is not None:
        post()


def load_config(path=None, overrides=()) -> ExperimentConfig:
    base = ExperimentConfig()
    pairs = []
    if path is not None:
        try:
            pairs.extend(parse_lines(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return apply_overrides(base, pairs)


def optimizer_from_dict(d: dict) -> OptimizerConfig:
    return OptimizerConfig(**d)
