"""Flat ``key = value`` experiment configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Lists are comma separated. Unknown keys and bad values raise
:class:`ConfigError` naming the key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .threat import ATTACK_KINDS, AUGMENT, DISCARD, EPSILON_GRID

DEFENSES = ("none", "robust0", "robustinf", "null")
THREAT_MODELS = ("blind", "blackbox")
DATASETS = ("digits", "blobs")


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "digits"
    data_dir: str = "data/digits"
    train_size: int = 10_000
    validation_size: int = 2_000
    test_size: int = 10_000
    blob_dims: int = 20
    blob_classes: int = 4
    blob_separation: float = 8.0
    # target
    profile: str = "desk-mlp"
    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 121  # matches 1 clean + 120 NULL epochs for paired comparisons
    defense: str = "none"
    alpha: float = 0.5
    q: float = 0.9
    robust_epsilon: float = 0.1
    initial_epochs: int = 1
    adversarial_epochs: int = 120
    null_fn_samples: int = 1000
    max_features_cap: int = 0  # 0 means ceil(|X| / 2)
    # adversary
    threat_model: str = "blind"
    attacks: tuple[str, ...] = ATTACK_KINDS
    epsilon_grid: tuple[float, ...] = EPSILON_GRID
    adversary_train: int = 100
    adversary_validation: int = 50
    source_samples: int = 500
    substitute_profile: str = "desk-mlp"
    substitute_epochs: int = 50
    substitute_rounds: int = 100
    null_handling: str = AUGMENT
    # plumbing
    seed: int = 0
    out: str = "runs/default"
    target_checkpoint: str = ""
    oracle: str = ""
    host: str = "127.0.0.1"
    port: int = 7777

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(ok: bool, key: str, msg: str):
            if not ok:
                raise ConfigError(f"{key}: {msg}")

        need(self.dataset in DATASETS, "dataset", f"expected one of {', '.join(DATASETS)}")
        need(self.defense in DEFENSES, "defense", f"expected one of {', '.join(DEFENSES)}")
        need(self.threat_model in THREAT_MODELS, "threat_model",
             f"expected one of {', '.join(THREAT_MODELS)}")
        need(self.null_handling in (DISCARD, AUGMENT), "null_handling",
             f"expected {DISCARD} or {AUGMENT}")
        need(len(self.attacks) > 0 and all(a in ATTACK_KINDS for a in self.attacks), "attacks",
             f"expected a list drawn from {', '.join(ATTACK_KINDS)}")
        need(len(self.epsilon_grid) > 0 and all(0.0 < e <= 1.0 for e in self.epsilon_grid),
             "epsilon_grid", "values must lie in (0, 1]")
        need(0.0 <= self.alpha <= 1.0, "alpha", "must lie in [0, 1]")
        need(0.0 < self.q <= 1.0, "q", "must lie in (0, 1]")
        need(0.0 <= self.robust_epsilon <= 1.0, "robust_epsilon", "must lie in [0, 1]")
        need(self.learning_rate > 0, "learning_rate", "must be positive")
        need(self.batch_size > 0, "batch_size", "must be positive")
        for key in ("train_size", "validation_size", "test_size", "adversary_train",
                    "source_samples", "null_fn_samples", "blob_dims"):
            need(getattr(self, key) > 0, key, "must be positive")
        for key in ("epochs", "initial_epochs", "adversarial_epochs", "substitute_epochs",
                    "substitute_rounds", "adversary_validation", "max_features_cap"):
            need(getattr(self, key) >= 0, key, "must be non-negative")
        need(self.blob_classes >= 2, "blob_classes", "need at least two classes")
        need(0 <= self.port < 65536, "port", "must lie in [0, 65535]")

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_DEFAULTS = ExperimentConfig()


def _convert(key: str, text: str):
    default = getattr(_DEFAULTS, key)
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None
    return text


def parse_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{key or '<empty>'}: line {lineno} is not key = value")
        if key not in _FIELDS:
            raise ConfigError(f"{key}: unknown config key")
        values[key] = _convert(key, value.strip())
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"{key}: unknown config key")
        values[key] = _convert(key, value) if isinstance(value, str) else value
    return ExperimentConfig(**values)


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    if path is None:
        return parse_config("", overrides)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    return parse_config(text, overrides)
