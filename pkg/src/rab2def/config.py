"""Experiment configuration: a flat ``key = value`` text format.

Blank lines and ``#`` comments are ignored.  Every key must name a field of
:class:`ExperimentConfig`; unknown keys are an error.  Integer fields marked
``auto`` accept the literal ``auto`` (stored as ``None``) and are resolved per
round from the number of participants.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

DEFENSES = (
    "fedavg", "median", "trimmed_mean", "multikrum", "bulyan",
    "norm_clip", "wdp", "rlr", "ddaba", "rab2def",
)
ATTACK_CHOICES = ("none", "label_flip", "random_weights", "backdoor")
DATASETS = ("synth", "idx", "cifar")


@dataclass
class ExperimentConfig:
    # data source
    dataset: str = "synth"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    cifar_train: str = ""  # comma-separated batch files
    cifar_test: str = ""
    max_train: int = 0  # 0 keeps everything
    max_test: int = 0
    synth_classes: int = 4
    synth_dims: int = 20
    synth_train_per_class: int = 500
    synth_test_per_class: int = 250
    synth_spread: float = 0.15
    validation_fraction: float = 0.2

    # model and local training
    hidden: str = "16"  # comma-separated hidden sizes, empty for none
    activation: str = "relu"
    local_epochs: int = 1
    lr: float = 0.1
    batch_size: int = 16

    # federation
    n_clients: int = 50
    clients_per_round: int = 10
    n_adversarial: int = 0
    n_poor: int = 0
    poor_skew: float = 0.8
    rounds: int = 20
    server_lr: float = 1.0

    # attack
    attack: str = "none"
    pattern: str = "cross"
    pattern_size: int = 3
    pattern_intensity: float = 0.0
    target_label: int = 0
    poison_fraction: float = 0.5
    random_scale: float = 1.0
    boost_byzantine: bool = False

    # defense
    defense: str = "fedavg"
    clip_norm: float = 1.0
    noise_sigma: float = 0.01
    rlr_theta: int | None = None  # auto: expected adversaries per round + 1
    trim: float = 0.15
    n_select: int | None = None  # auto: 20% of participants (Multi-Krum)
    n_byz: int | None = None  # auto: expected adversaries per round
    lle_mode: str = "gradient"
    lle_instances: int = 32
    lle_perturb: int = 200
    lle_radius: float = 0.05

    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(int(h) for h in self.hidden.split(",") if h.strip())

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.dataset in DATASETS, f"dataset must be one of {DATASETS}")
        need(self.attack in ATTACK_CHOICES, f"attack must be one of {ATTACK_CHOICES}")
        need(self.defense in DEFENSES, f"defense must be one of {DEFENSES}")
        need(self.n_clients >= 1, "n_clients must be >= 1")
        need(1 <= self.clients_per_round <= self.n_clients, "clients_per_round must lie in [1, n_clients]")
        need(self.n_adversarial >= 0 and self.n_poor >= 0, "client counts must be non-negative")
        need(self.n_adversarial + self.n_poor <= self.n_clients, "n_adversarial + n_poor exceeds n_clients")
        need(self.attack != "none" or self.n_adversarial == 0, "adversarial clients need an attack")
        need(self.rounds >= 0 and self.local_epochs >= 0, "rounds and local_epochs must be non-negative")
        for name in ("lr", "server_lr", "clip_norm", "random_scale", "lle_radius", "synth_spread"):
            need(getattr(self, name) > 0 or (name == "synth_spread" and self.synth_spread == 0),
                 f"{name} must be positive")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(0.0 < self.validation_fraction < 1.0, "validation_fraction must lie in (0, 1)")
        need(0.0 <= self.poor_skew <= 1.0, "poor_skew must lie in [0, 1]")
        need(0.0 < self.poison_fraction <= 1.0, "poison_fraction must lie in (0, 1]")
        need(0.0 <= self.trim < 0.5, "trim must lie in [0, 0.5)")
        need(self.noise_sigma >= 0, "noise_sigma must be non-negative")
        need(self.lle_mode in ("gradient", "surrogate"), "lle_mode must be gradient or surrogate")
        need(self.activation in ("relu", "tanh"), "activation must be relu or tanh")
        need(self.pattern in ("cross", "square"), "pattern must be cross or square")
        need(0.0 <= self.pattern_intensity <= 1.0, "pattern_intensity must lie in [0, 1]")
        try:
            sizes = self.hidden_sizes
        except ValueError:
            raise ConfigError(f"hidden must be a comma-separated list of integers, got {self.hidden!r}")
        need(all(s >= 1 for s in sizes), "hidden sizes must be positive")


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name].type
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "int | None":
            return None if raw.lower() == "auto" else int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name in _FIELDS:
        v = getattr(cfg, name)
        if v is None:
            v = "auto"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{name} = {v}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return dataclasses.replace(cfg, **changes)

