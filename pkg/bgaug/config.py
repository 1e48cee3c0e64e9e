"""
Experiment configuration: one JSON document with a ``schema_version`` and the
sections ``synth``, ``aug``, ``train``, ``probe`` and ``eval``.

Missing keys take their defaults, unknown keys at any level are errors.
"""
import dataclasses
import json
import logging
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .augpipe import AugConfig
from .errors import ConfigError
from .evalkit import AttackConfig, ProbeConfig
from .learner import TrainConfig
from .synthgen import NO_FG, SPLIT_NAMES, DonorKey, SynthConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
WORKERS_ENV = "BGAUG_WORKERS"

# ε values of the attack tables, in 1/255 pixel units
DEFAULT_EPSILONS = (2, 4, 8, 16)


def _default_attacks() -> List[AttackConfig]:
    return [AttackConfig(kind, eps / 255) for kind in ("fgsm", "pgd") for eps in DEFAULT_EPSILONS]


@dataclass
class EvalConfig:
    attacks: List[AttackConfig] = field(default_factory=_default_attacks)
    splits: List[str] = field(default_factory=lambda: list(SPLIT_NAMES) + [NO_FG])
    # Mixed-Same / Mixed-Next donor grouping
    donor_key: DonorKey = "bg_class"
    split_seed: int = 0
    # test images attacked per configuration
    attack_samples: int = 500

    def validate(self):
        for name in self.splits:
            if name not in SPLIT_NAMES + (NO_FG,):
                raise ConfigError(f"eval.splits: unknown split {name!r}")
        if self.donor_key not in ("bg_class", "fg_class"):
            raise ConfigError(f"eval.donor_key must be bg_class or fg_class, got {self.donor_key!r}")
        if self.attack_samples < 1:
            raise ConfigError("eval.attack_samples must be >= 1")
        for attack in self.attacks:
            attack.validate()


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs"
    # when set, overrides synth.seed and train.seed
    seed: Optional[int] = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        # the train section never carries its own aug block
        self.train.aug = self.aug
        if self.seed is not None:
            self.apply_seed(self.seed)

    def apply_seed(self, seed: int):
        self.seed = seed
        self.synth.seed = seed
        self.train.seed = seed

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} is not supported (expected {SCHEMA_VERSION})")
        self.synth.validate()
        self.train.aug = self.aug
        self.train.validate()
        self.probe.validate()
        self.eval.validate()
        if self.train.objective == "supervised" and self.aug.mode == "bg_swaps":
            logger.warning("bg_swaps matched negatives have no effect with the supervised objective")

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data["train"].pop("aug")
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("The configuration must be a JSON object")
        if data.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {data['schema_version']} is not supported (expected {SCHEMA_VERSION})")
        if "aug" in data.get("train", {}):
            raise ConfigError("unknown key 'train.aug', augmentation settings belong in the top-level 'aug'")
        config = _build(cls, data, "")
        config.validate()
        return config

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "ExperimentConfig":
        try:
            with open(path) as source:
                data = json.load(source)
        except FileNotFoundError as error:
            raise ConfigError(f"Config file {path} does not exist") from error
        except json.JSONDecodeError as error:
            raise ConfigError(f"Config file {path} is not valid JSON: {error}") from error
        return cls.from_dict(data)


def _convert(tp, value, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if value is None:
        return None
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, f"{key}.")
    if origin is Union:
        options = [a for a in args if a is not type(None)]
        return _convert(options[0], value, key)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list")
        return [_convert(args[0], v, f"{key}[{i}]") for i, v in enumerate(value)] if args else list(value)
    if origin in (tuple, typing.Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list")
        if not args:
            return tuple(value)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{key}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{key} must have {len(args)} entries, got {len(value)}")
        return tuple(_convert(tp_i, v, f"{key}[{i}]") for i, (tp_i, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if tp is str and not isinstance(value, str):
        raise ConfigError(f"{key} must be a string")
    return value


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown key '{prefix}{key}'")
    kwargs = {key: _convert(hints[key], value, f"{prefix}{key}") for key, value in data.items()}
    return cls(**kwargs)


def resolve_workers(flag: Optional[int] = None) -> int:
    """``--workers`` if given, else ``BGAUG_WORKERS``, else 1."""
    if flag is not None:
        value = flag
    else:
        raw = os.environ.get(WORKERS_ENV)
        if raw is None or raw == "":
            return 1
        try:
            value = int(raw)
        except ValueError as error:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from error
    if value < 1:
        raise ConfigError(f"workers must be >= 1, got {value}")
    return value
