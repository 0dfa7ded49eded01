"""
Experiment configuration: one keyword-only dataclass per concern, composed into an
ExperimentConfig. Config files are JSON objects nested by concern and validated against
erdet.schemas.generate_config_schema(). Values resolve as flags > file > defaults.
"""

import copy
import dataclasses
import json
import os
from pathlib import Path

import jsonschema.exceptions

from erdet.erdistill import DistillConfig
from erdet.errors import ConfigurationError
from erdet.schemas import dump_json, generate_config_schema, load_json, validate
from erdet.synthshapes import SceneSpec, TaskSplit, make_protocol
from erdet.tinydet.model import HeadConfig
from erdet.trainer import TrainConfig


@dataclasses.dataclass(frozen=True, kw_only=True)
class HeadOptions:
    """The HeadConfig fields a config file sets; the rest come from the scene."""

    num_bins: int = 8
    pyramid_strides: tuple[int, ...] = (8, 16)
    channels: int = 64

    def __post_init__(self):
        object.__setattr__(self, "pyramid_strides", tuple(self.pyramid_strides))


@dataclasses.dataclass(frozen=True, kw_only=True)
class ProtocolConfig:
    """A named protocol, or explicit steps which then take precedence over the name."""

    name: str = "one_step"
    base_fraction: float = 0.5
    steps: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        if self.steps is not None:
            object.__setattr__(self, "steps", tuple(tuple(s) for s in self.steps))

    def split(self, num_categories: int) -> TaskSplit:
        if self.steps is not None:
            split = TaskSplit(tuple(frozenset(s) for s in self.steps))
            if max(split.categories) >= num_categories:
                raise ConfigurationError(
                    f"Protocol steps name categories beyond the scene's {num_categories}"
                )
            return split
        return make_protocol(self.name, num_categories, self.base_fraction)

    def to_dict(self) -> dict:
        d = {"name": self.name, "base_fraction": self.base_fraction}
        if self.steps is not None:
            d["steps"] = [list(s) for s in self.steps]
        return d


@dataclasses.dataclass(frozen=True, kw_only=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "runs"
    data_dir: str | None = None
    scene: SceneSpec = dataclasses.field(default_factory=SceneSpec)
    head: HeadOptions = dataclasses.field(default_factory=HeadOptions)
    protocol: ProtocolConfig = dataclasses.field(default_factory=ProtocolConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    distill: DistillConfig = dataclasses.field(default_factory=DistillConfig)

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.name

    @property
    def dataset_dir(self) -> Path:
        return Path(self.data_dir) if self.data_dir else self.run_dir / "data"

    def head_config(self) -> HeadConfig:
        return HeadConfig(
            num_categories_total=self.scene.num_categories,
            num_bins=self.head.num_bins,
            pyramid_strides=self.head.pyramid_strides,
            channels=self.head.channels,
            image_size=self.scene.image_size,
        )

    def split(self) -> TaskSplit:
        return self.protocol.split(self.scene.num_categories)

    def validate(self):
        self.scene.validate()
        self.head_config().validate()
        self.split()
        self.train.validate()
        self.distill.validate()

        existing = Path(self.output_dir).absolute()
        while not existing.exists():
            existing = existing.parent
        if not os.access(existing, os.W_OK):
            raise ConfigurationError(f"Output directory {self.output_dir} is not writable")

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("seed")
        return {
            "name": self.name,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data_dir": self.data_dir,
            "scene": self.scene.to_dict(),
            "head": {
                "num_bins": self.head.num_bins,
                "pyramid_strides": list(self.head.pyramid_strides),
                "channels": self.head.channels,
            },
            "protocol": self.protocol.to_dict(),
            "train": train,
            "distill": dataclasses.asdict(self.distill),
        }

    def to_json(self) -> str:
        return dump_json(self.to_dict(), generate_config_schema())

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        """
        Builds a config from a (validated) nested dict. The top-level seed drives training and,
        unless the scene section sets its own, dataset generation.
        """
        try:
            validate(d, generate_config_schema())
        except jsonschema.exceptions.ValidationError as e:
            raise ConfigurationError(f"Invalid config: {e.message}") from e
        seed = d.get("seed", 0)
        scene = dict(d.get("scene", {}))
        scene.setdefault("seed", seed)
        try:
            return cls(
                name=d.get("name", "experiment"),
                seed=seed,
                output_dir=d.get("output_dir", "runs"),
                data_dir=d.get("data_dir"),
                scene=SceneSpec.from_dict(scene),
                head=HeadOptions(**d.get("head", {})),
                protocol=ProtocolConfig(**d.get("protocol", {})),
                train=TrainConfig.from_dict({**d.get("train", {}), "seed": seed}),
                distill=DistillConfig(**d.get("distill", {})),
            )
        except TypeError as e:
            raise ConfigurationError(f"Invalid config: {e}") from e


def merge(base: dict, overrides: dict) -> dict:
    """Recursively overlays overrides on base. None values in overrides are ignored."""
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        elif isinstance(value, dict):
            out[key] = merge({}, value)
        else:
            out[key] = value
    return out


def load_config(path: Path | str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Reads an optional config file, applies flag overrides on top and validates the result."""
    try:
        document = load_json(path) if path else {}
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot read config file {path}: {e}") from e
    return ExperimentConfig.from_dict(merge(document, overrides or {}))
