"""Run configuration: one YAML file drives synthesis, training and evaluation.

The file round-trips losslessly (parse -> emit -> parse is the identity), so a
config snapshot stored next to a checkpoint fully reproduces the run together
with the seeds it records.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .adversarial import AdversarialConfig
from .detector import DetectorConfig
from .errors import ConfigurationError
from .synthesis import RainMixParams
from .training import TrainConfig


@dataclass(frozen=True)
class DataPaths:
    source_root: str = ""
    target_root: str = ""
    aux_root: str = ""
    rain_library: str = ""
    train_split: str = "train"
    val_split: str = "val"


@dataclass(frozen=True)
class SynthesisConfig:
    fog_density: float = 0.8
    atmospheric_light: float = 0.9
    rainmix: RainMixParams = field(default_factory=RainMixParams)


def _dataclass_from_dict(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    categories: tuple[str, ...] = ()
    paths: DataPaths = field(default_factory=DataPaths)
    detector: DetectorConfig = None  # built in __post_init__ when omitted
    train: TrainConfig = field(default_factory=TrainConfig)
    adversarial: AdversarialConfig = field(default_factory=AdversarialConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)

    def __post_init__(self) -> None:
        if self.detector is None:
            object.__setattr__(self, "detector", DetectorConfig(categories=self.categories))

    def to_dict(self) -> dict:
        data = {
            "seed": self.seed,
            "categories": list(self.categories),
            "paths": asdict(self.paths),
            "detector": {
                k: (list(v) if isinstance(v, tuple) else v)
                for k, v in asdict(self.detector).items()
                if k != "categories"
            },
            "train": asdict(self.train),
            "adversarial": asdict(self.adversarial),
            "synthesis": {
                "fog_density": self.synthesis.fog_density,
                "atmospheric_light": self.synthesis.atmospheric_light,
                "rainmix": {
                    k: (list(v) if isinstance(v, tuple) else v)
                    for k, v in asdict(self.synthesis.rainmix).items()
                },
            },
        }
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {"seed", "categories", "paths", "detector", "train", "adversarial",
                 "synthesis"}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        categories = tuple(data.get("categories", ()))
        detector_data = dict(data.get("detector", {}))
        detector_data["categories"] = categories
        synthesis_data = dict(data.get("synthesis", {}))
        rainmix = _dataclass_from_dict(RainMixParams, synthesis_data.pop("rainmix", {}))
        synthesis = SynthesisConfig(rainmix=rainmix, **synthesis_data)
        return cls(
            seed=int(data.get("seed", 0)),
            categories=categories,
            paths=_dataclass_from_dict(DataPaths, data.get("paths", {})),
            detector=_dataclass_from_dict(DetectorConfig, detector_data),
            train=_dataclass_from_dict(TrainConfig, data.get("train", {})),
            adversarial=_dataclass_from_dict(AdversarialConfig, data.get("adversarial", {})),
            synthesis=synthesis,
        )

    def emit(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path: Path | str) -> None:
        Path(path).write_text(self.emit(), encoding="utf-8")

    @classmethod
    def from_file(cls, path: Path | str) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file {path} does not exist")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"malformed config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"config {path} must be a mapping")
        return cls.from_dict(data)
