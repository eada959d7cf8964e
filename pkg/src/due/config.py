"""Text run configuration: ``key = value`` lines grouped in sections.

Sections and keys::

    [data]    generator, n, noise_std, seed, zero_effect,
              csv_path, features, targets, treatment, cate, split_column
    [model]   every FeatureExtractorConfig field except input_dim
    [train]   every TrainConfig field
    [output]  dir

Missing keys take their dataclass defaults; unknown sections or keys are
rejected by name.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import datasets as D
from .features import FeatureExtractorConfig
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


GENERATORS = ("two_moons", "gap_regression", "blobs_grid", "synthetic_cate", "csv")


@dataclass
class DataConfig:
    generator: str = "two_moons"
    n: int = 200
    noise_std: float = 0.1
    seed: int = 0
    zero_effect: bool = False
    csv_path: str = ""
    features: list = field(default_factory=list)
    targets: list = field(default_factory=list)
    treatment: str = ""
    cate: str = ""
    split_column: str = ""

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigError("data.generator", f"unknown generator {self.generator!r}; choose from {', '.join(GENERATORS)}")


MODEL_FIELDS = [f for f in dataclasses.fields(FeatureExtractorConfig) if f.name != "input_dim"]


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"

    def feature_config(self, input_dim: int) -> FeatureExtractorConfig:
        return FeatureExtractorConfig(input_dim=input_dim, **self.model)

    def to_dict(self) -> dict:
        return {"data": asdict(self.data), "model": dict(self.model), "train": asdict(self.train),
                "output": {"dir": self.output_dir}}

    def to_text(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                if isinstance(value, list):
                    value = ", ".join(value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [item.strip() for item in raw.split(",") if item.strip()]
    except ValueError:
        kind = "boolean" if isinstance(default, bool) else type(default).__name__
        raise ConfigError(key, f"expected {kind}, got {raw!r}") from None
    return raw


def _defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def _section(parser, name: str, defaults: dict) -> dict:
    if not parser.has_section(name):
        return {}
    out = {}
    for key, raw in parser.items(name):
        if key not in defaults:
            raise ConfigError(f"{name}.{key}", "unknown key")
        out[key] = _coerce(f"{name}.{key}", raw, defaults[key])
    return out


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("syntax", str(exc).splitlines()[0]) from None
    for name in parser.sections():
        if name not in ("data", "model", "train", "output"):
            raise ConfigError(name, "unknown section")
    model_defaults = {f.name: f.default for f in MODEL_FIELDS}
    try:
        data = DataConfig(**_section(parser, "data", _defaults(DataConfig)))
        train = TrainConfig(**_section(parser, "train", _defaults(TrainConfig)))
        model = _section(parser, "model", model_defaults)
        FeatureExtractorConfig(input_dim=1, **model)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError("value", str(exc)) from None
    output = _section(parser, "output", {"dir": "runs/default"})
    return RunConfig(data, model, train, output.get("dir", "runs/default"))


def load_config(path) -> RunConfig:
    """Read a config file, or the ``config`` entry of a run manifest (``.json``)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError("path", f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            resolved = json.loads(text)["config"]
        except (json.JSONDecodeError, KeyError):
            raise ConfigError("path", f"{path} is not a run manifest") from None
        return parse_config(RunConfig(
            DataConfig(**resolved["data"]), resolved["model"], TrainConfig(**resolved["train"]),
            resolved["output"]["dir"],
        ).to_text())
    return parse_config(text)


def build_dataset(cfg: DataConfig) -> D.Dataset:
    if cfg.generator == "two_moons":
        return D.gen_two_moons(cfg.n, cfg.noise_std, cfg.seed)
    if cfg.generator == "gap_regression":
        return D.gen_gap_regression(cfg.n, cfg.seed, cfg.noise_std)
    if cfg.generator == "blobs_grid":
        return D.gen_blobs_grid(cfg.seed)
    if cfg.generator == "synthetic_cate":
        return D.gen_synthetic_cate(cfg.n, cfg.seed, cfg.zero_effect)
    schema = D.CsvSchema(cfg.features, cfg.targets, cfg.treatment or None, cfg.cate or None, cfg.split_column or None)
    return D.load_csv(cfg.csv_path, schema)
