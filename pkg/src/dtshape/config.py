"""Run configuration: bracketed sections of ``key = value`` lines.

Every key has a typed default (desk scale); ``paper_scale`` swaps in the
full-size sampling, network and training defaults.  Unknown sections or
keys are rejected by name.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

from .fields import ModelConfig
from .geometry.sampling import SamplingConfig
from .objectives import LossWeights
from .tim import RefineConfig
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


# value kinds: int, float, str, bool, "int?" / "float?" (the literal "none" allowed)
_Kind = str


def _schema(full: bool) -> dict[str, dict[str, tuple[_Kind, object]]]:
    samp = SamplingConfig.full() if full else SamplingConfig()
    model = ModelConfig.full() if full else ModelConfig.desk()
    train = TrainConfig.full() if full else TrainConfig.desk()
    w = LossWeights()
    ref = RefineConfig()
    return {
        "run": {"seed": ("int", 0)},
        "synth": {"family": ("str", "ellipsoids"), "n": ("int", 8)},
        "prep": {"n_surface": ("int", samp.n_surface), "n_free": ("int", samp.n_free),
                 "cameras": ("int", samp.n_cameras), "camera_radius": ("float", samp.camera_radius),
                 "resolution": ("int", samp.resolution), "normalize": ("bool", False)},
        "model": {f.name: (_kind(f.type), getattr(model, f.name)) for f in dataclasses.fields(model)},
        "train": {f.name: (_kind(f.type), getattr(train, f.name)) for f in dataclasses.fields(train)
                  if f.name not in ("weights", "seed")},
        "weights": {f.name: (_kind(f.type), getattr(w, f.name)) for f in dataclasses.fields(w)},
        "embed": {"epochs": ("int", 30)},
        "refine": {f.name: (_kind(f.type), getattr(ref, f.name)) for f in dataclasses.fields(ref)
                   if f.name not in ("cameras", "embed_epochs")},
        "eval": {"tau": ("float?", None), "voxel_resolution": ("int", 64), "cd_points": ("int", 30_000),
                 "emd_points": ("int", 1_000)},
    }


def _kind(annotation) -> _Kind:
    text = str(annotation).replace(" ", "")
    base = text.split("|")[0]
    optional = "None" in text
    return base + ("?" if optional else "")


def _parse(kind: _Kind, raw: str, key: str):
    raw = raw.strip()
    if kind.endswith("?"):
        if raw.lower() == "none":
            return None
        kind = kind[:-1]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            v = float(raw)
            if math.isnan(v):
                raise ValueError
            return v
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind}", key) from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)
    paper_scale: bool = False

    @classmethod
    def defaults(cls, paper_scale: bool = False) -> "RunConfig":
        return cls({s: {k: d for k, (_, d) in keys.items()} for s, keys in _schema(paper_scale).items()},
                   paper_scale)

    @classmethod
    def parse(cls, text: str, paper_scale: bool = False) -> "RunConfig":
        cfg = cls.defaults(paper_scale)
        schema = _schema(paper_scale)
        cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=None, default_section="\0defaults")
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        for section in cp.sections():
            if section not in schema:
                raise ConfigError(f"unknown section [{section}]", section)
            for key, raw in cp.items(section):
                if key not in schema[section]:
                    raise ConfigError(f"unknown key {section}.{key}", f"{section}.{key}")
                cfg.values[section][key] = _parse(schema[section][key][0], raw, f"{section}.{key}")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, paper_scale: bool = False) -> "RunConfig":
        return cls.parse(Path(path).read_text(), paper_scale)

    def dumps(self) -> str:
        buf = io.StringIO()
        for section, keys in self.values.items():
            buf.write(f"[{section}]\n")
            for k, v in keys.items():
                buf.write(f"{k} = {_format(v)}\n")
            buf.write("\n")
        return buf.getvalue()

    def set(self, dotted: str, value) -> None:
        section, key = dotted.split(".", 1)
        if section not in self.values or key not in self.values[section]:
            raise ConfigError(f"unknown key {dotted}", dotted)
        self.values[section][key] = value

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    @property
    def seed(self) -> int:
        return int(self.values["run"]["seed"])

    # ---- typed views

    def validate(self) -> None:
        for name, build in (("model", self.model_config), ("train", self.train_config),
                            ("weights", self.weights), ("refine", self.refine_config),
                            ("prep", self.sampling_config)):
            try:
                build()
            except ConfigError:
                raise
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"[{name}] {exc}", name) from None

    def sampling_config(self) -> SamplingConfig:
        p = self.values["prep"]
        for k in ("n_surface", "n_free", "cameras", "resolution"):
            if p[k] < 1:
                raise ConfigError(f"prep.{k} must be positive", f"prep.{k}")
        if p["camera_radius"] < 1.5:
            raise ConfigError("prep.camera_radius must be at least 1.5", "prep.camera_radius")
        return SamplingConfig(p["n_surface"], p["n_free"], p["cameras"], p["camera_radius"], p["resolution"])

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.values["model"])

    def weights(self) -> LossWeights:
        return LossWeights(**self.values["weights"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, weights=self.weights(), **self.values["train"])

    def refine_config(self) -> RefineConfig:
        r = self.values["refine"]
        return RefineConfig(embed_epochs=self.values["embed"]["epochs"],
                            cameras=self.sampling_config(), **r)
