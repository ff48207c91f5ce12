"""Experiment configuration files.

Flat ``key = value`` text in ``[synth]``, ``[model]``, ``[train]`` and
``[sources]`` sections; every key is a field name of the matching config
class. Unknown sections or keys are errors. ``section.key=value`` overrides
apply after the file is read.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import ModelConfig
from .synthesis import SynthConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SourcesConfig:
    """Where content images, style templates and the renderer come from.

    ``content`` and ``templates`` are ``procedural`` or an image directory.
    """
    content: str = "procedural"
    templates: str = "procedural"
    renderer: str = "procedural"
    content_count: int = 64
    content_size: int = 320
    template_count: int = 16
    template_size: int = 128


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sources: SourcesConfig = field(default_factory=SourcesConfig)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, synth=replace(self.synth, rng_seed=seed), train=replace(self.train, rng_seed=seed))


SECTIONS = ("synth", "model", "train", "sources")


def _parse_value(default, text: str, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.strip("()[] ").split(","))
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r}") from exc
    return text


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    return str(value)


def _build(values: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for section, items in values.items():
        sub = getattr(cfg, section)
        names = {f.name for f in fields(sub)}
        parsed = {}
        for key, text in items.items():
            if key not in names:
                raise ConfigError(f"unknown key {section}.{key}")
            parsed[key] = _parse_value(getattr(sub, key), text, f"{section}.{key}")
        try:
            cfg = replace(cfg, **{section: replace(sub, **parsed)})
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from exc
    return cfg


def parse_config(text: str, overrides=()) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        values[section] = dict(parser.items(section))
    for item in overrides:
        name, sep, value = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not section.key=value")
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        values.setdefault(section, {})[key] = value
    return _build(values)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    out = io.StringIO()
    for section in SECTIONS:
        out.write(f"[{section}]\n")
        sub = getattr(cfg, section)
        for f in fields(sub):
            out.write(f"{f.name} = {_format_value(getattr(sub, f.name))}\n")
        out.write("\n")
    return out.getvalue()
