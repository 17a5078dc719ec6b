"""Run configuration: one YAML document with ``generator``, ``train`` and
``split`` sections. Omitted keys take the library defaults."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .data import GeneratorConfig
from .errors import ConfigError, ParameterError
from .training import ArchConfig, TrainConfig

OUTPUT_DIR_ENV = "FDDM_OUTPUT_DIR"

SECTIONS = ("generator", "train", "split", "output_dir")


@dataclass
class SplitConfig:
    test_fraction: float = 0.2
    seed: int = 0


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    output_dir: str | None = None

    def resolved_output_dir(self, override: str | None = None) -> Path:
        return Path(override or self.output_dir or os.environ.get(OUTPUT_DIR_ENV) or ".")


def _strict(cls, data: dict[str, Any], section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    return data


def _arch(d: Any, section: str) -> ArchConfig:
    d = _strict(ArchConfig, d, section)
    out = dict(d)
    if "hidden_dims" in out:
        out["hidden_dims"] = tuple(out["hidden_dims"])
    return ArchConfig(**out)


def parse_config(doc: dict[str, Any] | None) -> RunConfig:
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        gen = GeneratorConfig.from_dict(_strict(GeneratorConfig, doc.get("generator", {}), "generator"))
        tdoc = dict(_strict(TrainConfig, doc.get("train", {}), "train"))
        for key in ("teacher_arch", "student_arch"):
            if key in tdoc:
                tdoc[key] = _arch(tdoc[key], f"train.{key}")
        train = TrainConfig(**tdoc)
        split = SplitConfig(**_strict(SplitConfig, doc.get("split", {}), "split"))
    except (TypeError, ParameterError) as exc:
        raise ConfigError(str(exc)) from exc
    if not 0 < split.test_fraction < 1:
        raise ConfigError("split.test_fraction must lie in (0, 1)")
    return RunConfig(gen, train, split, doc.get("output_dir"))


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError:
        raise
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return parse_config(doc)
