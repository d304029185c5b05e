"""INI-style run configuration with named presets and ``section.key=value`` overrides.

Grammar: ``[section]`` headers followed by ``key = value`` lines; ``#`` or
``;`` start comments. Sections are ``run``, ``synthetic``, ``eval`` and
``pipeline``; their keys are the fields of the matching dataclasses. Tuple
values are comma separated. Unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, fields, replace
from typing import Iterable

from .errors import ConfigError
from .evaluation import DEFAULT_SEEDS, HarnessConfig, SyntheticBilingualSpec
from .trainer import RunConfig, preset as run_preset


@dataclass(frozen=True)
class EvalOptions:
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    objectives: tuple[str, ...] = ("none", "procrustes", "weak", "strong")
    workers: int = 1
    use_gold_alignments: bool = False


@dataclass(frozen=True)
class PipelineOptions:
    iterations: int = 5
    workers: int = 1
    lang: str = "tgt"


@dataclass(frozen=True)
class AppConfig:
    run: RunConfig
    synthetic: SyntheticBilingualSpec = SyntheticBilingualSpec()
    eval: EvalOptions = EvalOptions()
    pipeline: PipelineOptions = PipelineOptions()

    def harness(self) -> HarnessConfig:
        return HarnessConfig(self.synthetic, self.run, self.eval.objectives, self.eval.use_gold_alignments)


SECTIONS = ("run", "synthetic", "eval", "pipeline")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(f"expected a boolean, got {raw!r}")
            return low in _TRUE
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else str
            return tuple(kind(p.strip()) for p in raw.split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _apply(obj, section: str, items: Iterable[tuple[str, str]]):
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, raw in items:
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}; valid: {', '.join(sorted(known))}")
        changes[key] = _coerce(raw, getattr(obj, key), f"{section}.{key}")
    if not changes:
        return obj
    try:
        return replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_override(text: str) -> tuple[str, str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    lhs, value = text.split("=", 1)
    if "." not in lhs:
        raise ConfigError(f"override key {lhs!r} needs a section prefix, e.g. run.{lhs}")
    section, key = lhs.strip().split(".", 1)
    return section, key, value


def load_config(path: str | os.PathLike | None = None, preset: str = "desk",
                overrides: Iterable[str] = ()) -> AppConfig:
    """Preset, then the file (if any), then each override in order."""
    cfg = {"run": run_preset(preset), "synthetic": SyntheticBilingualSpec(),
           "eval": EvalOptions(), "pipeline": PipelineOptions()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]; valid: {', '.join(SECTIONS)}")
            cfg[section] = _apply(cfg[section], section, parser.items(section))
    for text in overrides:
        section, key, value = parse_override(text)
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r} in override; valid: {', '.join(SECTIONS)}")
        cfg[section] = _apply(cfg[section], section, [(key, value)])
    return AppConfig(**cfg)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: AppConfig) -> str:
    """Render a config in the same grammar :func:`load_config` reads."""
    out = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        out.append(f"[{section}]")
        out += [f"{f.name} = {_fmt(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]
        out.append("")
    return "\n".join(out)
