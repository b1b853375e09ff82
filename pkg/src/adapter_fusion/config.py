"""INI experiment configuration with strict key checking and line-anchored errors.

Layout::

    [experiment]
    output_dir = runs/ladder
    seeds = 0 1 2

    [stream]
    num_tasks = 10

    [strategy.daf]
    strategy = daf
    init = robust

Every ``[strategy.<name>]`` section becomes one :class:`StrategyConfig`.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field

from .harness import StrategyConfig
from .model import ConfigurationError

__all__ = ["ConfigError", "ExperimentConfig", "StreamConfig", "load_config", "parse_config"]


class ConfigError(ConfigurationError):
    """Invalid configuration; ``lineno`` points into the source text when known."""

    def __init__(self, message: str, source: str = "<config>", lineno: int | None = None):
        where = f"{source}:{lineno}" if lineno is not None else source
        super().__init__(f"{where}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class StreamConfig:
    num_tasks: int = 10
    classes_per_task: int = 5
    dim: int = 16
    samples_per_class: int = 40
    test_samples_per_class: int = 40
    separation: float = 4.0
    seed: int = 1993
    pretrain_classes: int = 4
    pretrain_samples_per_class: int = 100
    nuisance_dim: int = 4
    nuisance_scale: float = 2.0
    nuisance_per_task: bool = False

    def kwargs(self, offset: int = 0) -> dict:
        kw = dataclasses.asdict(self)
        kw["seed"] = self.seed + offset
        return kw


@dataclass(frozen=True)
class ExperimentConfig:
    output_dir: str | None = None
    seeds: tuple[int, ...] = (0,)
    backbone_mode: str = "pretrained"
    backbone_width: int = 32
    backbone_layers: int = 2
    backbone_epochs: int = 20
    verify_suite: bool = False
    replay_fusion: bool = False
    stream: StreamConfig = field(default_factory=StreamConfig)
    strategies: tuple[StrategyConfig, ...] = ()

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.backbone_mode not in ("pretrained", "frozen-random"):
            raise ConfigError(f"backbone_mode must be 'pretrained' or 'frozen-random', got {self.backbone_mode!r}")
        names = [s.name for s in self.strategies]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate strategy names: {names}")

    def to_ini(self) -> str:
        return serialize_config(self)


_EXPERIMENT_KEYS = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"stream", "strategies"}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(raw: str, type_name: str):
    raw = raw.strip()
    if type_name == "bool":
        if raw.lower() in _TRUE:
            return True
        if raw.lower() in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if type_name == "int":
        return int(raw)
    if type_name == "float":
        return float(raw)
    if type_name == "str | None":
        return None if raw.lower() in ("", "none") else raw
    if type_name == "tuple[int, ...]":
        return tuple(int(tok) for tok in re.split(r"[,\s]+", raw) if tok)
    return raw


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _key_lines(text: str) -> dict[tuple[str | None, str | None], int]:
    """Map (section, key) and (section, None) to 1-based source lines."""
    lines: dict[tuple[str | None, str | None], int] = {}
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            lines.setdefault((section, None), no)
            continue
        m = re.match(r"([^=:]+?)\s*[=:]", s)
        if m and not line[:1].isspace():
            lines.setdefault((section, m.group(1).strip().lower()), no)
    return lines


def _build(cls, values: dict, section: str, lines, source: str, extra: dict | None = None):
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = dict(extra or {})
    for key, raw in values.items():
        lineno = lines.get((section, key))
        if key not in types or key in kwargs:
            raise ConfigError(f"unknown key {key!r} in [{section}]", source, lineno)
        try:
            kwargs[key] = _convert(raw, types[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", source, lineno) from None
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        raise ConfigError(str(exc), source, lines.get((section, None))) from None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    try:
        parser.read_string(text, source=source)
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", source, exc.lineno) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", source, exc.lineno) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any section", source, exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", source, lineno) from None
    lines = _key_lines(text)

    exp_values: dict = {}
    stream = StreamConfig()
    strategies = []
    for section in parser.sections():
        values = dict(parser.items(section))
        if section == "experiment":
            exp_values = values
        elif section == "stream":
            stream = _build(StreamConfig, values, section, lines, source)
        elif section.startswith("strategy."):
            name = section[len("strategy."):].strip()
            if not name:
                raise ConfigError("strategy section needs a name", source, lines.get((section, None)))
            strategies.append(_build(StrategyConfig, values, section, lines, source, {"name": name}))
        else:
            raise ConfigError(f"unknown section [{section}]", source, lines.get((section, None)))
    for key in exp_values:
        if key not in _EXPERIMENT_KEYS:
            raise ConfigError(f"unknown key {key!r} in [experiment]", source, lines.get(("experiment", key)))
    if not strategies:
        raise ConfigError("no [strategy.<name>] sections", source)
    return _build(ExperimentConfig, exp_values, "experiment", lines, source,
                  {"stream": stream, "strategies": tuple(strategies)})


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_config(text, str(path))


def serialize_config(cfg: ExperimentConfig) -> str:
    out = ["[experiment]"]
    for f in dataclasses.fields(cfg):
        if f.name in ("stream", "strategies"):
            continue
        out.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
    out += ["", "[stream]"]
    out += [f"{k} = {_format(v)}" for k, v in dataclasses.asdict(cfg.stream).items()]
    for s in cfg.strategies:
        out += ["", f"[strategy.{s.name}]"]
        out += [f"{k} = {_format(v)}" for k, v in s.to_dict().items() if k != "name"]
    return "\n".join(out) + "\n"
