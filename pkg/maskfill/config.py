"""YAML run configuration mapped onto frozen dataclasses.

A config file has one top-level mapping per section; every section maps onto one dataclass::

    train:
      batch_size: 32
      loss:
        lam: 0.01
    schedule:
      num_timesteps: 200

Values resolve as dataclass defaults < file < overrides (``section.key=value`` strings whose
values are parsed as YAML scalars). Errors name the file line and the dotted key.
"""
import dataclasses
import typing
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Type

import yaml

from .errors import ConfigError
from .utilities import PathLike, config_hash

Sections = Mapping[str, Type]


def _key_lines(node: yaml.Node, prefix: str = "") -> Dict[str, int]:
    """1-based source line of every dotted key in a composed YAML tree"""
    lines: Dict[str, int] = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            key = f"{prefix}{key_node.value}"
            lines[key] = key_node.start_mark.line + 1
            lines.update(_key_lines(value_node, f"{key}."))
    return lines


def read_config_file(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, int]]:
    """Parse a YAML config file into a plain dict plus the source line of each dotted key

    Parameters
    ----------
    path : PathLike
        config file

    Returns
    -------
    Tuple[Dict[str, Any], Dict[str, int]]
        values and key lines
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark is not None else str(path)
        raise ConfigError(f"{where}: invalid YAML ({getattr(e, 'problem', e)})") from None
    if data is None:
        return {}, {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1: top level must be a mapping of config sections")
    return data, _key_lines(node)


def parse_overrides(overrides: Sequence[str]) -> Dict[str, Any]:
    """Nested dict from ``section.key=value`` strings"""
    result: Dict[str, Any] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        if len(keys) < 2 or not all(keys):
            raise ConfigError(f"override {item!r}: key must look like section.key")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            raise ConfigError(f"override {item!r}: value is not a valid YAML scalar") from None
        target = result
        for key in keys[:-1]:
            target = target.setdefault(key, {})
            if not isinstance(target, dict):
                raise ConfigError(f"override {item!r}: {key} is not a section")
        target[keys[-1]] = value
    return result


def merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge, values of update win"""
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = merge(dict(merged[key]), value)
        else:
            merged[key] = value
    return merged


class _Builder:
    def __init__(self, source: str, lines: Dict[str, int]):
        self.source = source
        self.lines = lines

    def where(self, key: str) -> str:
        if key in self.lines:
            return f"{self.source}:{self.lines[key]}"
        return self.source

    def convert(self, key: str, value: Any, hint: Any) -> Any:
        origin = typing.get_origin(hint)
        if origin is typing.Union:
            options = typing.get_args(hint)
            if value is None and type(None) in options:
                return None
            hint = next(option for option in options if option is not type(None))
            origin = typing.get_origin(hint)
        if dataclasses.is_dataclass(hint):
            if not isinstance(value, Mapping):
                raise ConfigError(f"{self.where(key)}: '{key}' must be a mapping")
            return self.build(key, hint, value)
        if origin is tuple:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{self.where(key)}: '{key}' must be a list")
            args = typing.get_args(hint)
            item_hint = args[0] if args else Any
            return tuple(self.convert(key, v, item_hint) for v in value)
        if hint is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"{self.where(key)}: '{key}' must be true or false, got {value!r}")
            return value
        if hint is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{self.where(key)}: '{key}' must be an integer, got {value!r}")
            return value
        if hint is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{self.where(key)}: '{key}' must be a number, got {value!r}")
            return float(value)
        if hint is str:
            if not isinstance(value, str):
                raise ConfigError(f"{self.where(key)}: '{key}' must be a string, got {value!r}")
            return value
        return value

    def build(self, prefix: str, cls: Type, values: Mapping[str, Any]) -> Any:
        hints = typing.get_type_hints(cls)
        names = {f.name for f in dataclasses.fields(cls) if f.init}
        kwargs = {}
        for name, value in values.items():
            key = f"{prefix}.{name}"
            if name not in names:
                raise ConfigError(f"{self.where(key)}: unknown key '{key}'")
            kwargs[name] = self.convert(key, value, hints[name])
        try:
            return cls(**kwargs)
        except ConfigError as e:
            # messages start with the dotted key they concern
            key = str(e).split(":", 1)[0]
            where = self.where(key) if key in self.lines else self.where(prefix)
            raise ConfigError(f"{where}: {e}") from None
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{self.where(prefix)}: {prefix}: {e}") from None


def build_sections(
    sections: Sections, values: Mapping[str, Any], lines: Optional[Dict[str, int]] = None, source: str = "<config>"
) -> Dict[str, Any]:
    """Instantiate every section dataclass from a nested dict

    Parameters
    ----------
    sections : Sections
        section name -> dataclass type
    values : Mapping[str, Any]
        section name -> field values
    lines : Dict[str, int], optional
        source line per dotted key, for error messages
    source : str, optional
        name of the source in error messages

    Returns
    -------
    Dict[str, Any]
        section name -> dataclass instance (defaults for absent sections)
    """
    builder = _Builder(source, lines or {})
    for name, section in values.items():
        if name not in sections:
            raise ConfigError(f"{builder.where(name)}: unknown section '{name}', expected one of {sorted(sections)}")
        if section is not None and not isinstance(section, Mapping):
            raise ConfigError(f"{builder.where(name)}: section '{name}' must be a mapping")
    return {name: builder.build(name, cls, values.get(name) or {}) for name, cls in sections.items()}


def load_config(
    sections: Sections,
    path: Optional[PathLike] = None,
    overrides: Sequence[str] = (),
    flags: Optional[Mapping[str, Any]] = None,
) -> Dict[str, Any]:
    """Resolve a run configuration: defaults < file < ``--set`` overrides < explicit flags

    Parameters
    ----------
    sections : Sections
        section name -> dataclass type
    path : PathLike, optional
        YAML config file
    overrides : Sequence[str], optional
        ``section.key=value`` strings
    flags : Mapping[str, Any], optional
        nested dict of values from dedicated command line flags; None entries are ignored

    Returns
    -------
    Dict[str, Any]
        section name -> dataclass instance
    """
    values: Dict[str, Any] = {}
    lines: Dict[str, int] = {}
    source = "<defaults>"
    if path is not None:
        values, lines = read_config_file(path)
        source = str(path)
    values = merge(values, parse_overrides(overrides))
    if flags:
        values = merge(values, _drop_none(flags))
    return build_sections(sections, values, lines, source)


def _drop_none(values: Mapping[str, Any]) -> Dict[str, Any]:
    result = {}
    for key, value in values.items():
        if isinstance(value, Mapping):
            nested = _drop_none(value)
            if nested:
                result[key] = nested
        elif value is not None:
            result[key] = value
    return result


def to_plain(obj: Any) -> Any:
    """dataclasses / tuples to YAML and JSON friendly dicts and lists"""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Mapping):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    return obj


def write_config(configs: Mapping[str, Any], out_dir: PathLike) -> str:
    """Write the resolved configuration as config.yaml plus its hash into a run directory

    Parameters
    ----------
    configs : Mapping[str, Any]
        section name -> dataclass instance
    out_dir : PathLike
        run or output directory, created if needed

    Returns
    -------
    str
        SHA-256 of the resolved configuration
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plain = to_plain(configs)
    digest = config_hash(plain)
    with open(out_dir / "config.yaml", "w") as f:
        yaml.safe_dump(plain, f, sort_keys=True)
    (out_dir / "config.sha256").write_text(digest + "\n")
    return digest

