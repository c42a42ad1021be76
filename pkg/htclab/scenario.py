# htclab/scenario.py - INI scenario files <-> validated ScenarioConfig
#
# A scenario file has one section per ScenarioConfig section. The optional
# [sweep] section maps dotted field names to comma-separated values; several
# keys form a cartesian product, and keys joined with `+` move together:
#
#   [sweep]
#   transport.snd_buf+transport.rcv_buf = 128K, 256K, 512K
import configparser
import io
import itertools
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ValidationError

from htclab.errors import ConfigError
from htclab.models import Bits, Bytes, Duration, Rate, ScenarioConfig
from htclab.units import format_rate, format_size, format_time

logger = logging.getLogger(__name__)

SWEEP_SECTION = "sweep"
SWEEP_JOIN = "+"


def _config_error(exc: ValidationError) -> ConfigError:
    first = exc.errors()[0]
    field = ".".join(str(part) for part in first["loc"]) or "scenario"
    return ConfigError(field, first["msg"])


def _new_parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive field names
    return parser


def scenario_from_mapping(data: Dict[str, Any]) -> ScenarioConfig:
    """Validate a nested mapping (already split into sections)"""
    data = dict(data)
    sweep = data.pop(SWEEP_SECTION, None) or []
    if isinstance(sweep, dict):
        sweep = [{"field": key, "values": _split_values(value)} for key, value in sweep.items()]
    try:
        config = ScenarioConfig.model_validate({**data, SWEEP_SECTION: sweep})
    except ValidationError as exc:
        raise _config_error(exc) from exc
    _check_sweep(config)
    return config


def _split_values(value: Union[str, List[Any]]) -> List[str]:
    if isinstance(value, list):
        return [str(v) for v in value]
    return [v.strip() for v in str(value).split(",") if v.strip()]


def parse_scenario(text: str, source: str = "<string>") -> ScenarioConfig:
    parser = _new_parser()
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError("file", f"{source}: {exc}") from exc
    data: Dict[str, Any] = {}
    for section in parser.sections():
        data[section] = dict(parser.items(section))
    return scenario_from_mapping(data)


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("file", f"scenario file not found: {path}")
    config = parse_scenario(path.read_text(encoding="utf-8"), source=str(path))
    logger.debug(f"loaded scenario {config.label} from {path}")
    return config


def _check_sweep(config: ScenarioConfig) -> None:
    # every swept value must validate on its own before any run starts
    for axis in config.sweep:
        for name in axis.field.split(SWEEP_JOIN):
            _field_target(config, name)
        for value in axis.values:
            for name in axis.field.split(SWEEP_JOIN):
                set_field(config, name, value)


def _field_target(config: ScenarioConfig, dotted: str) -> Tuple[BaseModel, str]:
    parts = dotted.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(f"{SWEEP_SECTION}.{dotted}", "sweep keys must look like section.field")
    section, name = parts
    if section == SWEEP_SECTION or section not in ScenarioConfig.model_fields:
        raise ConfigError(f"{SWEEP_SECTION}.{dotted}", f"unknown section {section!r}")
    target = getattr(config, section)
    if name not in type(target).model_fields:
        raise ConfigError(f"{SWEEP_SECTION}.{dotted}", f"unknown field {name!r}")
    return target, name


def set_field(config: ScenarioConfig, dotted: str, value: Any) -> ScenarioConfig:
    """Copy of config with one dotted field replaced (validated)"""
    target, name = _field_target(config, dotted)
    section = dotted.split(".")[0]
    try:
        updated = type(target).model_validate({**target.model_dump(), name: value})
    except ValidationError as exc:
        raise ConfigError(dotted, exc.errors()[0]["msg"]) from exc
    return config.model_copy(update={section: updated})


def expand_sweep(config: ScenarioConfig) -> List[Tuple[Dict[str, str], ScenarioConfig]]:
    """One (sweep values, config) pair per sweep point, in declaration order"""
    base = config.model_copy(update={SWEEP_SECTION: []})
    if not config.sweep:
        return [({}, base)]
    points = []
    for combo in itertools.product(*(axis.values for axis in config.sweep)):
        point = base
        labels: Dict[str, str] = {}
        for axis, value in zip(config.sweep, combo):
            labels[axis.field] = value
            for name in axis.field.split(SWEEP_JOIN):
                point = set_field(point, name, value)
        points.append((labels, point))
    return points


def apply_overrides(config: ScenarioConfig, seed: Optional[int] = None, scale: Optional[float] = None) -> ScenarioConfig:
    if seed is not None:
        config = set_field(config, "scenario.seed", seed)
    if scale is not None:
        config = set_field(config, "scenario.scale", scale)
    return config


def _format_value(annotation: Any, value: Any) -> str:
    if value is None:
        return ""
    if hasattr(value, "value"):
        return str(value.value)
    if annotation == Bytes:
        return format_size(int(value))
    if annotation == Duration:
        return format_time(int(value))
    if annotation in (Rate, Bits):
        return format_rate(float(value))
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_scenario(config: ScenarioConfig) -> str:
    """Normalized INI text; parse_scenario(dump_scenario(c)) == c"""
    parser = _new_parser()
    for section in ScenarioConfig.model_fields:
        if section == SWEEP_SECTION:
            continue
        model = getattr(config, section)
        parser.add_section(section)
        for name in type(model).model_fields:
            value = getattr(model, name)
            if value is None:
                continue
            parser.set(section, name, _format_value(_annotation(type(model), name), value))
    if config.sweep:
        parser.add_section(SWEEP_SECTION)
        for axis in config.sweep:
            parser.set(SWEEP_SECTION, axis.field, ", ".join(axis.values))
    out = io.StringIO()
    parser.write(out)
    return out.getvalue().rstrip() + "\n"


def _annotation(model: type, name: str) -> Any:
    # the raw annotation keeps the Annotated alias (Bytes, Duration, ...)
    for klass in model.__mro__:
        annotations = getattr(klass, "__annotations__", {})
        if name in annotations:
            annotation = annotations[name]
            args = getattr(annotation, "__args__", ())
            if type(None) in args:
                return next(a for a in args if a is not type(None))
            return annotation
    return None
