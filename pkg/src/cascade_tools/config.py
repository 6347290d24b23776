"""Run configuration: parsing and serializing the key = value text format.

A configuration has up to four sections:

    fss = 4.8            # keys before any header belong to [source]
    tau_x = 60

    [experiment]
    kind = cross_correlation
    basis = diagonal

    [analysis]
    bin_width = 16

    [output]
    report = "fom.json"

Tag files embed the [source] and [experiment] sections plus a [stream]
section holding the record count.
"""

import math
import re
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Callable, get_args, get_type_hints

from cascade_tools.cascade import ExperimentConfig
from cascade_tools.errors import ConfigError, ValidationError
from cascade_tools.observability import get_logger
from cascade_tools.physics import SourceParams
from cascade_tools.report import Thresholds

_SECTION = re.compile(r"\[\s*([A-Za-z_]+)\s*\]")
_ASSIGNMENT = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)")


@dataclass(frozen=True)
class AnalysisOptions:
    """Histogramming and estimator settings for `analyze`."""

    bin_width: float = 16.0  # ps
    side_peaks: int = 6
    window: float | None = None  # ps, default rep_period/2
    hom_window: float | None = None  # ps, default double_pulse_sep
    lifetime_bin_width: float = 4.0  # ps
    lifetime_start: float = -500.0  # ps
    lifetime_stop: float = 3500.0  # ps
    apd_correction: float = 1.0
    threshold_fidelity: float = 0.5
    threshold_g2: float = 0.01
    threshold_visibility: float = 0.5

    def __post_init__(self) -> None:
        for name in ("bin_width", "lifetime_bin_width"):
            if not getattr(self, name) > 0:
                raise ValidationError(name, f"must be > 0, got {getattr(self, name)}")
        if self.side_peaks < 3:
            raise ValidationError("side_peaks", f"must be >= 3, got {self.side_peaks}")
        for name in ("window", "hom_window"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ValidationError(name, f"must be > 0, got {value}")
        if not self.lifetime_stop > self.lifetime_start:
            raise ValidationError("lifetime_stop", "must be greater than lifetime_start")
        span = (self.lifetime_stop - self.lifetime_start) / self.lifetime_bin_width
        if abs(span - round(span)) > 1e-9:
            raise ValidationError(
                "lifetime_bin_width", "lifetime range must be a multiple of the bin width"
            )
        if not self.apd_correction >= 1.0:
            raise ValidationError("apd_correction", f"must be >= 1, got {self.apd_correction}")

    @property
    def thresholds(self) -> Thresholds:
        return Thresholds(
            fidelity_min=self.threshold_fidelity,
            g2_max=self.threshold_g2,
            visibility_min=self.threshold_visibility,
        )


@dataclass(frozen=True)
class OutputPaths:
    tags: str | None = None
    report: str | None = None
    text_report: str | None = None


@dataclass(frozen=True)
class RunConfig:
    params: SourceParams = field(default_factory=SourceParams)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    analysis: AnalysisOptions = field(default_factory=AnalysisOptions)
    output: OutputPaths = field(default_factory=OutputPaths)

    def with_overrides(self, section: str, **values: Any) -> "RunConfig":
        """Copy with non-None values replaced in one section."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        return replace(self, **{section: replace(getattr(self, section), **values)})


# Config key -> dataclass field, where they differ
_KEY_ALIASES = {"source": {"fss": "fss_s"}}

_SECTION_TYPES: dict[str, type] = {
    "source": SourceParams,
    "experiment": ExperimentConfig,
    "analysis": AnalysisOptions,
    "output": OutputPaths,
}

_RUN_SECTIONS = ("source", "experiment", "analysis", "output")
_HEADER_SECTIONS = ("source", "experiment", "stream")


def _value_kind(hint: Any) -> str:
    for arg in get_args(hint) or (hint,):
        if arg is int:
            return "int"
        if arg is float:
            return "float"
        if arg is str:
            return "str"
        if isinstance(arg, type) and issubclass(arg, Enum):
            return "enum"
    raise TypeError(f"unsupported config field type {hint!r}")


def _field_kinds(cls: type) -> dict[str, str]:
    """Value kind of each dataclass field: float, int, str or enum."""
    hints = get_type_hints(cls)
    return {f.name: _value_kind(hints[f.name]) for f in fields(cls)}


def _keys(section: str) -> dict[str, str]:
    """Config key -> field name for a section."""
    if section == "stream":
        return {"record_count": "record_count"}
    aliases = _KEY_ALIASES.get(section, {})
    reverse = {v: k for k, v in aliases.items()}
    return {reverse.get(f.name, f.name): f.name for f in fields(_SECTION_TYPES[section])}


def _strip_comment(line: str) -> str:
    in_quotes = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_quotes = not in_quotes
        elif ch == "#" and not in_quotes:
            return line[:i]
    return line


def _parse_float(text: str) -> float:
    if text.lower() in ("inf", "+inf", "infinity"):
        return math.inf
    value = float(text)
    if math.isnan(value):
        raise ValueError("nan is not allowed")
    return value


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        value = float(text)
        if not value.is_integer():
            raise ValueError(f"{text} is not an integer") from None
        return int(value)


def _parse_str(text: str) -> str:
    if len(text) >= 2 and text[0] == text[-1] == '"':
        return text[1:-1]
    if '"' in text or not text:
        raise ValueError("expected a bare word or a double-quoted string")
    return text


_PARSERS: dict[str, Callable[[str], Any]] = {
    "float": _parse_float,
    "int": _parse_int,
    "str": _parse_str,
    "enum": _parse_str,
}


def _kinds(section: str) -> dict[str, str]:
    if section == "stream":
        return {"record_count": "int"}
    return _field_kinds(_SECTION_TYPES[section])


def _parse_sections(text: str, allowed: tuple[str, ...]) -> dict[str, dict[str, tuple[Any, str, int]]]:
    """Split text into {section: {field: (value, key, line)}}."""
    sections: dict[str, dict[str, tuple[Any, str, int]]] = {name: {} for name in allowed}
    section = allowed[0]
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if match := _SECTION.fullmatch(line):
            section = match.group(1).lower()
            if section not in allowed:
                raise ConfigError(section, lineno, f"unknown section, expected one of {', '.join(allowed)}")
            continue
        match = _ASSIGNMENT.fullmatch(line)
        if not match:
            raise ConfigError(line, lineno, "expected 'key = value'")
        key, value = match.group(1), match.group(2).strip()
        keys = _keys(section)
        if key not in keys:
            raise ConfigError(key, lineno, f"unknown key in [{section}]")
        name = keys[key]
        if name in sections[section]:
            raise ConfigError(key, lineno, f"duplicate key in [{section}]")
        kind = _kinds(section)[name]
        try:
            parsed = _PARSERS[kind](value)
        except ValueError as e:
            raise ConfigError(key, lineno, f"expected {kind} value, got '{value}' ({e})") from None
        sections[section][name] = (parsed, key, lineno)
    return sections


def _build(section: str, entries: dict[str, tuple[Any, str, int]]) -> Any:
    values = {name: value for name, (value, _, _) in entries.items()}
    try:
        return _SECTION_TYPES[section](**values)
    except ValidationError as e:
        key, line = e.field, None
        if e.field in entries:
            _, key, line = entries[e.field]
        message = str(e).split(": ", 1)[-1]
        raise ConfigError(key, line, message) from None


def parse_config(text: str) -> RunConfig:
    """Parse and validate a run configuration, filling in defaults.

    Args:
        text: key = value lines, optionally grouped under [source], [experiment],
            [analysis] and [output] headers

    Returns:
        RunConfig with every section populated

    Raises:
        ConfigError: On unknown sections or keys, duplicates, bad values or
            out-of-range parameters, naming the key and line
    """
    sections = _parse_sections(text, _RUN_SECTIONS)
    return RunConfig(
        params=_build("source", sections["source"]),
        experiment=_build("experiment", sections["experiment"]),
        analysis=_build("analysis", sections["analysis"]),
        output=_build("output", sections["output"]),
    )


def load_config(path: Path) -> RunConfig:
    """Load a run configuration file.

    A bare file name that does not exist locally falls back to the device
    configurations shipped with the package, so `-c device-1.cfg` works from
    any directory.
    """
    path = Path(path)
    if not path.exists() and path.parent == Path(".") and _is_bundled(path.name):
        get_logger().debug("Using bundled configuration", name=path.name)
        return load_bundled_config(path.name)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ValidationError("config", f"cannot read {path}: {e.strerror}") from None
    return parse_config(text)


def _is_bundled(name: str) -> bool:
    return name.endswith(".cfg") and resources.files("cascade_tools.data").joinpath(name).is_file()


def load_bundled_config(name: str) -> RunConfig:
    """Load one of the device configurations shipped with the package."""
    text = resources.files("cascade_tools.data").joinpath(name).read_text("utf-8")
    return parse_config(text)


def _format_value(value: Any) -> str:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, bool):
        raise TypeError("boolean values are not part of the format")
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    return '"' + str(value) + '"'


def _serialize_section(name: str, obj: Any) -> list[str]:
    keys = {v: k for k, v in _keys(name).items()}
    lines = [f"[{name}]"]
    for f in fields(obj):
        value = getattr(obj, f.name)
        if value is not None:
            lines.append(f"{keys[f.name]} = {_format_value(value)}")
    return lines


def serialize_config(config: RunConfig) -> str:
    """Canonical text form; parse_config(serialize_config(c)) == c."""
    lines: list[str] = []
    for section, obj in zip(
        _RUN_SECTIONS, (config.params, config.experiment, config.analysis, config.output)
    ):
        if lines:
            lines.append("")
        lines.extend(_serialize_section(section, obj))
    return "\n".join(lines) + "\n"


def serialize_stream_header(params: SourceParams, experiment: ExperimentConfig, record_count: int) -> str:
    """Header text embedded in tag files."""
    lines = _serialize_section("source", params)
    lines += [""] + _serialize_section("experiment", experiment)
    lines += ["", "[stream]", f"record_count = {record_count}"]
    return "\n".join(lines) + "\n"


def parse_stream_header(text: str) -> tuple[SourceParams, ExperimentConfig, int]:
    """Inverse of serialize_stream_header."""
    sections = _parse_sections(text, _HEADER_SECTIONS)
    if "record_count" not in sections["stream"]:
        raise ConfigError("record_count", None, "missing from [stream]")
    record_count = sections["stream"]["record_count"][0]
    if record_count < 0:
        raise ConfigError("record_count", sections["stream"]["record_count"][2], "must be >= 0")
    return (
        _build("source", sections["source"]),
        _build("experiment", sections["experiment"]),
        record_count,
    )
