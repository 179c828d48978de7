"""Framework configuration file.

TOML key/value file with one table per subsystem. Unknown keys are rejected
and errors carry the line they come from, so ``serve`` can print something an
operator can act on.
"""
from __future__ import annotations

import re
try:
	import tomllib
except ModuleNotFoundError:  # Python < 3.11
	import tomli as tomllib
from pathlib import Path
from typing import Any, Literal, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator


class ConfigError(Exception):
    """Raised when the framework config file cannot be used."""


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)


class HttpSection(_Section):
    host: str = '127.0.0.1'
    port: int = Field(default=8700, ge=0, le=65535)
    drain_timeout_ms: int = Field(default=5000, ge=0)


class PubSubSection(_Section):
    host: str = '127.0.0.1'
    port: int = Field(default=8701, ge=0, le=65535)
    require_token: bool = False
    queue_size: int = Field(default=256, ge=1)


class GatewaySection(_Section):
    default_deadline_ms: int = Field(default=1000, gt=0)


class MonitorSection(_Section):
    probe_interval_ms: int = Field(default=1000, gt=0)
    failure_threshold: int = Field(default=3, ge=1)
    cooldown_intervals: int = Field(default=5, ge=1)
    flap_window_intervals: int = Field(default=10, ge=2)
    probe_timeout_ms: int = Field(default=500, gt=0)


class AssemblerSection(_Section):
    default_mode: Literal['Parallel', 'Chained'] = 'Parallel'
    promotion_threshold: int = Field(default=10, ge=1)
    promotion_window_ms: int = Field(default=60_000, gt=0)
    max_workers: int = Field(default=16, ge=1)


class BusSection(_Section):
    redelivery_timeout_ms: int = Field(default=2000, gt=0)
    max_attempts: int = Field(default=5, ge=1)
    tick_interval_ms: int = Field(default=200, gt=0)


class RegistrySection(_Section):
    default_lease_ttl_ms: int = Field(default=30_000, gt=0)
    snapshot_path: str = ''


class AuditorSection(_Section):
    directory: str = ''
    segment_size: int = Field(default=10_000, ge=1)


class CodecSection(_Section):
    max_message_bytes: int = Field(default=1024 * 1024, gt=0)


class LoggingSection(_Section):
    level: str = 'INFO'

    @field_validator('level')
    @classmethod
    def _known_level(cls, value: str) -> str:
        value = value.upper()
        if value not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ValueError(f'unknown log level {value}')
        return value


class FrameworkConfig(_Section):
    http: HttpSection = HttpSection()
    pubsub: PubSubSection = PubSubSection()
    tokens: dict[str, str] = Field(default_factory=dict)
    gateway: GatewaySection = GatewaySection()
    monitor: MonitorSection = MonitorSection()
    assembler: AssemblerSection = AssemblerSection()
    bus: BusSection = BusSection()
    registry: RegistrySection = RegistrySection()
    auditor: AuditorSection = AuditorSection()
    codec: CodecSection = CodecSection()
    logging: LoggingSection = LoggingSection()

    @field_validator('tokens')
    @classmethod
    def _tokens_not_empty(cls, value: dict[str, str]) -> dict[str, str]:
        for token, consumer in value.items():
            if not token or not consumer:
                raise ValueError('tokens need a non-empty token and consumer id')
        return value

    def with_overrides(self, overrides: Optional[Mapping[str, Any]]) -> 'FrameworkConfig':
        if not overrides:
            return self
        merged = _deep_merge(self.model_dump(), overrides)
        return config_from_mapping(merged)


def _deep_merge(base: dict, overrides: Mapping[str, Any]) -> dict:
    result = dict(base)
    for key, value in overrides.items():
        if isinstance(value, Mapping) and isinstance(result.get(key), dict) and key != 'tokens':
            result[key] = _deep_merge(result[key], value)
        else:
            result[key] = value
    return result


def _line_of(text: str, loc: tuple) -> Optional[int]:
    """Best-effort line number of the key named by a pydantic error location."""
    if not text or not loc:
        return None
    key = str(loc[-1])
    section = str(loc[0]) if len(loc) > 1 else None
    current_section = None
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        header = re.match(r'^\[([^\]]+)\]', stripped)
        if header:
            current_section = header.group(1).strip()
            if section is None and current_section == key:
                return number
            continue
        if re.match(rf'^"?{re.escape(key)}"?\s*=', stripped):
            if section is None or current_section == section:
                return number
    return None


def _format_validation(exc: ValidationError, text: str, source: str) -> str:
    messages = []
    for error in exc.errors():
        loc = tuple(error.get('loc', ()))
        dotted = '.'.join(str(part) for part in loc) or '<root>'
        line = _line_of(text, loc)
        where = f'{source}:{line}' if line else source
        reason = 'unknown key' if error.get('type') == 'extra_forbidden' else error.get('msg', 'invalid value')
        messages.append(f'{where}: {dotted}: {reason}')
    return '; '.join(messages)


def config_from_mapping(data: Mapping[str, Any], text: str = '', source: str = '<config>') -> FrameworkConfig:
    try:
        return FrameworkConfig.model_validate(dict(data))
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc, text, source)) from None


def parse_config(text: str, source: str = '<config>') -> FrameworkConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # tomllib reports "(at line N, column M)"
        raise ConfigError(f'{source}: {exc}') from None
    return config_from_mapping(data, text, source)


def load_config(path: 'str | Path | None') -> FrameworkConfig:
    if not path:
        return FrameworkConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as exc:
        raise ConfigError(f'{path}: cannot read config ({exc.strerror or exc})') from None
    return parse_config(text, str(path))
