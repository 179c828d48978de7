"""Scenario file models.

A scenario is a JSON document with ``devices``, ``faults``, ``workload`` and
``clock``; ``composites``, ``splits``, ``config`` and ``assertions`` are
optional. See docs/scenario.md.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.capabilities import parse_capability
from core.errors import ContractViolation, ErrorKind

from .faults import FaultKind, FaultSpec


class _Model(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)


def _capability(value: str) -> str:
    try:
        parse_capability(value)
    except ContractViolation as exc:
        raise ValueError(exc.detail) from None
    return value


class OutputModel(_Model):
    kind: Literal['constant', 'ramp', 'random'] = 'constant'
    field: str = 'value'
    value: int | float = 0
    step: int | float = 1
    low: int | float = 0
    high: int | float = 1
    digits: int = Field(default=2, ge=0, le=9)
    extra: dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode='after')
    def _range(self) -> 'OutputModel':
        if self.kind == 'random' and self.high < self.low:
            raise ValueError('high must not be lower than low')
        if self.field in self.extra:
            raise ValueError(f'extra repeats the generated field {self.field!r}')
        return self


class CapabilityModel(_Model):
    capability: str
    delay_ms: int = Field(default=0, ge=0)
    output: OutputModel = OutputModel()
    format: Literal['json', 'xml'] = 'json'
    cost_hint_ms: Optional[int] = Field(default=None, ge=0)
    input_schema: list[Any] = Field(default_factory=list)
    output_schema: list[Any] = Field(default_factory=list)
    telemetry_period_ms: Optional[int] = Field(default=None, gt=0)

    @field_validator('capability')
    @classmethod
    def _known_capability(cls, value: str) -> str:
        return _capability(value)


class DeviceModel(_Model):
    device_id: str = Field(pattern=r'^[a-z0-9_-]+$')
    domain: str = ''
    wire: Literal['RequestWire', 'PubSubWire'] = 'RequestWire'
    token: str = ''
    lease_ttl_ms: int = Field(default=30_000, gt=0)
    capabilities: list[CapabilityModel] = Field(min_length=1)


class FaultModel(_Model):
    target: str
    kind: Literal['Crash', 'Omission', 'Timing', 'Unauthorised', 'Transient']
    start_ms: int = Field(ge=0)
    duration_ms: int = Field(gt=0)
    extra_delay_ms: int = Field(default=0, ge=0)
    flap_period_ms: int = Field(default=0, ge=0)

    @model_validator(mode='after')
    def _kind_parameters(self) -> 'FaultModel':
        if self.kind == 'Timing' and self.extra_delay_ms <= 0:
            raise ValueError('Timing faults need extra_delay_ms > 0')
        if self.kind == 'Transient' and self.flap_period_ms <= 0:
            raise ValueError('Transient faults need flap_period_ms > 0')
        return self

    def to_spec(self) -> FaultSpec:
        return FaultSpec(
            target=self.target,
            kind=FaultKind(self.kind),
            start_ms=self.start_ms,
            duration_ms=self.duration_ms,
            extra_delay_ms=self.extra_delay_ms,
            flap_period_ms=self.flap_period_ms,
        )


class WorkloadModel(_Model):
    id: Optional[str] = None
    at_ms: int = Field(ge=0)
    capability: str
    consumer: str = 'consumer'
    token: str = ''
    format: Literal['json', 'xml'] = 'json'
    deadline_ms: int = Field(default=1000, gt=0)
    payload: Any = Field(default_factory=dict)
    repeat: int = Field(default=1, ge=1)
    every_ms: int = Field(default=0, ge=0)

    @field_validator('capability')
    @classmethod
    def _known_capability(cls, value: str) -> str:
        return _capability(value)


class ClockModel(_Model):
    kind: Literal['virtual', 'wall'] = 'virtual'
    seed: int = 0
    duration_ms: Optional[int] = Field(default=None, ge=0)


_OUTCOMES = ['ok'] + [kind.value for kind in ErrorKind]


class AssertionModel(_Model):
    type: Literal['latency', 'outcome', 'status', 'outcome_counts', 'classification', 'registry', 'events']
    request: Optional[str] = None
    topic: Optional[str] = None
    at_ms: Optional[int] = Field(default=None, ge=0)
    after_ms: Optional[int] = Field(default=None, ge=0)
    capability: Optional[str] = None
    service_id: Optional[str] = None
    equals_ms: Optional[int] = None
    max_ms: Optional[int] = None
    min_ms: Optional[int] = None
    expected: Any = None
    absent: list[str] = Field(default_factory=list)
    present: Optional[bool] = None
    breaker: Optional[Literal['Closed', 'Open', 'HalfOpen']] = None

    @model_validator(mode='after')
    def _required_fields(self) -> 'AssertionModel':
        needs = {
            'latency': ('request',),
            'outcome': ('request', 'expected'),
            'status': ('request', 'expected'),
            'outcome_counts': (),
            'classification': ('service_id',),
            'registry': ('capability', 'present'),
            'events': ('topic', 'expected'),
        }[self.type]
        for name in needs:
            if getattr(self, name) is None:
                raise ValueError(f'{self.type} assertion needs {name!r}')
        if self.type == 'outcome' and self.expected not in _OUTCOMES:
            raise ValueError(f'unknown outcome {self.expected!r}')
        if self.type == 'outcome_counts' and self.expected is None and not self.absent:
            raise ValueError('outcome_counts needs "expected" or "absent"')
        if self.type == 'outcome_counts' and self.expected is not None and not isinstance(self.expected, dict):
            raise ValueError('outcome_counts "expected" maps outcomes to counts')
        if self.type == 'events' and (isinstance(self.expected, bool) or not isinstance(self.expected, int)):
            raise ValueError('events "expected" is a count')
        return self


class Scenario(_Model):
    name: str = ''
    devices: list[DeviceModel] = Field(default_factory=list)
    faults: list[FaultModel] = Field(default_factory=list)
    workload: list[WorkloadModel] = Field(default_factory=list)
    clock: ClockModel = ClockModel()
    composites: list[dict[str, Any]] = Field(default_factory=list)
    splits: list[dict[str, Any]] = Field(default_factory=list)
    config: dict[str, Any] = Field(default_factory=dict)
    assertions: list[AssertionModel] = Field(default_factory=list)

    @model_validator(mode='after')
    def _consistent(self) -> 'Scenario':
        times = [item.at_ms for item in self.workload]
        if times != sorted(times):
            raise ValueError('workload must be sorted by at_ms')
        ids = [device.device_id for device in self.devices]
        if len(ids) != len(set(ids)):
            raise ValueError('duplicate device_id')
        known = set(ids)
        for fault in self.faults:
            if fault.target not in known:
                raise ValueError(f'fault targets unknown device {fault.target!r}')
        request_ids = [item.id for item in self.workload if item.id]
        if len(request_ids) != len(set(request_ids)):
            raise ValueError('duplicate workload id')
        return self


def _describe(exc: ValidationError) -> str:
    parts = []
    for error in exc.errors():
        where = '.'.join(str(part) for part in error.get('loc', ())) or '<root>'
        reason = 'unknown key' if error.get('type') == 'extra_forbidden' else error.get('msg', 'invalid value')
        parts.append(f'{where}: {reason}')
    return '; '.join(parts)


def parse_scenario(data: Any) -> Scenario:
    try:
        return Scenario.model_validate(data)
    except ValidationError as exc:
        raise ContractViolation(f'invalid scenario: {_describe(exc)}') from None


def load_scenario(path: 'str | Path') -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except OSError as exc:
        raise ContractViolation(f'{path}: cannot read scenario ({exc.strerror or exc})') from None
    except json.JSONDecodeError as exc:
        raise ContractViolation(f'{path}:{exc.lineno}: {exc.msg}') from None
    scenario = parse_scenario(data)
    if not scenario.name:
        scenario = scenario.model_copy(update={'name': path.stem})
    return scenario
