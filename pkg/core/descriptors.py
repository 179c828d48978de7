from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

from .capabilities import Capability, as_capability
from .errors import ContractViolation
from .values import Schema

DEFAULT_LEASE_TTL_MS = 30_000


class ServiceClass(str, enum.Enum):
    FUNCTIONAL = 'Functional'
    NON_FUNCTIONAL = 'NonFunctional'


class Granularity(str, enum.Enum):
    ATOMIC = 'Atomic'
    COMPOSITE = 'Composite'


class WireFormat(str, enum.Enum):
    JSON = 'JsonForm'
    XML = 'XmlForm'

    @property
    def content_type(self) -> str:
        return 'application/json' if self is WireFormat.JSON else 'application/xml'

    @property
    def short_name(self) -> str:
        return 'json' if self is WireFormat.JSON else 'xml'

    @classmethod
    def parse(cls, value: 'WireFormat | str | None', default: 'WireFormat | None' = None) -> 'WireFormat':
        if isinstance(value, WireFormat):
            return value
        raw = (value or '').strip().lower()
        if not raw:
            if default is not None:
                return default
            raise ContractViolation('wire format is required')
        if raw in ('json', 'jsonform', 'application/json') or raw.endswith('+json'):
            return cls.JSON
        if raw in ('xml', 'xmlform', 'application/xml', 'text/xml') or raw.endswith('+xml'):
            return cls.XML
        raise ContractViolation(f'unsupported wire format {value!r}')

    @classmethod
    def from_accept(cls, header: str | None, default: 'WireFormat') -> 'WireFormat':
        """Pick a format from an Accept header; first supported media range wins."""
        for part in (header or '').split(','):
            media = part.split(';', 1)[0].strip().lower()
            if media in ('*/*', ''):
                continue
            try:
                return cls.parse(media)
            except ContractViolation:
                continue
        return default


def _enum(enum_cls, value, label):
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(value)
    except ValueError:
        raise ContractViolation(f'invalid {label} {value!r}') from None


@dataclass(frozen=True, slots=True)
class ServiceDescriptor:
    service_id: str
    capability: Capability
    service_class: ServiceClass = ServiceClass.FUNCTIONAL
    device_id: str = ''
    domain: str = ''
    input_schema: Schema = field(default_factory=Schema)
    output_schema: Schema = field(default_factory=Schema)
    preferred_format: WireFormat = WireFormat.JSON
    granularity: Granularity = Granularity.ATOMIC
    cost_hint_ms: int = 0
    lease_ttl_ms: int = DEFAULT_LEASE_TTL_MS

    def __post_init__(self) -> None:
        if not isinstance(self.service_id, str) or not self.service_id:
            raise ContractViolation('service_id is required')
        object.__setattr__(self, 'capability', as_capability(self.capability))
        object.__setattr__(self, 'service_class', _enum(ServiceClass, self.service_class, 'service class'))
        object.__setattr__(self, 'granularity', _enum(Granularity, self.granularity, 'granularity'))
        object.__setattr__(self, 'preferred_format', WireFormat.parse(self.preferred_format))
        if isinstance(self.cost_hint_ms, bool) or not isinstance(self.cost_hint_ms, int) or self.cost_hint_ms < 0:
            raise ContractViolation('cost_hint_ms must be a non-negative integer')
        if isinstance(self.lease_ttl_ms, bool) or not isinstance(self.lease_ttl_ms, int) or self.lease_ttl_ms <= 0:
            raise ContractViolation('lease_ttl_ms must be a positive integer')

    @property
    def is_functional(self) -> bool:
        return self.service_class is ServiceClass.FUNCTIONAL

    @property
    def is_composite(self) -> bool:
        return self.granularity is Granularity.COMPOSITE

    def with_changes(self, **changes: Any) -> 'ServiceDescriptor':
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return {
            'service_id': self.service_id,
            'capability': self.capability.name,
            'class': self.service_class.value,
            'device_id': self.device_id,
            'domain': self.domain,
            'input_schema': self.input_schema.as_list(),
            'output_schema': self.output_schema.as_list(),
            'preferred_format': self.preferred_format.value,
            'granularity': self.granularity.value,
            'cost_hint_ms': self.cost_hint_ms,
            'lease_ttl_ms': self.lease_ttl_ms,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'ServiceDescriptor':
        if not isinstance(data, Mapping):
            raise ContractViolation('descriptor must be an object')
        try:
            return cls(
                service_id=data['service_id'],
                capability=data['capability'],
                service_class=data.get('class', ServiceClass.FUNCTIONAL.value),
                device_id=str(data.get('device_id') or ''),
                domain=str(data.get('domain') or ''),
                input_schema=Schema.from_list(data.get('input_schema')),
                output_schema=Schema.from_list(data.get('output_schema')),
                preferred_format=data.get('preferred_format', WireFormat.JSON.value),
                granularity=data.get('granularity', Granularity.ATOMIC.value),
                cost_hint_ms=data.get('cost_hint_ms', 0),
                lease_ttl_ms=data.get('lease_ttl_ms', DEFAULT_LEASE_TTL_MS),
            )
        except KeyError as exc:
            raise ContractViolation(f'descriptor missing {exc.args[0]}') from None
