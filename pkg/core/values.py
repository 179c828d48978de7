"""Format-neutral message model: canonical values, schemas and messages."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional

from .capabilities import Capability, as_capability
from .errors import ContractViolation

INT64_MIN = -(2 ** 63)
INT64_MAX = 2 ** 63 - 1
MAX_DEPTH = 32


class ValueKind(str, enum.Enum):
    NULL = 'null'
    BOOL = 'bool'
    INT = 'int'
    FLOAT = 'float'
    STR = 'str'
    LIST = 'list'
    MAP = 'map'

    @classmethod
    def parse(cls, value: str) -> 'ValueKind':
        # schema files spell kinds the long way ("string", "integer")
        aliases = {'string': 'str', 'integer': 'int', 'boolean': 'bool', 'number': 'float', 'none': 'null'}
        value = aliases.get(value, value)
        try:
            return cls(value)
        except ValueError:
            raise ContractViolation(f'unknown value kind {value!r}') from None


SCALAR_KINDS = frozenset({ValueKind.NULL, ValueKind.BOOL, ValueKind.INT, ValueKind.FLOAT, ValueKind.STR})


@dataclass(frozen=True, slots=True, eq=False)
class CanonicalValue:
    """Tagged value tree.

    ``value`` holds None, bool, int, float, str, a tuple of CanonicalValue
    (LIST) or a tuple of (key, CanonicalValue) pairs sorted by key (MAP).
    Use the module-level constructors; they enforce the invariants.
    """

    kind: ValueKind
    value: Any

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CanonicalValue) or other.kind is not self.kind:
            return False
        if self.kind is ValueKind.FLOAT:
            # bitwise: 0.0 and -0.0 are different values
            return self.value == other.value and math.copysign(1.0, self.value) == math.copysign(1.0, other.value)
        return self.value == other.value

    def __hash__(self) -> int:
        if self.kind is ValueKind.FLOAT:
            return hash((self.kind, self.value, math.copysign(1.0, self.value)))
        return hash((self.kind, self.value))

    def __repr__(self) -> str:
        return f'{self.kind.value}:{self.value!r}'

    @property
    def is_map(self) -> bool:
        return self.kind is ValueKind.MAP

    def items(self) -> tuple[tuple[str, 'CanonicalValue'], ...]:
        if self.kind is not ValueKind.MAP:
            raise ContractViolation('value is not a map')
        return self.value

    def get(self, key: str) -> Optional['CanonicalValue']:
        for k, v in self.items():
            if k == key:
                return v
        return None

    def depth(self) -> int:
        if self.kind is ValueKind.LIST:
            return 1 + max((item.depth() for item in self.value), default=0)
        if self.kind is ValueKind.MAP:
            return 1 + max((item.depth() for _, item in self.value), default=0)
        return 1

    def to_python(self) -> Any:
        if self.kind is ValueKind.LIST:
            return [item.to_python() for item in self.value]
        if self.kind is ValueKind.MAP:
            return {k: v.to_python() for k, v in self.value}
        return self.value


def null() -> CanonicalValue:
    return CanonicalValue(ValueKind.NULL, None)


def boolean(value: bool) -> CanonicalValue:
    if not isinstance(value, bool):
        raise ContractViolation(f'expected bool, got {type(value).__name__}')
    return CanonicalValue(ValueKind.BOOL, value)


def integer(value: int) -> CanonicalValue:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ContractViolation(f'expected int, got {type(value).__name__}')
    if not INT64_MIN <= value <= INT64_MAX:
        raise ContractViolation(f'integer {value} outside signed 64-bit range')
    return CanonicalValue(ValueKind.INT, value)


def floating(value: float) -> CanonicalValue:
    if not isinstance(value, float):
        raise ContractViolation(f'expected float, got {type(value).__name__}')
    if math.isnan(value):
        raise ContractViolation('NaN is not a canonical value')
    if math.isinf(value):
        raise ContractViolation('infinite floats are not canonical values')
    return CanonicalValue(ValueKind.FLOAT, value)


def string(value: str) -> CanonicalValue:
    if not isinstance(value, str):
        raise ContractViolation(f'expected str, got {type(value).__name__}')
    try:
        value.encode('utf-8')
    except UnicodeEncodeError:
        raise ContractViolation('string is not valid unicode') from None
    return CanonicalValue(ValueKind.STR, value)


def list_of(items: Iterable[CanonicalValue]) -> CanonicalValue:
    items = tuple(items)
    for item in items:
        if not isinstance(item, CanonicalValue):
            raise ContractViolation('list items must be canonical values')
    return CanonicalValue(ValueKind.LIST, items)


def map_of(entries: Mapping[str, CanonicalValue] | Iterable[tuple[str, CanonicalValue]]) -> CanonicalValue:
    pairs = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
    seen: set[str] = set()
    for key, item in pairs:
        if not isinstance(key, str) or not key:
            raise ContractViolation('map keys must be non-empty strings')
        string(key)
        if key in seen:
            raise ContractViolation(f'duplicate map key {key!r}')
        if not isinstance(item, CanonicalValue):
            raise ContractViolation('map values must be canonical values')
        seen.add(key)
    return CanonicalValue(ValueKind.MAP, tuple(sorted(pairs, key=lambda pair: pair[0])))


def to_canonical(obj: Any) -> CanonicalValue:
    """Build a canonical value from plain Python data (as produced by json.loads)."""
    if isinstance(obj, CanonicalValue):
        return obj
    if obj is None:
        return null()
    if isinstance(obj, bool):
        return boolean(obj)
    if isinstance(obj, int):
        return integer(obj)
    if isinstance(obj, float):
        return floating(obj)
    if isinstance(obj, str):
        return string(obj)
    if isinstance(obj, (list, tuple)):
        return list_of(to_canonical(item) for item in obj)
    if isinstance(obj, Mapping):
        return map_of((key, to_canonical(item)) for key, item in obj.items())
    raise ContractViolation(f'unsupported value type {type(obj).__name__}')


def from_canonical(value: CanonicalValue) -> Any:
    return value.to_python()


def check_depth(value: CanonicalValue, limit: int = MAX_DEPTH) -> None:
    if value.depth() > limit:
        raise ContractViolation(f'value nesting deeper than {limit}')


# --- schemas --------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class SchemaField:
    name: str
    kind: ValueKind
    required: bool = True

    def as_dict(self) -> dict:
        return {'name': self.name, 'kind': self.kind.value, 'required': self.required}


@dataclass(frozen=True, slots=True)
class Schema:
    """Flat field list. An empty schema accepts any payload."""

    fields: tuple[SchemaField, ...] = ()

    def __post_init__(self) -> None:
        names = [f.name for f in self.fields]
        if len(names) != len(set(names)):
            raise ContractViolation('schema field names must be unique')
        if any(not name for name in names):
            raise ContractViolation('schema field names must be non-empty')

    @property
    def is_empty(self) -> bool:
        return not self.fields

    def field(self, name: str) -> Optional[SchemaField]:
        for f in self.fields:
            if f.name == name:
                return f
        return None

    def required(self) -> tuple[SchemaField, ...]:
        return tuple(f for f in self.fields if f.required)

    def as_list(self) -> list[dict]:
        return [f.as_dict() for f in self.fields]

    @classmethod
    def from_list(cls, raw: Any) -> 'Schema':
        if raw is None:
            return cls()
        if not isinstance(raw, list):
            raise ContractViolation('schema must be a list of fields')
        fields = []
        for entry in raw:
            if isinstance(entry, (list, tuple)) and len(entry) in (2, 3):
                name, kind = entry[0], entry[1]
                required = bool(entry[2]) if len(entry) == 3 else True
            elif isinstance(entry, Mapping):
                name, kind = entry.get('name'), entry.get('kind')
                required = bool(entry.get('required', True))
            else:
                raise ContractViolation('schema fields must be objects or (name, kind[, required]) lists')
            if not isinstance(name, str) or not isinstance(kind, str):
                raise ContractViolation('schema field needs a name and a kind')
            fields.append(SchemaField(name, ValueKind.parse(kind), required))
        return cls(tuple(fields))


def validate(body: CanonicalValue, schema: Schema) -> list[str]:
    """Return the schema violations of ``body``; an empty list means ok."""
    if schema.is_empty:
        return []
    if body.kind is not ValueKind.MAP:
        return [f'body is {body.kind.value}, expected map']
    violations = []
    for spec_field in schema.required():
        present = body.get(spec_field.name)
        if present is None:
            violations.append(f'missing {spec_field.name}')
        elif present.kind is not spec_field.kind:
            violations.append(
                f'kind mismatch for {spec_field.name}: expected {spec_field.kind.value}, got {present.kind.value}'
            )
    return violations


def schema_satisfies(candidate: Schema, required_by: Schema) -> bool:
    """True when every required field of ``required_by`` exists in ``candidate`` with the same kind."""
    for wanted in required_by.required():
        offered = candidate.field(wanted.name)
        if offered is None or offered.kind is not wanted.kind:
            return False
    return True


# --- messages -------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class CanonicalMessage:
    message_id: str
    capability: Capability
    timestamp_ms: int
    body: CanonicalValue
    correlation_id: Optional[str] = None
    headers: tuple[tuple[str, str], ...] = field(default=())

    def __post_init__(self) -> None:
        if not self.message_id:
            raise ContractViolation('message_id is required')
        object.__setattr__(self, 'capability', as_capability(self.capability))
        if isinstance(self.timestamp_ms, bool) or not isinstance(self.timestamp_ms, int):
            raise ContractViolation('timestamp_ms must be an integer')
        if not INT64_MIN <= self.timestamp_ms <= INT64_MAX:
            raise ContractViolation('timestamp_ms outside signed 64-bit range')
        if not isinstance(self.body, CanonicalValue):
            raise ContractViolation('body must be a canonical value')
        check_depth(self.body)
        headers = self.headers
        if isinstance(headers, Mapping):
            headers = headers.items()
        normalized = []
        for name, value in headers:
            if not isinstance(name, str) or not name or not isinstance(value, str):
                raise ContractViolation('headers must map non-empty strings to strings')
            string(name)
            string(value)
            normalized.append((name, value))
        if len({name for name, _ in normalized}) != len(normalized):
            raise ContractViolation('duplicate header name')
        object.__setattr__(self, 'headers', tuple(sorted(normalized)))

    def header(self, name: str, default: Optional[str] = None) -> Optional[str]:
        for key, value in self.headers:
            if key == name:
                return value
        return default

    def headers_dict(self) -> dict[str, str]:
        return dict(self.headers)

    def reply(self, message_id: str, body: CanonicalValue, timestamp_ms: int, headers=()) -> 'CanonicalMessage':
        return CanonicalMessage(
            message_id=message_id,
            capability=self.capability,
            timestamp_ms=timestamp_ms,
            body=body,
            correlation_id=self.message_id,
            headers=headers,
        )
