"""Composite and split definitions.

Kept free of registry/assembler runtime imports: the registry persists
CompositeSpecs and the gateway stores SplitMappings.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from core.capabilities import Capability, as_capability
from core.errors import ContractViolation
from core.values import CanonicalValue, Schema, ValueKind, map_of


class ExecutionMode(str, enum.Enum):
    PARALLEL = 'Parallel'
    CHAINED = 'Chained'

    @classmethod
    def parse(cls, value: 'ExecutionMode | str | None') -> 'ExecutionMode':
        if isinstance(value, ExecutionMode):
            return value
        for mode in cls:
            if mode.value.lower() == str(value or '').strip().lower():
                return mode
        raise ContractViolation(f'unknown execution mode {value!r}')


@dataclass(frozen=True, slots=True)
class MergeRule:
    """Copy ``source`` from member ``member``'s reply into composite field ``target``."""

    member: int
    source: str
    target: str

    def as_dict(self) -> dict:
        return {'member': self.member, 'from': self.source, 'to': self.target}

    @classmethod
    def parse(cls, raw: Any) -> 'MergeRule':
        if isinstance(raw, Mapping):
            member, source, target = raw.get('member'), raw.get('from'), raw.get('to', raw.get('from'))
        elif isinstance(raw, (list, tuple)) and len(raw) in (2, 3):
            member, source = raw[0], raw[1]
            target = raw[2] if len(raw) == 3 else raw[1]
        else:
            raise ContractViolation('merge rules must be {"member","from","to"} objects')
        if isinstance(member, bool) or not isinstance(member, int):
            raise ContractViolation('merge rule member must be an integer index')
        if not isinstance(source, str) or not source or not isinstance(target, str) or not target:
            raise ContractViolation('merge rule fields must be non-empty strings')
        return cls(member, source, target)


def _check_merge(members: Sequence[Capability], merge_map: Sequence[MergeRule]) -> None:
    targets = [rule.target for rule in merge_map]
    if len(targets) != len(set(targets)):
        raise ContractViolation('merge map targets must be distinct')
    for rule in merge_map:
        if not 0 <= rule.member < len(members):
            raise ContractViolation(f'merge rule references member {rule.member} of {len(members)}')


def merge_bodies(merge_map: Sequence[MergeRule], bodies: Sequence[CanonicalValue]) -> CanonicalValue:
    """Build the composite body from member replies; only mapped fields survive."""
    pairs = []
    for rule in merge_map:
        body = bodies[rule.member]
        if body.kind is not ValueKind.MAP:
            raise ContractViolation(f'member {rule.member} replied with {body.kind.value}, expected map')
        value = body.get(rule.source)
        if value is None:
            raise ContractViolation(f'member {rule.member} reply lacks field {rule.source!r}')
        pairs.append((rule.target, value))
    return map_of(pairs)


@dataclass(frozen=True, slots=True)
class CompositeSpec:
    capability: Capability
    members: tuple[Capability, ...]
    merge_map: tuple[MergeRule, ...]
    mode: ExecutionMode = ExecutionMode.PARALLEL
    output_schema: Schema = field(default_factory=Schema)

    def __post_init__(self) -> None:
        object.__setattr__(self, 'capability', as_capability(self.capability))
        object.__setattr__(self, 'members', tuple(as_capability(m) for m in self.members))
        object.__setattr__(self, 'merge_map', tuple(self.merge_map))
        object.__setattr__(self, 'mode', ExecutionMode.parse(self.mode))
        if len(self.members) < 2:
            raise ContractViolation('a composite needs at least two members')
        if self.capability in self.members:
            raise ContractViolation('a composite cannot contain its own capability')
        _check_merge(self.members, self.merge_map)

    @property
    def signature(self) -> tuple[str, ...]:
        return tuple(sorted({member.name for member in self.members}))

    def as_dict(self) -> dict:
        return {
            'capability': self.capability.name,
            'members': [member.name for member in self.members],
            'merge': [rule.as_dict() for rule in self.merge_map],
            'mode': self.mode.value,
            'schema': self.output_schema.as_list(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'CompositeSpec':
        if not isinstance(data, Mapping):
            raise ContractViolation('composite spec must be an object')
        unknown = set(data) - {'capability', 'members', 'merge', 'mode', 'schema'}
        if unknown:
            raise ContractViolation(f'unknown composite keys: {", ".join(sorted(unknown))}')
        members = data.get('members')
        if not isinstance(members, list):
            raise ContractViolation('composite members must be a list')
        return cls(
            capability=data.get('capability') or '',
            members=tuple(members),
            merge_map=tuple(MergeRule.parse(rule) for rule in _as_list(data.get('merge'))),
            mode=data.get('mode') or ExecutionMode.PARALLEL,
            output_schema=Schema.from_list(data.get('schema')),
        )


@dataclass(frozen=True, slots=True)
class SplitMapping:
    """Answers ``coarse`` by fanning out to ``fines``."""

    coarse: Capability
    fines: tuple[Capability, ...]
    merge_map: tuple[MergeRule, ...]
    mode: ExecutionMode = ExecutionMode.PARALLEL
    output_schema: Schema = field(default_factory=Schema)

    def __post_init__(self) -> None:
        object.__setattr__(self, 'coarse', as_capability(self.coarse))
        object.__setattr__(self, 'fines', tuple(as_capability(f) for f in self.fines))
        object.__setattr__(self, 'merge_map', tuple(self.merge_map))
        object.__setattr__(self, 'mode', ExecutionMode.parse(self.mode))
        if len(self.fines) < 2:
            raise ContractViolation('a split needs at least two fine-grained capabilities')
        if self.coarse in self.fines:
            raise ContractViolation(f'split of {self.coarse} refers to itself')
        _check_merge(self.fines, self.merge_map)

    def as_composite(self) -> CompositeSpec:
        return CompositeSpec(self.coarse, self.fines, self.merge_map, self.mode, self.output_schema)

    def as_dict(self) -> dict:
        return {
            'coarse': self.coarse.name,
            'fines': [fine.name for fine in self.fines],
            'merge': [rule.as_dict() for rule in self.merge_map],
            'mode': self.mode.value,
            'schema': self.output_schema.as_list(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'SplitMapping':
        if not isinstance(data, Mapping):
            raise ContractViolation('split mapping must be an object')
        unknown = set(data) - {'coarse', 'fines', 'merge', 'mode', 'schema'}
        if unknown:
            raise ContractViolation(f'unknown split keys: {", ".join(sorted(unknown))}')
        fines = data.get('fines')
        if not isinstance(fines, list):
            raise ContractViolation('split fines must be a list')
        return cls(
            coarse=data.get('coarse') or '',
            fines=tuple(fines),
            merge_map=tuple(MergeRule.parse(rule) for rule in _as_list(data.get('merge'))),
            mode=data.get('mode') or ExecutionMode.PARALLEL,
            output_schema=Schema.from_list(data.get('schema')),
        )


def _as_list(raw: Any) -> Iterable:
    if raw is None:
        return ()
    if not isinstance(raw, list):
        raise ContractViolation('merge must be a list')
    return raw
