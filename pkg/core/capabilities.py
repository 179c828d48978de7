"""Capability naming convention.

A capability is the dotted, lowercase name of what a service does
(``weather.temperature.read``). Discovery is keyed on it instead of on the
device that happens to provide it.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import ContractViolation

MAX_SEGMENTS = 8
MAX_LENGTH = 128

_SEGMENT_RE = re.compile(r'^[a-z][a-z0-9_]*$')


@dataclass(frozen=True, slots=True, order=True)
class Capability:
    segments: tuple[str, ...]

    def __str__(self) -> str:
        return render_capability(self)

    @property
    def name(self) -> str:
        return render_capability(self)

    def startswith(self, prefix: 'Capability') -> bool:
        return self.segments[: len(prefix.segments)] == prefix.segments


def parse_capability(text: str) -> Capability:
    if not isinstance(text, str) or not text:
        raise ContractViolation('capability must be a non-empty string')
    if len(text) > MAX_LENGTH:
        raise ContractViolation(f'capability longer than {MAX_LENGTH} characters')
    segments = tuple(text.split('.'))
    if len(segments) > MAX_SEGMENTS:
        raise ContractViolation(f'capability has more than {MAX_SEGMENTS} segments: {text!r}')
    for segment in segments:
        if not _SEGMENT_RE.match(segment):
            raise ContractViolation(f'invalid capability segment {segment!r} in {text!r}')
    return Capability(segments)


def render_capability(capability: Capability) -> str:
    return '.'.join(capability.segments)


def as_capability(value: 'Capability | str') -> Capability:
    if isinstance(value, Capability):
        return value
    return parse_capability(value)


def topic_for_update(capability: Capability) -> str:
    """Telemetry topic of a reading capability (``x.y.read`` -> ``x.y.updated``)."""
    if len(capability.segments) == 1:
        return f'{capability.segments[0]}.updated'
    return '.'.join(capability.segments[:-1] + ('updated',))
