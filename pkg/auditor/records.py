from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Optional

from core.errors import ContractViolation, ErrorKind

OK = 'ok'


def _outcome(value: str) -> str:
    if value == OK:
        return value
    return ErrorKind.parse(value).value


@dataclass(frozen=True, slots=True)
class Hop:
    service_id: str
    capability: str
    start_ms: int
    end_ms: int
    outcome: str = OK

    @property
    def span_ms(self) -> int:
        return self.end_ms - self.start_ms

    def as_dict(self) -> dict:
        return {
            'service_id': self.service_id,
            'capability': self.capability,
            'start_ms': self.start_ms,
            'end_ms': self.end_ms,
            'outcome': self.outcome,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'Hop':
        return cls(
            service_id=str(data['service_id']),
            capability=str(data['capability']),
            start_ms=int(data['start_ms']),
            end_ms=int(data['end_ms']),
            outcome=_outcome(str(data.get('outcome', OK))),
        )


@dataclass(frozen=True, slots=True)
class AuditRecord:
    transaction_id: str
    capability: str
    start_ms: int
    total_ms: int
    final_outcome: str = OK
    correlation_id: Optional[str] = None
    consumer_id: str = ''
    hops: tuple[Hop, ...] = field(default=())
    kind: str = 'request'
    seq: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, 'hops', tuple(self.hops))

    @property
    def ok(self) -> bool:
        return self.final_outcome == OK

    def check(self) -> None:
        """Raise ContractViolation when the record breaks an audit invariant."""
        if not self.transaction_id:
            raise ContractViolation('audit record needs a transaction_id')
        try:
            _outcome(self.final_outcome)
        except ContractViolation:
            raise ContractViolation(f'unknown final outcome {self.final_outcome!r}') from None
        if self.total_ms < 0:
            raise ContractViolation('total_ms must be non-negative')
        if self.ok and not self.hops:
            raise ContractViolation('completed transactions need at least one hop')
        for hop in self.hops:
            if hop.end_ms < hop.start_ms:
                raise ContractViolation(f'hop {hop.service_id} ends before it starts')
            _outcome(hop.outcome)
        if self.hops:
            span = max(h.end_ms for h in self.hops) - min(h.start_ms for h in self.hops)
            if self.total_ms < max(h.span_ms for h in self.hops) or self.total_ms < span:
                raise ContractViolation('total_ms shorter than the hops it covers')

    def with_seq(self, seq: int) -> 'AuditRecord':
        return replace(self, seq=seq)

    def as_dict(self) -> dict:
        return {
            'seq': self.seq,
            'transaction_id': self.transaction_id,
            'correlation_id': self.correlation_id,
            'consumer_id': self.consumer_id,
            'kind': self.kind,
            'capability': self.capability,
            'start_ms': self.start_ms,
            'total_ms': self.total_ms,
            'final_outcome': self.final_outcome,
            'hops': [hop.as_dict() for hop in self.hops],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'AuditRecord':
        try:
            return cls(
                transaction_id=str(data['transaction_id']),
                capability=str(data['capability']),
                start_ms=int(data['start_ms']),
                total_ms=int(data['total_ms']),
                final_outcome=_outcome(str(data['final_outcome'])),
                correlation_id=data.get('correlation_id'),
                consumer_id=str(data.get('consumer_id') or ''),
                hops=tuple(Hop.from_dict(hop) for hop in data.get('hops') or ()),
                kind=str(data.get('kind') or 'request'),
                seq=data.get('seq'),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ContractViolation(f'malformed audit record: {exc}') from None
