from __future__ import annotations

import enum
from dataclasses import dataclass

from core.errors import ContractViolation


class FaultKind(str, enum.Enum):
    CRASH = 'Crash'
    OMISSION = 'Omission'
    TIMING = 'Timing'
    UNAUTHORISED = 'Unauthorised'
    TRANSIENT = 'Transient'


@dataclass(frozen=True, slots=True)
class FaultSpec:
    """A fault on one device, active during [start_ms, start_ms + duration_ms)."""

    target: str
    kind: FaultKind
    start_ms: int
    duration_ms: int
    extra_delay_ms: int = 0
    flap_period_ms: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, 'kind', FaultKind(self.kind))
        if self.duration_ms <= 0:
            raise ContractViolation('fault duration must be positive')
        if self.start_ms < 0:
            raise ContractViolation('fault start must be non-negative')
        if self.kind is FaultKind.TIMING and self.extra_delay_ms <= 0:
            raise ContractViolation('timing faults need a positive extra delay')
        if self.kind is FaultKind.TRANSIENT and self.flap_period_ms <= 0:
            raise ContractViolation('transient faults need a positive flap period')

    @property
    def end_ms(self) -> int:
        return self.start_ms + self.duration_ms

    def active(self, elapsed_ms: int) -> bool:
        return self.start_ms <= elapsed_ms < self.end_ms

    def down(self, elapsed_ms: int) -> bool:
        """Whether the device is unreachable at ``elapsed_ms`` because of this fault."""
        if not self.active(elapsed_ms):
            return False
        if self.kind is FaultKind.CRASH:
            return True
        if self.kind is FaultKind.TRANSIENT:
            # down for the first period, up for the next, and so on
            return ((elapsed_ms - self.start_ms) // self.flap_period_ms) % 2 == 0
        return False
