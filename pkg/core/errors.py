from __future__ import annotations

import enum
from typing import Optional


class ErrorKind(str, enum.Enum):
    """Fault taxonomy shared by every module.

    Five kinds come from the fault-tolerance requirement (unauthorised access,
    crash, omission, timing, transient); ContractViolation and NotFound are
    the framework's own.
    """

    UNAUTHORISED_ACCESS = 'UnauthorisedAccess'
    CRASH_FAILURE = 'CrashFailure'
    OMISSION_FAILURE = 'OmissionFailure'
    TIMING_FAULT = 'TimingFault'
    TRANSIENT_FAULT = 'TransientFault'
    CONTRACT_VIOLATION = 'ContractViolation'
    NOT_FOUND = 'NotFound'

    @classmethod
    def parse(cls, value: str) -> 'ErrorKind':
        for kind in cls:
            if kind.value == value:
                return kind
        raise ContractViolation(f'unknown error kind {value!r}')


class FrameworkError(Exception):
    """Raised for every failure a consumer can observe."""

    kind: ErrorKind = ErrorKind.CONTRACT_VIOLATION

    def __init__(self, detail: str = '', transaction_id: Optional[str] = None):
        super().__init__(detail)
        self.detail = detail
        self.transaction_id = transaction_id

    def __str__(self) -> str:
        if self.detail:
            return f'{self.kind.value}: {self.detail}'
        return self.kind.value

    def with_transaction(self, transaction_id: str) -> 'FrameworkError':
        if self.transaction_id is None:
            self.transaction_id = transaction_id
        return self

    def as_dict(self) -> dict:
        return {
            'kind': self.kind.value,
            'detail': self.detail,
            'transaction_id': self.transaction_id,
        }

    @staticmethod
    def from_kind(kind: ErrorKind, detail: str = '', transaction_id: Optional[str] = None) -> 'FrameworkError':
        return _BY_KIND[kind](detail, transaction_id)


class UnauthorisedAccess(FrameworkError):
    kind = ErrorKind.UNAUTHORISED_ACCESS


class CrashFailure(FrameworkError):
    kind = ErrorKind.CRASH_FAILURE


class OmissionFailure(FrameworkError):
    kind = ErrorKind.OMISSION_FAILURE


class TimingFault(FrameworkError):
    kind = ErrorKind.TIMING_FAULT


class TransientFault(FrameworkError):
    kind = ErrorKind.TRANSIENT_FAULT


class ContractViolation(FrameworkError):
    kind = ErrorKind.CONTRACT_VIOLATION


class NotFound(FrameworkError):
    kind = ErrorKind.NOT_FOUND


_BY_KIND: dict[ErrorKind, type[FrameworkError]] = {
    cls.kind: cls
    for cls in (
        UnauthorisedAccess,
        CrashFailure,
        OmissionFailure,
        TimingFault,
        TransientFault,
        ContractViolation,
        NotFound,
    )
}
