"""HTTP status mapping for framework errors.

The ``x-fault-kind`` header carries the exact kind, so a client can tell
OmissionFailure from TimingFault although both answer 408.
"""
from __future__ import annotations

from typing import Optional

from rest_framework.response import Response
from rest_framework.views import exception_handler as drf_exception_handler

from core.errors import ErrorKind, FrameworkError

FAULT_HEADER = 'x-fault-kind'

STATUS_BY_KIND: dict[ErrorKind, int] = {
    ErrorKind.UNAUTHORISED_ACCESS: 401,
    ErrorKind.NOT_FOUND: 404,
    ErrorKind.TIMING_FAULT: 408,
    ErrorKind.OMISSION_FAILURE: 408,
    ErrorKind.CONTRACT_VIOLATION: 422,
    ErrorKind.CRASH_FAILURE: 502,
    ErrorKind.TRANSIENT_FAULT: 503,
}

# 408 without a header reads as a timing fault
_KIND_BY_STATUS: dict[int, ErrorKind] = {
    401: ErrorKind.UNAUTHORISED_ACCESS,
    404: ErrorKind.NOT_FOUND,
    408: ErrorKind.TIMING_FAULT,
    422: ErrorKind.CONTRACT_VIOLATION,
    502: ErrorKind.CRASH_FAILURE,
    503: ErrorKind.TRANSIENT_FAULT,
}


def status_for(kind: ErrorKind) -> int:
    return STATUS_BY_KIND[kind]


def kind_for(status_code: int, fault_header: Optional[str] = None) -> Optional[ErrorKind]:
    """Inverse of ``status_for``; None when the status is not a framework error."""
    if fault_header:
        try:
            kind = ErrorKind.parse(fault_header)
        except FrameworkError:
            kind = None
        if kind is not None and STATUS_BY_KIND[kind] == status_code:
            return kind
    return _KIND_BY_STATUS.get(status_code)


def error_body(exc: FrameworkError) -> dict:
    return {'error': exc.as_dict()}


def error_response(exc: FrameworkError) -> Response:
    return Response(error_body(exc), status=status_for(exc.kind), headers={FAULT_HEADER: exc.kind.value})


def exception_handler(exc, context):
    """DRF exception handler that also renders FrameworkError."""
    if isinstance(exc, FrameworkError):
        return error_response(exc)
    return drf_exception_handler(exc, context)
