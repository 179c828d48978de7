"""Binding between a registered service_id and whatever actually answers it."""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Protocol

if TYPE_CHECKING:
    from codec.services import EncodedMessage


@dataclass(frozen=True, slots=True)
class CallOutcome:
    """What the caller observed for one invocation.

    ``end_ms`` is when the caller stopped waiting: the reply time, the refusal
    time or the deadline. ``late`` means a reply exists but arrived after the
    deadline; ``timed_out`` means no reply at all.
    """

    end_ms: int
    response: Optional['EncodedMessage'] = None
    refused: bool = False
    timed_out: bool = False
    late: bool = False

    @property
    def ok(self) -> bool:
        return self.response is not None and not (self.refused or self.timed_out or self.late)


class ServiceEndpoint(Protocol):
    def invoke(self, request: 'EncodedMessage', start_ms: int, timeout_ms: int) -> CallOutcome:
        ...

    def ping(self, now_ms: int) -> bool:
        ...


class EndpointDirectory:
    def __init__(self) -> None:
        self._endpoints: dict[str, ServiceEndpoint] = {}
        self._lock = threading.Lock()

    def bind(self, service_id: str, endpoint: ServiceEndpoint) -> None:
        with self._lock:
            self._endpoints[service_id] = endpoint

    def unbind(self, service_id: str) -> None:
        with self._lock:
            self._endpoints.pop(service_id, None)

    def get(self, service_id: str) -> Optional[ServiceEndpoint]:
        with self._lock:
            return self._endpoints.get(service_id)

    def __contains__(self, service_id: str) -> bool:
        return self.get(service_id) is not None
