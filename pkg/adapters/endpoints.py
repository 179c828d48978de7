"""Devices reached through the event bus.

A command for device ``d`` is published on ``device.d.cmd``; the device
answers on ``device.d.reply`` with the command's message_id as correlation
id. Liveness pings use the ``sys.ping`` capability.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import replace
from typing import Optional

from bus.services import BusEvent, EventBus, is_topic_segment
from codec.services import Codec, EncodedMessage, default_codec
from core.clock import Clock
from core.errors import ContractViolation
from core.ids import IdFactory
from core.values import CanonicalMessage, map_of
from registry.endpoints import CallOutcome

logger = logging.getLogger(__name__)

PING_CAPABILITY = 'sys.ping'


def check_device_id(device_id: str) -> str:
    """Bus-attached device ids become one topic segment: lowercase letters, digits, ``_`` and ``-``."""
    if not is_topic_segment(device_id):
        raise ContractViolation(f'device_id {device_id!r} must match [a-z0-9_-]+ to be reachable on the bus')
    return device_id


def command_topic(device_id: str) -> str:
    return f'device.{device_id}.cmd'


def reply_topic(device_id: str) -> str:
    return f'device.{device_id}.reply'


class _Waiter:
    def __init__(self) -> None:
        self.reply: Optional[CanonicalMessage] = None
        self.done = threading.Event()

    def deliver(self, reply: CanonicalMessage) -> None:
        if self.reply is None:
            self.reply = reply
            self.done.set()


class DeviceChannel:
    def __init__(
        self,
        bus: EventBus,
        clock: Clock,
        ids: Optional[IdFactory] = None,
        codec: Optional[Codec] = None,
        ping_timeout_ms: int = 500,
    ) -> None:
        self.bus = bus
        self.clock = clock
        self.ids = ids or IdFactory()
        self.codec = codec or default_codec
        self.ping_timeout_ms = ping_timeout_ms
        self._waiters: dict[str, _Waiter] = {}
        self._lock = threading.Lock()
        self._subscription = bus.subscribe('device.#', handler=self._on_event)

    def close(self) -> None:
        self.bus.unsubscribe(self._subscription)

    def _on_event(self, event: BusEvent) -> None:
        if not event.topic.endswith('.reply'):
            return
        with self._lock:
            waiter = self._waiters.get(event.payload.correlation_id or '')
        if waiter is not None:
            waiter.deliver(event.payload)

    def request(self, device_id: str, command: CanonicalMessage, timeout_ms: int) -> Optional[CanonicalMessage]:
        """Publish ``command`` and return the device's reply, or None once ``timeout_ms`` passes."""
        waiter = _Waiter()
        with self._lock:
            self._waiters[command.message_id] = waiter
        try:
            self.bus.publish(command_topic(device_id), command)
            if not waiter.done.is_set() and not self.clock.is_virtual:
                waiter.done.wait(max(0, timeout_ms) / 1000)
            return waiter.reply
        finally:
            with self._lock:
                self._waiters.pop(command.message_id, None)

    def endpoint(self, device_id: str) -> 'BusEndpoint':
        return BusEndpoint(self, check_device_id(device_id))


class BusEndpoint:
    def __init__(self, channel: DeviceChannel, device_id: str) -> None:
        self.channel = channel
        self.device_id = device_id

    def __repr__(self) -> str:
        return f'<BusEndpoint {self.device_id}>'

    def invoke(self, request: EncodedMessage, start_ms: int, timeout_ms: int) -> CallOutcome:
        channel = self.channel
        command = replace(channel.codec.decode(request), timestamp_ms=start_ms)
        reply = channel.request(self.device_id, command, timeout_ms)
        deadline = start_ms + timeout_ms
        if reply is None:
            return CallOutcome(end_ms=deadline, timed_out=True)
        end = reply.timestamp_ms if channel.clock.is_virtual else channel.clock.now_ms()
        return CallOutcome(end_ms=end, response=channel.codec.encode(reply, request.format), late=end > deadline)

    def ping(self, now_ms: int) -> bool:
        channel = self.channel
        command = CanonicalMessage(
            message_id=channel.ids.new('ping'),
            capability=PING_CAPABILITY,
            timestamp_ms=now_ms,
            body=map_of({}),
        )
        return channel.request(self.device_id, command, channel.ping_timeout_ms) is not None
