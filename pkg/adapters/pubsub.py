"""Pub/sub frames: newline-delimited JSON objects over TCP.

Client ops are ``pub``, ``sub``, ``ack`` and ``unsub``; the server answers
each line with ``ok`` or ``err`` and pushes ``evt`` frames for every
subscription. See docs/pubsub.md.
"""
from __future__ import annotations

import json
import logging
import threading
from collections import deque
from typing import Any, Callable, Optional

from bus.services import BusEvent, EventBus, Subscription
from core.clock import Clock
from core.errors import ContractViolation, FrameworkError
from core.ids import IdFactory
from core.values import CanonicalMessage, from_canonical, to_canonical

logger = logging.getLogger(__name__)

MAX_LINE_BYTES = 1024 * 1024
CLIENT_OPS = ('pub', 'sub', 'ack', 'unsub')


def encode_frame(frame: dict) -> bytes:
    return json.dumps(frame, separators=(',', ':'), sort_keys=True, ensure_ascii=False).encode('utf-8') + b'\n'


def error_frame(reason: str, ref: Any = None, kind: Optional[str] = None) -> dict:
    frame = {'op': 'err', 'reason': reason}
    if ref is not None:
        frame['ref'] = ref
    if kind:
        frame['kind'] = kind
    return frame


def event_frame(subscription_id: str, event: BusEvent) -> dict:
    message = event.payload
    return {
        'op': 'evt',
        'sub': subscription_id,
        'delivery_id': event.delivery_id,
        'topic': event.topic,
        'attempt': event.attempt,
        'id': message.message_id,
        'corr': message.correlation_id,
        'cap': message.capability.name,
        'ts': message.timestamp_ms,
        'headers': message.headers_dict(),
        'payload': from_canonical(message.body),
    }


class FrameQueue:
    """Bounded outbound queue; an overflow is reported once as an ``err`` frame."""

    def __init__(self, maxsize: int) -> None:
        self.maxsize = maxsize
        self._frames: deque[dict] = deque()
        self._overflowed = 0
        self._lock = threading.Lock()

    def put(self, frame: dict, force: bool = False) -> bool:
        with self._lock:
            if not force and len(self._frames) >= self.maxsize:
                self._overflowed += 1
                return False
            self._frames.append(frame)
            return True

    def drain(self) -> list[dict]:
        with self._lock:
            frames = list(self._frames)
            self._frames.clear()
            dropped, self._overflowed = self._overflowed, 0
        if dropped:
            frames.insert(0, error_frame(f'backpressure: {dropped} event(s) not delivered, awaiting redelivery'))
        return frames

    def __len__(self) -> int:
        with self._lock:
            return len(self._frames)


class FrameSession:
    """State of one pub/sub connection.

    ``handle_line`` answers every line; events are handed to ``sink`` as they
    arrive. An event the sink refuses stays unacked and is redelivered.
    """

    def __init__(
        self,
        gateway,
        bus: EventBus,
        clock: Clock,
        ids: Optional[IdFactory] = None,
        sink: Optional[Callable[[dict], bool]] = None,
        require_token: bool = False,
    ) -> None:
        self.gateway = gateway
        self.bus = bus
        self.clock = clock
        self.ids = ids or IdFactory()
        self.sink = sink or (lambda frame: True)
        self.require_token = require_token
        self._subscriptions: dict[str, Subscription] = {}
        self._lock = threading.Lock()

    def close(self) -> None:
        with self._lock:
            subscriptions = list(self._subscriptions.values())
            self._subscriptions.clear()
        for subscription in subscriptions:
            self.bus.unsubscribe(subscription)

    @property
    def subscription_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._subscriptions)

    def handle_line(self, line: 'bytes | str') -> dict:
        ref = None
        try:
            if isinstance(line, bytes):
                if len(line) > MAX_LINE_BYTES:
                    raise ContractViolation('frame too large')
                line = line.decode('utf-8')
            frame = json.loads(line)
            if not isinstance(frame, dict):
                raise ContractViolation('frame must be a JSON object')
            ref = frame.get('id')
            op = frame.get('op')
            if op not in CLIENT_OPS:
                raise ContractViolation(f'unknown op {op!r}')
            return getattr(self, f'_on_{op}')(frame)
        except FrameworkError as exc:
            return error_frame(exc.detail or exc.kind.value, ref, exc.kind.value)
        except (UnicodeDecodeError, ValueError) as exc:
            return error_frame(f'malformed frame: {exc.__class__.__name__}', ref)
        except Exception:
            logger.exception('adapters: falha ao tratar frame')
            return error_frame('internal error', ref)

    def _field(self, frame: dict, name: str, kind=str) -> Any:
        value = frame.get(name)
        if not isinstance(value, kind) or isinstance(value, bool) or value == '':
            raise ContractViolation(f'{frame.get("op")} frame needs {name!r}')
        return value

    def _on_pub(self, frame: dict) -> dict:
        topic = self._field(frame, 'topic')
        headers = frame.get('headers') or {}
        if not isinstance(headers, dict):
            raise ContractViolation('headers must be an object')
        if frame.get('device'):
            headers = {**headers, 'x-device-id': str(frame['device'])}
        timestamp = frame.get('ts')
        message = CanonicalMessage(
            message_id=str(frame.get('id') or self.ids.new('pub')),
            capability=str(frame.get('cap') or topic),
            timestamp_ms=self.clock.now_ms() if timestamp is None else timestamp,
            body=to_canonical(frame.get('payload', {})),
            correlation_id=frame.get('corr'),
            headers=headers,
        )
        delivery_id = self.gateway.publish_upstream(frame.get('token'), topic, message, self.require_token)
        return {'op': 'ok', 'ref': message.message_id, 'delivery_id': delivery_id}

    def _on_sub(self, frame: dict) -> dict:
        pattern = self._field(frame, 'pattern')
        holder: dict[str, str] = {}

        def forward(event: BusEvent) -> None:
            if not self.sink(event_frame(holder['id'], event)):
                raise ContractViolation('outbound queue full')

        subscription = self.bus.subscribe(pattern, handler=forward, auto_ack=False)
        holder['id'] = subscription.subscription_id
        with self._lock:
            self._subscriptions[subscription.subscription_id] = subscription
        return {'op': 'ok', 'ref': frame.get('id'), 'sub': subscription.subscription_id}

    def _subscription(self, frame: dict) -> Subscription:
        subscription_id = self._field(frame, 'sub')
        with self._lock:
            subscription = self._subscriptions.get(subscription_id)
        if subscription is None:
            raise ContractViolation(f'unknown subscription {subscription_id}')
        return subscription

    def _on_ack(self, frame: dict) -> dict:
        subscription = self._subscription(frame)
        delivery_id = self._field(frame, 'delivery_id')
        self.bus.ack(subscription, delivery_id)
        return {'op': 'ok', 'ref': frame.get('id'), 'delivery_id': delivery_id}

    def _on_unsub(self, frame: dict) -> dict:
        subscription = self._subscription(frame)
        with self._lock:
            self._subscriptions.pop(subscription.subscription_id, None)
        self.bus.unsubscribe(subscription)
        return {'op': 'ok', 'ref': frame.get('id'), 'sub': subscription.subscription_id}
