from __future__ import annotations

import logging
import re
import threading
from collections import deque
from dataclasses import dataclass, replace
from typing import Callable, Optional

from core.clock import Clock
from core.errors import ContractViolation, NotFound
from core.ids import IdFactory
from core.values import CanonicalMessage

logger = logging.getLogger(__name__)

DEADLETTER_TOPIC = 'bus.deadletter'
DEFAULT_REDELIVERY_MS = 2000
DEFAULT_MAX_ATTEMPTS = 5

_SEGMENT_RE = re.compile(r'^[a-z0-9_-]+$')


@dataclass(frozen=True, slots=True)
class BusEvent:
	delivery_id: str
	topic: str
	payload: CanonicalMessage
	attempt: int = 1


def is_topic_segment(text: str) -> bool:
	return isinstance(text, str) and bool(_SEGMENT_RE.match(text))


def check_topic(topic: str) -> str:
	if not isinstance(topic, str) or not topic:
		raise ContractViolation('topic must be a non-empty string')
	for segment in topic.split('.'):
		if segment in ('*', '#'):
			raise ContractViolation(f'cannot publish to wildcard topic {topic!r}')
		if not _SEGMENT_RE.match(segment):
			raise ContractViolation(f'invalid topic segment {segment!r} in {topic!r}')
	return topic


def check_pattern(pattern: str) -> str:
	if pattern == '#':
		return pattern
	if not isinstance(pattern, str) or not pattern:
		raise ContractViolation('pattern must be a non-empty string')
	segments = pattern.split('.')
	for index, segment in enumerate(segments):
		if segment in ('*', '#'):
			if index != len(segments) - 1 or index == 0:
				raise ContractViolation(f'wildcard must be the trailing segment of {pattern!r}')
			continue
		if not _SEGMENT_RE.match(segment):
			raise ContractViolation(f'invalid pattern segment {segment!r} in {pattern!r}')
	return pattern


def topic_matches(pattern: str, topic: str) -> bool:
	"""``a.*`` matches exactly one more segment; ``a.#`` matches ``a`` and anything below it."""
	if pattern == '#':
		return True
	wanted = pattern.split('.')
	actual = topic.split('.')
	if wanted[-1] == '#':
		prefix = wanted[:-1]
		return actual[:len(prefix)] == prefix
	if wanted[-1] == '*':
		return len(actual) == len(wanted) and actual[:-1] == wanted[:-1]
	return actual == wanted


@dataclass(slots=True)
class _Delivery:
	delivery_id: str
	topic: str
	payload: CanonicalMessage
	attempt: int = 0
	sent_at_ms: int = 0

	def event(self) -> BusEvent:
		return BusEvent(self.delivery_id, self.topic, self.payload, self.attempt)


class Subscription:
	"""Ordered stream of events for one pattern.

	At most one unacked delivery per topic is in flight, so acked events are
	observed in publish order even across redeliveries.
	"""

	def __init__(
		self,
		subscription_id: str,
		pattern: str,
		handler: Optional[Callable[[BusEvent], None]],
		auto_ack: bool = True,
	) -> None:
		self.subscription_id = subscription_id
		self.pattern = pattern
		self.handler = handler
		self.auto_ack = auto_ack
		self.active = True
		self._backlog: dict[str, deque[_Delivery]] = {}
		self._inflight: dict[str, _Delivery] = {}
		self._ready: deque[BusEvent] = deque()

	def __repr__(self) -> str:
		return f'<Subscription {self.subscription_id} {self.pattern}>'

	@property
	def outstanding(self) -> list[str]:
		return [d.delivery_id for d in self._inflight.values()]

	@property
	def pending(self) -> int:
		return len(self._inflight) + sum(len(backlog) for backlog in self._backlog.values())

	def poll(self) -> Optional[BusEvent]:
		"""Next delivered event (pull subscriptions)."""
		try:
			return self._ready.popleft()
		except IndexError:
			return None

	def drain(self) -> list[BusEvent]:
		events = []
		while (event := self.poll()) is not None:
			events.append(event)
		return events


class EventBus:
	"""In-process publish/subscribe with acks, redelivery and a dead-letter topic."""

	def __init__(
		self,
		clock: Clock,
		ids: Optional[IdFactory] = None,
		redelivery_timeout_ms: int = DEFAULT_REDELIVERY_MS,
		max_attempts: int = DEFAULT_MAX_ATTEMPTS,
	) -> None:
		self.clock = clock
		self.ids = ids or IdFactory()
		self.redelivery_timeout_ms = redelivery_timeout_ms
		self.max_attempts = max_attempts
		self._lock = threading.RLock()
		self._subscriptions: dict[str, Subscription] = {}

	def subscribe(
		self,
		pattern: str,
		handler: Optional[Callable[[BusEvent], None]] = None,
		auto_ack: bool = True,
	) -> Subscription:
		"""Pull subscription, or push when ``handler`` is given.

		Push deliveries are acked when the handler returns unless ``auto_ack``
		is False, in which case the subscriber acks them itself.
		"""
		check_pattern(pattern)
		subscription = Subscription(self.ids.new('sub'), pattern, handler, auto_ack)
		with self._lock:
			self._subscriptions[subscription.subscription_id] = subscription
		return subscription

	def unsubscribe(self, subscription: Subscription) -> None:
		with self._lock:
			subscription.active = False
			self._subscriptions.pop(subscription.subscription_id, None)

	def publish(self, topic: str, payload: CanonicalMessage) -> str:
		check_topic(topic)
		delivery_id = self.ids.new('dlv')
		with self._lock:
			targets = [s for s in self._subscriptions.values() if topic_matches(s.pattern, topic)]
			for subscription in targets:
				subscription._backlog.setdefault(topic, deque()).append(_Delivery(delivery_id, topic, payload))
		for subscription in targets:
			self._pump(subscription)
		return delivery_id

	def ack(self, subscription: Subscription, delivery_id: str) -> None:
		with self._lock:
			if not self._settle(subscription, delivery_id):
				raise NotFound(f'no outstanding delivery {delivery_id} for {subscription.subscription_id}')
		self._pump(subscription)

	def _settle(self, subscription: Subscription, delivery_id: str) -> bool:
		for topic, delivery in subscription._inflight.items():
			if delivery.delivery_id == delivery_id:
				del subscription._inflight[topic]
				return True
		return False

	def _pump(self, subscription: Subscription) -> None:
		"""Move backlog into flight for every idle topic; push handlers run outside the lock."""
		while True:
			with self._lock:
				if not subscription.active:
					return
				delivery = None
				for topic, backlog in subscription._backlog.items():
					if backlog and topic not in subscription._inflight:
						delivery = backlog.popleft()
						break
				if delivery is None:
					return
				delivery.attempt = 1
				delivery.sent_at_ms = self.clock.now_ms()
				subscription._inflight[delivery.topic] = delivery
				event = delivery.event()
				if subscription.handler is None:
					subscription._ready.append(event)
			if subscription.handler is not None:
				self._push(subscription, event)

	def _push(self, subscription: Subscription, event: BusEvent) -> None:
		try:
			subscription.handler(event)
		except Exception:
			logger.exception('bus: handler de %s falhou para %s (tentativa %s)', subscription.pattern, event.delivery_id, event.attempt)
			return
		if not subscription.auto_ack:
			return
		with self._lock:
			self._settle(subscription, event.delivery_id)

	def tick(self, now_ms: Optional[int] = None) -> int:
		"""Redeliver overdue deliveries; exhausted ones go to the dead-letter topic. Returns redeliveries."""
		now = self.clock.now_ms() if now_ms is None else now_ms
		redelivered: list[tuple[Subscription, BusEvent]] = []
		dead: list[tuple[Subscription, _Delivery]] = []
		with self._lock:
			for subscription in sorted(self._subscriptions.values(), key=lambda s: s.subscription_id):
				for topic, delivery in sorted(subscription._inflight.items()):
					if now - delivery.sent_at_ms < self.redelivery_timeout_ms:
						continue
					if delivery.attempt >= self.max_attempts:
						del subscription._inflight[topic]
						dead.append((subscription, delivery))
						continue
					delivery.attempt += 1
					delivery.sent_at_ms = now
					event = delivery.event()
					if subscription.handler is None:
						subscription._ready.append(event)
					redelivered.append((subscription, event))
		for subscription, event in redelivered:
			if subscription.handler is not None:
				self._push(subscription, event)
				self._pump(subscription)
		for subscription, delivery in dead:
			self._dead_letter(subscription, delivery)
			self._pump(subscription)
		return len(redelivered)

	def _dead_letter(self, subscription: Subscription, delivery: _Delivery) -> None:
		logger.warning(
			'bus: %s em %s esgotou %s tentativas para %s',
			delivery.delivery_id, delivery.topic, delivery.attempt, subscription.pattern,
		)
		if delivery.topic == DEADLETTER_TOPIC:
			return
		headers = dict(delivery.payload.headers)
		headers.update({
			'x-original-topic': delivery.topic,
			'x-delivery-id': delivery.delivery_id,
			'x-subscription': subscription.subscription_id,
		})
		self.publish(DEADLETTER_TOPIC, replace(delivery.payload, headers=headers))

	def subscriptions(self) -> list[Subscription]:
		with self._lock:
			return list(self._subscriptions.values())


class DedupConsumer:
	"""Wraps a handler so each delivery_id is observed once, however often it is redelivered.

	Use one instance per subscription. The bus keeps at most one unacked
	delivery per topic and subscription, and only that one is redelivered, so
	remembering the newest delivery_id of each topic is enough.
	"""

	def __init__(self, handler: Callable[[BusEvent], None]) -> None:
		self.handler = handler
		self._last: dict[str, str] = {}
		self._lock = threading.Lock()

	def __len__(self) -> int:
		with self._lock:
			return len(self._last)

	def observe(self, event: BusEvent) -> bool:
		with self._lock:
			if self._last.get(event.topic) == event.delivery_id:
				return False
			self._last[event.topic] = event.delivery_id
			return True

	def __call__(self, event: BusEvent) -> None:
		if self.observe(event):
			self.handler(event)
