from __future__ import annotations

import enum
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

import pybreaker

from bus.services import EventBus
from core.clock import Clock
from core.conf import MonitorSection
from core.errors import ErrorKind, NotFound
from core.ids import IdFactory
from core.values import CanonicalMessage, map_of, null, string
from registry.endpoints import EndpointDirectory
from registry.services import ServiceRegistry

logger = logging.getLogger(__name__)

REDIRECT_TOPIC = 'service.redirect'
UNAVAILABLE_TOPIC = 'service.unavailable'
RESTORED_TOPIC = 'service.restored'

# pybreaker never leaves Open on its own; the cooldown runs on the injected clock
_NEVER_S = 10 ** 9


class HealthStatus(str, enum.Enum):
	UP = 'Up'
	SUSPECT = 'Suspect'
	DOWN = 'Down'


class BreakerState(str, enum.Enum):
	CLOSED = 'Closed'
	OPEN = 'Open'
	HALF_OPEN = 'HalfOpen'


_FROM_PYBREAKER = {
	pybreaker.STATE_CLOSED: BreakerState.CLOSED,
	pybreaker.STATE_OPEN: BreakerState.OPEN,
	pybreaker.STATE_HALF_OPEN: BreakerState.HALF_OPEN,
}


@dataclass(frozen=True, slots=True)
class Symptoms:
	probe_ok: bool = True
	request_timed_out: bool = False
	connection_refused: bool = False
	deadline_exceeded: bool = False


def classify(symptoms: Symptoms, flapping: bool = False) -> ErrorKind:
	"""Total mapping from observed symptoms to a fault kind.

	Precedence: flapping, then crash (refused or failed probe), omission,
	timing. A tuple with nothing wrong left in it is transient.
	"""
	if flapping:
		return ErrorKind.TRANSIENT_FAULT
	if symptoms.connection_refused or not symptoms.probe_ok:
		return ErrorKind.CRASH_FAILURE
	if symptoms.request_timed_out:
		return ErrorKind.OMISSION_FAILURE
	if symptoms.deadline_exceeded:
		return ErrorKind.TIMING_FAULT
	return ErrorKind.TRANSIENT_FAULT


@dataclass(frozen=True, slots=True)
class HealthState:
	service_id: str
	status: HealthStatus = HealthStatus.UP
	consecutive_failures: int = 0
	breaker: BreakerState = BreakerState.CLOSED
	open_until_ms: Optional[int] = None
	last_probe_ms: Optional[int] = None
	last_classification: Optional[ErrorKind] = None
	probe_ok: bool = True

	def as_dict(self) -> dict:
		return {
			'service_id': self.service_id,
			'status': self.status.value,
			'consecutive_failures': self.consecutive_failures,
			'breaker': self.breaker.value,
			'open_until_ms': self.open_until_ms,
			'last_probe_ms': self.last_probe_ms,
			'last_classification': self.last_classification.value if self.last_classification else None,
			'probe_ok': self.probe_ok,
		}


@dataclass(frozen=True, slots=True)
class FailoverAction:
	topic: str
	failed_service_id: str
	replacement_id: Optional[str] = None


class _TransitionLogger(pybreaker.CircuitBreakerListener):
	def state_change(self, cb, old_state, new_state):
		old = getattr(old_state, 'name', None)
		logger.info('monitor: breaker de %s %s -> %s', cb.name, old, getattr(new_state, 'name', new_state))


class _ProbeFailed(Exception):
	pass


def _succeed() -> None:
	return None


def _fail() -> None:
	raise _ProbeFailed()


@dataclass
class _Tracked:
	service_id: str
	breaker: pybreaker.CircuitBreaker
	status: HealthStatus = HealthStatus.UP
	consecutive_failures: int = 0
	open_until_ms: Optional[int] = None
	last_probe_ms: Optional[int] = None
	last_classification: Optional[ErrorKind] = None
	probe_ok: bool = True
	trial_taken: bool = False
	history: deque = field(default_factory=deque)

	@property
	def breaker_state(self) -> BreakerState:
		return _FROM_PYBREAKER[self.breaker.current_state]

	def snapshot(self) -> HealthState:
		state = self.breaker_state
		return HealthState(
			service_id=self.service_id,
			status=self.status,
			consecutive_failures=self.consecutive_failures,
			breaker=state,
			open_until_ms=self.open_until_ms if state is BreakerState.OPEN else None,
			last_probe_ms=self.last_probe_ms,
			last_classification=self.last_classification,
			probe_ok=self.probe_ok,
		)


class ServiceMonitor:
	"""Health probing, fault classification and circuit breaking per service instance.

	Probe failures drive the breaker; request failures only mark the
	instance Suspect, except for the single trial admitted while HalfOpen.
	"""

	def __init__(
		self,
		registry: ServiceRegistry,
		directory: EndpointDirectory,
		bus: Optional[EventBus] = None,
		clock: Optional[Clock] = None,
		ids: Optional[IdFactory] = None,
		settings: MonitorSection = MonitorSection(),
	) -> None:
		self.registry = registry
		self.directory = directory
		self.bus = bus
		self.clock = clock or registry.clock
		self.ids = ids or IdFactory()
		self.settings = settings
		self._lock = threading.RLock()
		self._tracked: dict[str, _Tracked] = {}
		self._listener = _TransitionLogger()

	@property
	def cooldown_ms(self) -> int:
		return self.settings.cooldown_intervals * self.settings.probe_interval_ms

	@property
	def flap_window_ms(self) -> int:
		return self.settings.flap_window_intervals * self.settings.probe_interval_ms

	def _track(self, service_id: str) -> _Tracked:
		tracked = self._tracked.get(service_id)
		if tracked is None:
			breaker = pybreaker.CircuitBreaker(
				fail_max=self.settings.failure_threshold,
				reset_timeout=_NEVER_S,
				listeners=[self._listener],
				name=service_id,
			)
			tracked = self._tracked[service_id] = _Tracked(service_id, breaker)
		return tracked

	def _refresh(self, tracked: _Tracked, now: int) -> None:
		if tracked.breaker_state is BreakerState.OPEN and tracked.open_until_ms is not None and now >= tracked.open_until_ms:
			tracked.breaker.half_open()
			tracked.trial_taken = False

	def _record(self, tracked: _Tracked, ok: bool) -> None:
		try:
			tracked.breaker.call(_succeed if ok else _fail)
		except (_ProbeFailed, pybreaker.CircuitBreakerError):
			pass

	def _flapping(self, tracked: _Tracked, now: int) -> bool:
		while tracked.history and tracked.history[0][0] <= now - self.flap_window_ms:
			tracked.history.popleft()
		outcomes = [ok for _, ok in tracked.history]
		changes = sum(1 for a, b in zip(outcomes, outcomes[1:]) if a != b)
		return changes >= 2

	# --- probing -----------------------------------------------------------

	def probe(self, service_id: str, now_ms: Optional[int] = None) -> HealthState:
		now = self.clock.now_ms() if now_ms is None else now_ms
		if self.registry.descriptor(service_id) is None:
			raise NotFound(f'{service_id} was never registered')
		endpoint = self.directory.get(service_id)
		try:
			ok = endpoint is not None and bool(endpoint.ping(now))
		except Exception:
			logger.exception('monitor: ping de %s falhou', service_id)
			ok = False
		transition = None
		with self._lock:
			tracked = self._track(service_id)
			self._refresh(tracked, now)
			before = tracked.breaker_state
			tracked.last_probe_ms = now
			tracked.probe_ok = ok
			tracked.history.append((now, ok))
			flapping = self._flapping(tracked, now)
			if ok:
				tracked.consecutive_failures = 0
				if before is not BreakerState.OPEN:
					self._record(tracked, True)
			else:
				tracked.consecutive_failures += 1
				tracked.last_classification = classify(Symptoms(probe_ok=False), flapping)
				if before is not BreakerState.OPEN:
					self._record(tracked, False)
			after = tracked.breaker_state
			if after is BreakerState.OPEN and before is not BreakerState.OPEN:
				tracked.open_until_ms = now + self.cooldown_ms
				if before is BreakerState.CLOSED:
					transition = 'down'
			elif after is BreakerState.CLOSED and before is BreakerState.HALF_OPEN:
				tracked.open_until_ms = None
				transition = 'up'
			tracked.status = self._status(tracked)
			snapshot = tracked.snapshot()
		if transition == 'down':
			logger.warning('monitor: %s fora do ar (%s)', service_id, snapshot.last_classification.value)
			self.on_down(service_id, now)
		elif transition == 'up':
			self.on_up(service_id, now)
		return snapshot

	def _status(self, tracked: _Tracked) -> HealthStatus:
		if tracked.breaker_state is not BreakerState.CLOSED:
			return HealthStatus.DOWN
		if tracked.consecutive_failures or not tracked.probe_ok:
			return HealthStatus.SUSPECT
		return HealthStatus.UP

	def run_cycle(self, now_ms: Optional[int] = None) -> list[HealthState]:
		"""Probe every live atomic instance that has a bound endpoint, in id order."""
		now = self.clock.now_ms() if now_ms is None else now_ms
		targets = [
			entry.descriptor.service_id for entry in self.registry.entries()
			if not entry.descriptor.is_composite and entry.descriptor.service_id in self.directory
		]
		return [self.probe(service_id, now) for service_id in targets]

	# --- request path ------------------------------------------------------

	def admit(self, service_id: str, now_ms: Optional[int] = None) -> bool:
		"""True when a request may go to ``service_id``; consumes the HalfOpen trial."""
		now = self.clock.now_ms() if now_ms is None else now_ms
		with self._lock:
			tracked = self._track(service_id)
			self._refresh(tracked, now)
			state = tracked.breaker_state
			if state is BreakerState.CLOSED:
				return True
			if state is BreakerState.HALF_OPEN and not tracked.trial_taken:
				tracked.trial_taken = True
				return True
			return False

	def routable(self, service_id: str, now_ms: Optional[int] = None) -> bool:
		now = self.clock.now_ms() if now_ms is None else now_ms
		with self._lock:
			tracked = self._tracked.get(service_id)
			if tracked is None:
				return True
			self._refresh(tracked, now)
			state = tracked.breaker_state
			return state is BreakerState.CLOSED or (state is BreakerState.HALF_OPEN and not tracked.trial_taken)

	def record_call(self, service_id: str, symptoms: Optional[Symptoms], now_ms: Optional[int] = None) -> Optional[ErrorKind]:
		"""Feed a request outcome back; ``None`` symptoms means success. Returns the classification."""
		now = self.clock.now_ms() if now_ms is None else now_ms
		transition = None
		with self._lock:
			tracked = self._track(service_id)
			self._refresh(tracked, now)
			before = tracked.breaker_state
			trial = before is BreakerState.HALF_OPEN and tracked.trial_taken
			tracked.trial_taken = False
			if symptoms is None:
				kind = None
				if trial:
					self._record(tracked, True)
					if tracked.breaker_state is BreakerState.CLOSED:
						tracked.consecutive_failures = 0
						tracked.probe_ok = True
						tracked.open_until_ms = None
						transition = 'up'
				elif before is BreakerState.CLOSED and not tracked.consecutive_failures and tracked.probe_ok:
					tracked.status = HealthStatus.UP
			else:
				observed = Symptoms(
					probe_ok=tracked.probe_ok and symptoms.probe_ok,
					request_timed_out=symptoms.request_timed_out,
					connection_refused=symptoms.connection_refused,
					deadline_exceeded=symptoms.deadline_exceeded,
				)
				kind = classify(observed, self._flapping(tracked, now))
				tracked.last_classification = kind
				if trial:
					self._record(tracked, False)
					tracked.open_until_ms = now + self.cooldown_ms
				if tracked.breaker_state is BreakerState.CLOSED:
					tracked.status = HealthStatus.SUSPECT
			if tracked.breaker_state is not BreakerState.CLOSED:
				tracked.status = HealthStatus.DOWN
			elif transition == 'up':
				tracked.status = HealthStatus.UP
		if transition == 'up':
			self.on_up(service_id, now)
		return kind

	def note_fault(self, service_ids: Iterable[str], kind: ErrorKind) -> None:
		"""Attach a classification observed outside probing (e.g. an unauthorised device publish)."""
		with self._lock:
			for service_id in service_ids:
				self._track(service_id).last_classification = kind

	# --- failover ----------------------------------------------------------

	def _down_ids(self) -> set[str]:
		return {sid for sid, t in self._tracked.items() if t.breaker_state is not BreakerState.CLOSED}

	def on_down(self, service_id: str, now_ms: Optional[int] = None) -> FailoverAction:
		now = self.clock.now_ms() if now_ms is None else now_ms
		self.registry.suspend(service_id)
		descriptor = self.registry.descriptor(service_id)
		with self._lock:
			exclude = self._down_ids()
		try:
			replacement = self.registry.resolve_equivalent(service_id, exclude=exclude)
		except NotFound:
			replacement = None
		if replacement is not None:
			action = FailoverAction(REDIRECT_TOPIC, service_id, replacement.service_id)
			logger.info('monitor: %s redirecionado para %s', service_id, replacement.service_id)
		else:
			action = FailoverAction(UNAVAILABLE_TOPIC, service_id)
			logger.warning('monitor: nenhum equivalente para %s', service_id)
		self._announce(action.topic, descriptor.capability.name if descriptor else None, now, {
			'failed': string(service_id),
			'replacement': string(action.replacement_id) if action.replacement_id else null(),
		})
		return action

	def on_up(self, service_id: str, now_ms: Optional[int] = None) -> None:
		now = self.clock.now_ms() if now_ms is None else now_ms
		self.registry.resume(service_id)
		descriptor = self.registry.descriptor(service_id)
		logger.info('monitor: %s de volta', service_id)
		self._announce(RESTORED_TOPIC, descriptor.capability.name if descriptor else None, now, {
			'service_id': string(service_id),
		})

	def _announce(self, topic: str, capability: Optional[str], now: int, fields: dict) -> None:
		if self.bus is None:
			return
		if capability:
			fields = {**fields, 'capability': string(capability)}
		message = CanonicalMessage(
			message_id=self.ids.new('evt'),
			capability=capability or 'monitor.probe',
			timestamp_ms=now,
			body=map_of(fields),
		)
		self.bus.publish(topic, message)

	# --- reads -------------------------------------------------------------

	def state(self, service_id: str) -> HealthState:
		now = self.clock.now_ms()
		with self._lock:
			tracked = self._tracked.get(service_id)
			if tracked is None:
				if self.registry.descriptor(service_id) is None:
					raise NotFound(f'no health state for {service_id}')
				return HealthState(service_id)
			self._refresh(tracked, now)
			return tracked.snapshot()

	def states(self) -> list[HealthState]:
		now = self.clock.now_ms()
		with self._lock:
			for tracked in self._tracked.values():
				self._refresh(tracked, now)
			return [self._tracked[sid].snapshot() for sid in sorted(self._tracked)]
