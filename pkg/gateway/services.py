from __future__ import annotations

import hmac
import logging
import threading
from dataclasses import dataclass
from typing import Mapping, Optional

from assembler.services import Routed, ServiceAssembler
from assembler.specs import CompositeSpec, SplitMapping
from auditor.records import OK, AuditRecord, Hop
from auditor.services import AuditLog
from bus.services import EventBus, check_topic
from codec.services import Codec, EncodedMessage, default_codec
from core.capabilities import Capability, as_capability
from core.clock import Clock
from core.conf import GatewaySection
from core.descriptors import ServiceClass, ServiceDescriptor, WireFormat
from core.errors import (
	ContractViolation,
	ErrorKind,
	FrameworkError,
	NotFound,
	TimingFault,
	UnauthorisedAccess,
)
from core.ids import IdFactory
from core.values import CanonicalMessage
from monitor.services import ServiceMonitor
from registry.services import ServiceRegistry

logger = logging.getLogger(__name__)

BUILTIN_TTL_MS = 24 * 60 * 60 * 1000
BUILTIN_SERVICES = (
	('gateway.audit', 'audit.append'),
	('gateway.monitor', 'monitor.probe'),
)
BUS_HOP = 'bus'


@dataclass(frozen=True, slots=True)
class ConsumerContract:
	capability: Capability
	auth_token: str = ''
	accepted_format: WireFormat = WireFormat.JSON
	deadline_ms: int = 1000
	consumer_id: str = ''

	def __post_init__(self) -> None:
		object.__setattr__(self, 'capability', as_capability(self.capability))
		object.__setattr__(self, 'accepted_format', WireFormat.parse(self.accepted_format))
		if isinstance(self.deadline_ms, bool) or not isinstance(self.deadline_ms, int) or self.deadline_ms <= 0:
			raise ContractViolation('deadline_ms must be a positive integer')


class TokenTable:
	"""Static token -> consumer id table."""

	def __init__(self, tokens: Optional[Mapping[str, str]] = None) -> None:
		self._tokens = tuple((token.encode('utf-8'), consumer) for token, consumer in (tokens or {}).items())

	def __len__(self) -> int:
		return len(self._tokens)

	def authenticate(self, token: Optional[str]) -> str:
		if not token:
			raise UnauthorisedAccess('missing token')
		offered = token.encode('utf-8')
		found = None
		# every entry is compared so timing does not reveal the position
		for known, consumer in self._tokens:
			if hmac.compare_digest(offered, known) and found is None:
				found = consumer
		if found is None:
			raise UnauthorisedAccess('unknown token')
		return found


@dataclass(frozen=True, slots=True)
class Served:
	"""Result of one consumer request, successful or not."""

	transaction_id: str
	capability: str
	start_ms: int
	end_ms: int
	reply: Optional[CanonicalMessage] = None
	response: Optional[EncodedMessage] = None
	error: Optional[FrameworkError] = None
	path: str = ''

	@property
	def ok(self) -> bool:
		return self.error is None

	@property
	def latency_ms(self) -> int:
		return self.end_ms - self.start_ms

	@property
	def outcome(self) -> str:
		return OK if self.error is None else self.error.kind.value


class Gateway:
	"""Consumer entry point.

	Resolves a capability in this order: split mapping, live provider
	(atomic or promoted composite), registered composite spec. Every
	transaction leaves exactly one audit record.
	"""

	def __init__(
		self,
		registry: ServiceRegistry,
		assembler: ServiceAssembler,
		monitor: ServiceMonitor,
		auditor: AuditLog,
		bus: Optional[EventBus] = None,
		tokens: 'TokenTable | Mapping[str, str] | None' = None,
		codec: Optional[Codec] = None,
		clock: Optional[Clock] = None,
		ids: Optional[IdFactory] = None,
		settings: GatewaySection = GatewaySection(),
	) -> None:
		self.registry = registry
		self.assembler = assembler
		self.monitor = monitor
		self.auditor = auditor
		self.bus = bus
		self.tokens = tokens if isinstance(tokens, TokenTable) else TokenTable(tokens)
		self.codec = codec or default_codec
		self.clock = clock or registry.clock
		self.ids = ids or IdFactory()
		self.settings = settings
		self._splits: dict[Capability, SplitMapping] = {}
		self._latest: dict[str, CanonicalMessage] = {}
		self._lock = threading.Lock()

	# --- tables ------------------------------------------------------------

	def authenticate(self, token: Optional[str]) -> str:
		return self.tokens.authenticate(token)

	def register_split(self, mapping: SplitMapping) -> None:
		if mapping.coarse in mapping.fines:
			raise ContractViolation(f'split of {mapping.coarse} refers to itself')
		with self._lock:
			splits = dict(self._splits)
			splits[mapping.coarse] = mapping
			self._splits = splits
		logger.info('gateway: split %s -> %s', mapping.coarse, ', '.join(f.name for f in mapping.fines))

	def remove_split(self, capability: 'Capability | str') -> bool:
		capability = as_capability(capability)
		with self._lock:
			if capability not in self._splits:
				return False
			splits = dict(self._splits)
			del splits[capability]
			self._splits = splits
		return True

	def split(self, capability: 'Capability | str') -> Optional[SplitMapping]:
		return self._splits.get(as_capability(capability))

	def splits(self) -> list[SplitMapping]:
		current = self._splits
		return [current[key] for key in sorted(current, key=lambda c: c.name)]

	def ensure_builtin_services(self) -> None:
		"""Register or renew the gateway's own NonFunctional services."""
		for service_id, capability in BUILTIN_SERVICES:
			if self.registry.is_live(service_id):
				self.registry.renew(service_id)
				continue
			self.registry.register(ServiceDescriptor(
				service_id=service_id,
				capability=capability,
				service_class=ServiceClass.NON_FUNCTIONAL,
				lease_ttl_ms=BUILTIN_TTL_MS,
			))

	# --- requests ----------------------------------------------------------

	def handle_request(self, contract: ConsumerContract, payload: EncodedMessage) -> EncodedMessage:
		served = self.serve(contract, payload)
		if served.error is not None:
			raise served.error
		return served.response

	def serve(self, contract: ConsumerContract, payload: EncodedMessage, start_ms: Optional[int] = None) -> Served:
		start = self.clock.now_ms() if start_ms is None else start_ms
		deadline = start + contract.deadline_ms
		transaction_id = self.ids.new('txn')
		trace: list[Hop] = []
		consumer = contract.consumer_id
		request = None
		path = ''
		try:
			consumer = self.authenticate(contract.auth_token)
			request = self.codec.decode(payload)
			if request.capability != contract.capability:
				raise ContractViolation(f'payload is for {request.capability}, contract names {contract.capability}')
			path, routed = self._dispatch(contract.capability, request, start, deadline, trace)
			if routed.end_ms > deadline:
				raise TimingFault(f'{contract.capability} answered after {contract.deadline_ms} ms')
			response = self.codec.encode(routed.reply, contract.accepted_format)
		except FrameworkError as exc:
			exc.with_transaction(transaction_id)
			end = self._failed_at(exc, trace, start, deadline)
			self._audit(transaction_id, contract.capability.name, start, end, exc.kind.value, request, consumer, trace)
			logger.info('gateway: %s %s falhou com %s', transaction_id, contract.capability, exc.kind.value)
			return Served(transaction_id, contract.capability.name, start, end, error=exc, path=path)
		self._audit(transaction_id, contract.capability.name, start, routed.end_ms, OK, request, consumer, trace)
		return Served(
			transaction_id, contract.capability.name, start, routed.end_ms,
			reply=routed.reply, response=response, path=path,
		)

	def _dispatch(
		self,
		capability: Capability,
		request: CanonicalMessage,
		start: int,
		deadline: int,
		trace: list[Hop],
	) -> tuple[str, Routed]:
		mapping = self._splits.get(capability)
		if mapping is not None:
			return 'split', self._fan_out(mapping.as_composite(), request, start, deadline, trace)
		providers = self.registry.discover(capability, include_suspended=True)
		if any(not d.is_composite for d in providers):
			return 'direct', self.assembler.route(capability, request, start, deadline, trace)
		spec = self.registry.composite(capability)
		if spec is not None:
			return 'composite', self._fan_out(spec, request, start, deadline, trace)
		raise NotFound(f'no provider or mapping for {capability}')

	def _fan_out(self, spec: CompositeSpec, request: CanonicalMessage, start: int, deadline: int, trace: list[Hop]) -> Routed:
		counter = self.assembler.record_demand(spec.signature, start)
		routed = self.assembler.execute(self.assembler.plan(spec, deadline), request, start, trace)
		self.assembler.maybe_promote(counter, spec, start)
		return routed

	def _failed_at(self, exc: FrameworkError, trace: list[Hop], start: int, deadline: int) -> int:
		end = max([hop.end_ms for hop in trace], default=start)
		if not self.clock.is_virtual:
			end = max(end, self.clock.now_ms())
		elif exc.kind is ErrorKind.TIMING_FAULT:
			end = max(end, deadline)
		return end

	def _audit(
		self,
		transaction_id: str,
		capability: str,
		start: int,
		end: int,
		outcome: str,
		request: Optional[CanonicalMessage],
		consumer: str,
		trace: list[Hop],
		kind: str = 'request',
	) -> None:
		record = AuditRecord(
			transaction_id=transaction_id,
			capability=capability,
			start_ms=start,
			total_ms=max(0, end - start),
			final_outcome=outcome,
			correlation_id=request.message_id if request is not None else None,
			consumer_id=consumer,
			hops=tuple(trace),
			kind=kind,
		)
		try:
			self.auditor.append(record)
		except Exception:
			logger.exception('gateway: registro de auditoria %s perdido', transaction_id)

	# --- upstream ----------------------------------------------------------

	def publish_upstream(self, token: Optional[str], topic: str, message: CanonicalMessage, require_token: bool = True) -> str:
		"""Publish a device event on the bus.

		A token, when given, must be valid; it may be omitted only when
		``require_token`` is False.
		"""
		now = self.clock.now_ms()
		transaction_id = self.ids.new('txn')
		device_id = message.header('x-device-id') or ''
		try:
			publisher = self.authenticate(token) if token or require_token else ''
			check_topic(topic)
			if self.bus is None:
				raise NotFound('no event bus attached')
			delivery_id = self.bus.publish(topic, message)
		except FrameworkError as exc:
			exc.with_transaction(transaction_id)
			if exc.kind is ErrorKind.UNAUTHORISED_ACCESS and device_id:
				self.monitor.note_fault(self._services_of(device_id), ErrorKind.UNAUTHORISED_ACCESS)
			self._audit(transaction_id, topic, now, now, exc.kind.value, message, device_id, [], kind='publish')
			logger.warning('gateway: publicacao em %s recusada (%s)', topic, exc.kind.value)
			raise
		with self._lock:
			self._latest[topic] = message
		hop = Hop(BUS_HOP, topic, now, now, OK)
		self._audit(transaction_id, topic, now, now, OK, message, device_id or publisher, [hop], kind='publish')
		return delivery_id

	def _services_of(self, device_id: str) -> list[str]:
		return sorted(
			entry.descriptor.service_id
			for entry in self.registry.entries(include_expired=True)
			if entry.descriptor.device_id == device_id
		)

	def latest(self, topic: str) -> CanonicalMessage:
		with self._lock:
			message = self._latest.get(topic)
		if message is None:
			raise NotFound(f'no event published on {topic}')
		return message

	def topics(self) -> list[str]:
		with self._lock:
			return sorted(self._latest)
