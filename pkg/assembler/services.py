from __future__ import annotations

import logging
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

from auditor.records import OK, Hop
from codec.services import Codec, default_codec
from core.capabilities import Capability, as_capability
from core.clock import Clock
from core.conf import AssemblerSection
from core.descriptors import Granularity, ServiceDescriptor
from core.errors import (
	ContractViolation,
	ErrorKind,
	FrameworkError,
	NotFound,
	TimingFault,
)
from core.ids import IdFactory
from core.values import CanonicalMessage, validate
from monitor.services import HealthStatus, ServiceMonitor, Symptoms
from registry.endpoints import EndpointDirectory
from registry.services import ServiceRegistry

from .specs import CompositeSpec, ExecutionMode, merge_bodies

logger = logging.getLogger(__name__)

_FAILOVER_KINDS = frozenset({
	ErrorKind.CRASH_FAILURE,
	ErrorKind.OMISSION_FAILURE,
	ErrorKind.TIMING_FAULT,
	ErrorKind.TRANSIENT_FAULT,
})


@dataclass(frozen=True, slots=True)
class Routed:
	reply: CanonicalMessage
	end_ms: int


@dataclass(frozen=True, slots=True)
class ExecutionPlan:
	spec: CompositeSpec
	resolved: tuple[ServiceDescriptor, ...]
	deadline_ms: int

	def __post_init__(self) -> None:
		object.__setattr__(self, 'resolved', tuple(self.resolved))
		if len(self.resolved) != len(self.spec.members):
			raise ContractViolation('plan must resolve every member')


class DemandCounter:
	"""Sliding-window request count for one member-capability signature."""

	def __init__(self, signature: Sequence[str], window_ms: int, threshold: int) -> None:
		self.signature = tuple(signature)
		self.window_ms = window_ms
		self.threshold = threshold
		self._times: deque[int] = deque()
		self._lock = threading.Lock()

	def __repr__(self) -> str:
		return f'<DemandCounter {"+".join(self.signature)} {len(self._times)}/{self.threshold}>'

	def _evict(self, now_ms: int) -> None:
		while self._times and self._times[0] <= now_ms - self.window_ms:
			self._times.popleft()

	def record(self, now_ms: int) -> int:
		with self._lock:
			self._times.append(now_ms)
			self._evict(now_ms)
			return len(self._times)

	def count(self, now_ms: int) -> int:
		with self._lock:
			self._evict(now_ms)
			return len(self._times)

	def promotable(self, now_ms: int) -> bool:
		return self.count(now_ms) >= self.threshold


def composite_service_id(capability: Capability) -> str:
	return f'composite-{capability.name}'


class ServiceAssembler:
	"""Routes single calls and executes composite plans.

	``call`` is the one place a request reaches a provider: it encodes the
	request in the provider's format, invokes the bound endpoint and feeds
	the outcome back to the monitor.
	"""

	def __init__(
		self,
		registry: ServiceRegistry,
		directory: EndpointDirectory,
		monitor: ServiceMonitor,
		codec: Optional[Codec] = None,
		clock: Optional[Clock] = None,
		ids: Optional[IdFactory] = None,
		settings: AssemblerSection = AssemblerSection(),
	) -> None:
		self.registry = registry
		self.directory = directory
		self.monitor = monitor
		self.codec = codec or default_codec
		self.clock = clock or registry.clock
		self.ids = ids or IdFactory()
		self.settings = settings
		self._counters: dict[tuple[str, ...], DemandCounter] = {}
		self._lock = threading.Lock()
		self._pool: Optional[ThreadPoolExecutor] = None

	def close(self) -> None:
		with self._lock:
			pool, self._pool = self._pool, None
		if pool is not None:
			pool.shutdown(wait=True)

	# --- provider selection ------------------------------------------------

	def _ranked(self, capability: Capability, now: int, exclude: Iterable[str] = ()) -> list[ServiceDescriptor]:
		skip = set(exclude)
		candidates = [
			d for d in self.registry.discover(capability)
			if not d.is_composite and d.service_id not in skip and self.monitor.routable(d.service_id, now)
		]

		def rank(descriptor: ServiceDescriptor):
			status = self.monitor.state(descriptor.service_id).status
			return (status is not HealthStatus.UP, descriptor.cost_hint_ms, descriptor.service_id)

		return sorted(candidates, key=rank)

	def _unavailable(self, capability: Capability) -> FrameworkError:
		providers = [d for d in self.registry.discover(capability, include_suspended=True) if not d.is_composite]
		if not providers:
			return NotFound(f'no live provider for {capability}')
		last = self.monitor.state(providers[0].service_id).last_classification
		if last is None or last in (ErrorKind.CONTRACT_VIOLATION, ErrorKind.NOT_FOUND):
			last = ErrorKind.CRASH_FAILURE
		return FrameworkError.from_kind(last, f'every provider of {capability} is down')

	def select(self, capability: 'Capability | str', now_ms: Optional[int] = None, exclude: Iterable[str] = ()) -> ServiceDescriptor:
		"""Best routable provider without taking the HalfOpen trial."""
		capability = as_capability(capability)
		now = self.clock.now_ms() if now_ms is None else now_ms
		ranked = self._ranked(capability, now, exclude)
		if not ranked:
			raise self._unavailable(capability)
		return ranked[0]

	def _acquire(self, capability: Capability, now: int, exclude: Iterable[str] = ()) -> ServiceDescriptor:
		for descriptor in self._ranked(capability, now, exclude):
			if self.monitor.admit(descriptor.service_id, now):
				return descriptor
		raise self._unavailable(capability)

	# --- single hop --------------------------------------------------------

	def call(
		self,
		descriptor: ServiceDescriptor,
		request: CanonicalMessage,
		start_ms: int,
		deadline_ms: int,
		trace: Optional[list[Hop]] = None,
	) -> Routed:
		trace = trace if trace is not None else []
		service_id = descriptor.service_id
		capability = descriptor.capability
		problems = validate(request.body, descriptor.input_schema)
		if problems:
			raise ContractViolation(f'request for {service_id}: {"; ".join(problems)}')
		timeout = deadline_ms - start_ms
		if timeout <= 0:
			raise TimingFault(f'deadline passed before calling {service_id}')
		if request.capability != capability:
			request = replace(request, capability=capability)
		encoded = self.codec.encode(request, descriptor.preferred_format)
		endpoint = self.directory.get(service_id)
		outcome = None
		if endpoint is not None:
			try:
				outcome = endpoint.invoke(encoded, start_ms, timeout)
			except Exception:
				logger.exception('assembler: endpoint de %s falhou', service_id)
		end = min(outcome.end_ms, deadline_ms) if outcome is not None else start_ms
		end = max(end, start_ms)
		symptoms = None
		if outcome is None or outcome.refused:
			symptoms = Symptoms(connection_refused=True)
		elif outcome.late:
			symptoms = Symptoms(deadline_exceeded=True)
		elif outcome.timed_out or outcome.response is None:
			symptoms = Symptoms(request_timed_out=True)
		if symptoms is not None:
			kind = self.monitor.record_call(service_id, symptoms, end)
			trace.append(Hop(service_id, capability.name, start_ms, end, kind.value))
			raise FrameworkError.from_kind(kind, f'{service_id} failed serving {capability}')
		self.monitor.record_call(service_id, None, end)
		try:
			reply = self.codec.decode(outcome.response)
			if reply.correlation_id != request.message_id:
				raise ContractViolation(f'{service_id} replied to {reply.correlation_id}, expected {request.message_id}')
			problems = validate(reply.body, descriptor.output_schema)
			if problems:
				raise ContractViolation(f'reply from {service_id}: {"; ".join(problems)}')
		except ContractViolation:
			trace.append(Hop(service_id, capability.name, start_ms, end, ErrorKind.CONTRACT_VIOLATION.value))
			raise
		trace.append(Hop(service_id, capability.name, start_ms, end, OK))
		return Routed(reply, end)

	def route(
		self,
		capability: 'Capability | str',
		request: CanonicalMessage,
		start_ms: int,
		deadline_ms: int,
		trace: Optional[list[Hop]] = None,
		preferred: Optional[ServiceDescriptor] = None,
	) -> Routed:
		"""Call the best provider; on a provider fault try exactly one equivalent."""
		capability = as_capability(capability)
		trace = trace if trace is not None else []
		if preferred is not None and self.monitor.admit(preferred.service_id, start_ms):
			first = preferred
		else:
			first = self._acquire(capability, start_ms)
		try:
			return self.call(first, request, start_ms, deadline_ms, trace)
		except FrameworkError as exc:
			if exc.kind not in _FAILOVER_KINDS:
				raise
			failed_at = trace[-1].end_ms if trace else start_ms
			if failed_at >= deadline_ms:
				raise
			alternative = self._equivalent(first.service_id, failed_at)
			if alternative is None:
				raise
			logger.info('assembler: failover de %s para %s', first.service_id, alternative.service_id)
			return self.call(alternative, request, failed_at, deadline_ms, trace)

	def _equivalent(self, failed_id: str, now: int) -> Optional[ServiceDescriptor]:
		skip = {failed_id}
		while True:
			try:
				candidate = self.registry.resolve_equivalent(failed_id, exclude=skip)
			except NotFound:
				return None
			if self.monitor.admit(candidate.service_id, now):
				return candidate
			skip.add(candidate.service_id)

	# --- composites --------------------------------------------------------

	def plan(self, spec: CompositeSpec, deadline_ms: int) -> ExecutionPlan:
		now = self.clock.now_ms()
		resolved = [self.select(member, now) for member in spec.members]
		return ExecutionPlan(spec, tuple(resolved), deadline_ms)

	def _member_request(self, request: CanonicalMessage, member: Capability, now: int) -> CanonicalMessage:
		return CanonicalMessage(
			message_id=self.ids.new('msg'),
			capability=member,
			timestamp_ms=now,
			body=request.body,
			correlation_id=request.message_id,
			headers=request.headers,
		)

	def _run_member(self, plan: ExecutionPlan, index: int, request: CanonicalMessage, start: int, trace: list[Hop]) -> Routed:
		member = plan.spec.members[index]
		return self.route(
			member, self._member_request(request, member, start), start, plan.deadline_ms, trace, plan.resolved[index],
		)

	def execute(self, plan: ExecutionPlan, request: CanonicalMessage, start_ms: Optional[int] = None, trace: Optional[list[Hop]] = None) -> Routed:
		"""Run every member, merge the replies and answer ``request``.

		Parallel members all start at ``start_ms`` so the total is the slowest
		member; Chained members start when the previous one ends.
		"""
		start = self.clock.now_ms() if start_ms is None else start_ms
		trace = trace if trace is not None else []
		traces: list[list[Hop]] = [[] for _ in plan.spec.members]
		results: list[Optional[Routed]] = [None] * len(plan.spec.members)
		errors: list[Optional[FrameworkError]] = [None] * len(plan.spec.members)

		def run(index: int, at: int) -> None:
			try:
				results[index] = self._run_member(plan, index, request, at, traces[index])
			except FrameworkError as exc:
				errors[index] = exc

		try:
			if plan.spec.mode is ExecutionMode.PARALLEL:
				if self.clock.is_virtual or len(plan.spec.members) == 1:
					for index in range(len(plan.spec.members)):
						run(index, start)
				else:
					pool = self._executor()
					for future in [pool.submit(run, index, start) for index in range(len(plan.spec.members))]:
						future.result()
			else:
				at = start
				for index in range(len(plan.spec.members)):
					if not self.clock.is_virtual:
						at = max(at, self.clock.now_ms())
					run(index, at)
					if errors[index] is not None:
						break
					at = results[index].end_ms
		finally:
			for member_trace in traces:
				trace.extend(member_trace)
		for error in errors:
			if error is not None:
				raise error
		end = max(routed.end_ms for routed in results)
		if end > plan.deadline_ms:
			raise TimingFault(f'{plan.spec.capability} finished after its deadline')
		body = merge_bodies(plan.spec.merge_map, [routed.reply.body for routed in results])
		problems = validate(body, plan.spec.output_schema)
		if problems:
			raise ContractViolation(f'composite {plan.spec.capability}: {"; ".join(problems)}')
		reply = request.reply(self.ids.new('msg'), body, end)
		return Routed(reply, end)

	def _executor(self) -> ThreadPoolExecutor:
		with self._lock:
			if self._pool is None:
				self._pool = ThreadPoolExecutor(max_workers=self.settings.max_workers, thread_name_prefix='assembler')
			return self._pool

	# --- promotion ---------------------------------------------------------

	def record_demand(self, signature: Sequence[str], now_ms: Optional[int] = None) -> DemandCounter:
		now = self.clock.now_ms() if now_ms is None else now_ms
		key = tuple(sorted(set(signature)))
		with self._lock:
			counter = self._counters.get(key)
			if counter is None:
				counter = self._counters[key] = DemandCounter(
					key, self.settings.promotion_window_ms, self.settings.promotion_threshold,
				)
		counter.record(now)
		return counter

	def counter(self, signature: Sequence[str]) -> Optional[DemandCounter]:
		with self._lock:
			return self._counters.get(tuple(sorted(set(signature))))

	def maybe_promote(self, counter: DemandCounter, spec: CompositeSpec, now_ms: Optional[int] = None) -> Optional[ServiceDescriptor]:
		"""Advertise ``spec`` as a Composite service once its demand crosses the threshold."""
		now = self.clock.now_ms() if now_ms is None else now_ms
		service_id = composite_service_id(spec.capability)
		with self._lock:
			if self.registry.is_live(service_id):
				self.registry.renew(service_id)
				return None
			if not counter.promotable(now):
				return None
			self.registry.register_composite(spec)
			descriptor = ServiceDescriptor(
				service_id=service_id,
				capability=spec.capability,
				output_schema=spec.output_schema,
				granularity=Granularity.COMPOSITE,
				cost_hint_ms=self._cost_of(spec),
				lease_ttl_ms=self.settings.promotion_window_ms,
			)
			self.registry.register(descriptor)
		logger.info('assembler: %s promovido a servico composto (%s pedidos)', spec.capability, counter.count(now))
		return descriptor

	def _cost_of(self, spec: CompositeSpec) -> int:
		costs = []
		for member in spec.members:
			providers = [d for d in self.registry.discover(member) if not d.is_composite]
			costs.append(providers[0].cost_hint_ms if providers else 0)
		return max(costs) if spec.mode is ExecutionMode.PARALLEL else sum(costs)
