from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Optional

from assembler.specs import CompositeSpec
from core.capabilities import Capability, as_capability
from core.clock import Clock
from core.descriptors import ServiceDescriptor
from core.errors import ContractViolation, FrameworkError, NotFound
from core.values import schema_satisfies

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class Lease:
	service_id: str
	expires_at_ms: int
	epoch: int

	def is_live(self, now_ms: int) -> bool:
		return now_ms < self.expires_at_ms

	def as_dict(self) -> dict:
		return {'service_id': self.service_id, 'expires_at_ms': self.expires_at_ms, 'epoch': self.epoch}

	@classmethod
	def from_dict(cls, data: Any) -> 'Lease':
		try:
			lease = cls(str(data['service_id']), int(data['expires_at_ms']), int(data['epoch']))
		except (KeyError, TypeError, ValueError):
			raise ContractViolation('invalid lease') from None
		if lease.epoch < 1:
			raise ContractViolation('lease epoch must be positive')
		return lease


@dataclass(frozen=True, slots=True)
class RegistryEntry:
	descriptor: ServiceDescriptor
	lease: Lease
	suspended: bool = False

	def as_dict(self) -> dict:
		return {'descriptor': self.descriptor.as_dict(), 'lease': self.lease.as_dict(), 'suspended': self.suspended}


@dataclass(frozen=True, slots=True)
class RegistrySnapshot:
	entries: tuple[RegistryEntry, ...] = ()
	composites: tuple[CompositeSpec, ...] = ()

	def as_dict(self) -> dict:
		return {
			'entries': [entry.as_dict() for entry in self.entries],
			'composites': [spec.as_dict() for spec in self.composites],
		}

	def to_json(self) -> str:
		return json.dumps(self.as_dict(), sort_keys=True, ensure_ascii=False, separators=(',', ':'))

	@classmethod
	def from_json(cls, text: str | bytes) -> 'RegistrySnapshot':
		try:
			return cls._parse(json.loads(text))
		except FrameworkError:
			raise
		except (ValueError, TypeError, AttributeError, UnicodeDecodeError):
			raise ContractViolation('corrupt registry snapshot') from None

	@classmethod
	def _parse(cls, data: Any) -> 'RegistrySnapshot':
		if not isinstance(data, dict) or set(data) != {'entries', 'composites'}:
			raise ContractViolation('registry snapshot needs exactly "entries" and "composites"')
		if not isinstance(data['entries'], list) or not isinstance(data['composites'], list):
			raise ContractViolation('registry snapshot lists are malformed')
		entries = []
		for raw in data['entries']:
			if not isinstance(raw, dict) or 'descriptor' not in raw or 'lease' not in raw:
				raise ContractViolation('registry snapshot entry is malformed')
			descriptor = ServiceDescriptor.from_dict(raw['descriptor'])
			lease = Lease.from_dict(raw['lease'])
			if lease.service_id != descriptor.service_id:
				raise ContractViolation('lease does not belong to its descriptor')
			entries.append(RegistryEntry(descriptor, lease, bool(raw.get('suspended', False))))
		ids = [entry.descriptor.service_id for entry in entries]
		if len(ids) != len(set(ids)):
			raise ContractViolation('duplicate service_id in registry snapshot')
		composites = tuple(CompositeSpec.from_dict(raw) for raw in data['composites'])
		return cls(tuple(sorted(entries, key=lambda e: e.descriptor.service_id)), composites)


class ServiceRegistry:
	"""Capability-indexed registry of leased service descriptors.

	All reads filter expired leases against the injected clock, so an
	expired descriptor is never returned even before ``reap`` runs.
	"""

	def __init__(self, clock: Clock) -> None:
		self.clock = clock
		self._lock = threading.RLock()
		self._entries: dict[str, RegistryEntry] = {}
		self._epochs: dict[str, int] = {}
		self._known: dict[str, ServiceDescriptor] = {}
		self._composites: dict[Capability, CompositeSpec] = {}

	# --- lifecycle ---------------------------------------------------------

	def register(self, descriptor: ServiceDescriptor) -> Lease:
		now = self.clock.now_ms()
		with self._lock:
			current = self._entries.get(descriptor.service_id)
			if current is not None and current.lease.is_live(now):
				raise ContractViolation(f'service {descriptor.service_id} is already registered')
			if descriptor.is_composite and descriptor.capability not in self._composites:
				raise ContractViolation(f'composite {descriptor.capability} has no registered spec')
			epoch = self._epochs.get(descriptor.service_id, 0) + 1
			lease = Lease(descriptor.service_id, now + descriptor.lease_ttl_ms, epoch)
			self._epochs[descriptor.service_id] = epoch
			self._entries[descriptor.service_id] = RegistryEntry(descriptor, lease)
			self._known[descriptor.service_id] = descriptor
		logger.info('registry: %s registrado (%s, epoch %s)', descriptor.service_id, descriptor.capability, epoch)
		return lease

	def renew(self, lease: 'Lease | str') -> Lease:
		now = self.clock.now_ms()
		service_id = lease.service_id if isinstance(lease, Lease) else lease
		with self._lock:
			entry = self._entries.get(service_id)
			if entry is None or not entry.lease.is_live(now):
				raise NotFound(f'no live lease for {service_id}')
			if isinstance(lease, Lease) and lease.epoch != entry.lease.epoch:
				raise NotFound(f'lease epoch {lease.epoch} of {service_id} is stale')
			renewed = replace(entry.lease, expires_at_ms=now + entry.descriptor.lease_ttl_ms)
			self._entries[service_id] = replace(entry, lease=renewed)
			return renewed

	def deregister(self, service_id: str) -> None:
		with self._lock:
			removed = self._entries.pop(service_id, None)
		if removed is not None:
			logger.info('registry: %s removido', service_id)

	def suspend(self, service_id: str) -> bool:
		return self._set_suspended(service_id, True)

	def resume(self, service_id: str) -> bool:
		return self._set_suspended(service_id, False)

	def _set_suspended(self, service_id: str, value: bool) -> bool:
		with self._lock:
			entry = self._entries.get(service_id)
			if entry is None:
				return False
			if entry.suspended != value:
				self._entries[service_id] = replace(entry, suspended=value)
			return True

	def reap(self, now_ms: Optional[int] = None) -> list[str]:
		now = self.clock.now_ms() if now_ms is None else now_ms
		with self._lock:
			expired = sorted(sid for sid, entry in self._entries.items() if not entry.lease.is_live(now))
			for service_id in expired:
				del self._entries[service_id]
		if expired:
			logger.info('registry: %s lease(s) expirado(s) removido(s)', len(expired))
		return expired

	# --- queries -----------------------------------------------------------

	def _live(self, include_suspended: bool = False) -> list[RegistryEntry]:
		now = self.clock.now_ms()
		return [
			entry for entry in self._entries.values()
			if entry.lease.is_live(now) and (include_suspended or not entry.suspended)
		]

	def discover(
		self,
		capability: 'Capability | str',
		domain: Optional[str] = None,
		expose_nonfunctional: bool = False,
		include_suspended: bool = False,
	) -> list[ServiceDescriptor]:
		capability = as_capability(capability)
		with self._lock:
			found = [
				entry.descriptor for entry in self._live(include_suspended)
				if entry.descriptor.capability == capability
				and (domain is None or entry.descriptor.domain == domain)
				and (expose_nonfunctional or entry.descriptor.is_functional)
			]
		return sorted(found, key=lambda d: (d.cost_hint_ms, d.service_id))

	def resolve_equivalent(self, failed_service_id: str, exclude: Iterable[str] = ()) -> ServiceDescriptor:
		skip = set(exclude) | {failed_service_id}
		with self._lock:
			failed = self._known.get(failed_service_id)
			if failed is None:
				raise NotFound(f'{failed_service_id} was never registered')
			candidates = [
				entry.descriptor for entry in self._live()
				if entry.descriptor.capability == failed.capability
				and entry.descriptor.service_id not in skip
				and entry.descriptor.service_class is failed.service_class
				and schema_satisfies(entry.descriptor.output_schema, failed.output_schema)
			]
		if not candidates:
			raise NotFound(f'no equivalent for {failed_service_id} ({failed.capability})')
		return min(candidates, key=lambda d: (d.cost_hint_ms, d.service_id))

	def descriptor(self, service_id: str) -> Optional[ServiceDescriptor]:
		"""Last descriptor ever registered under ``service_id``, live or not."""
		with self._lock:
			return self._known.get(service_id)

	def is_live(self, service_id: str) -> bool:
		with self._lock:
			entry = self._entries.get(service_id)
			return entry is not None and entry.lease.is_live(self.clock.now_ms())

	def entry(self, service_id: str) -> Optional[RegistryEntry]:
		with self._lock:
			return self._entries.get(service_id)

	def entries(self, include_expired: bool = False) -> list[RegistryEntry]:
		now = self.clock.now_ms()
		with self._lock:
			found = [e for e in self._entries.values() if include_expired or e.lease.is_live(now)]
		return sorted(found, key=lambda e: e.descriptor.service_id)

	# --- composites --------------------------------------------------------

	def register_composite(self, spec: CompositeSpec) -> None:
		with self._lock:
			self._composites[spec.capability] = spec
		logger.info('registry: composicao %s registrada (%s)', spec.capability, ', '.join(spec.signature))

	def composite(self, capability: 'Capability | str') -> Optional[CompositeSpec]:
		with self._lock:
			return self._composites.get(as_capability(capability))

	def composites(self) -> list[CompositeSpec]:
		with self._lock:
			return sorted(self._composites.values(), key=lambda spec: spec.capability.name)

	# --- persistence -------------------------------------------------------

	def snapshot(self) -> RegistrySnapshot:
		with self._lock:
			return RegistrySnapshot(tuple(self.entries(include_expired=True)), tuple(self.composites()))

	def restore(self, snapshot: RegistrySnapshot) -> None:
		with self._lock:
			self._entries = {e.descriptor.service_id: e for e in snapshot.entries}
			self._epochs = {e.descriptor.service_id: e.lease.epoch for e in snapshot.entries}
			self._known = {e.descriptor.service_id: e.descriptor for e in snapshot.entries}
			self._composites = {spec.capability: spec for spec in snapshot.composites}
		logger.info('registry: snapshot restaurado (%s entradas)', len(snapshot.entries))

	def save(self, path: 'str | Path') -> Path:
		"""Write the snapshot next to ``path`` and rename it into place."""
		path = Path(path)
		path.parent.mkdir(parents=True, exist_ok=True)
		payload = self.snapshot().to_json()
		fd, tmp_name = tempfile.mkstemp(prefix=f'.{path.name}.', dir=path.parent)
		try:
			with os.fdopen(fd, 'w', encoding='utf-8') as handle:
				handle.write(payload)
				handle.flush()
				os.fsync(handle.fileno())
			os.replace(tmp_name, path)
		except BaseException:
			Path(tmp_name).unlink(missing_ok=True)
			raise
		return path

	def load(self, path: 'str | Path') -> None:
		try:
			text = Path(path).read_bytes()
		except OSError as exc:
			raise ContractViolation(f'cannot read registry snapshot: {exc.strerror or exc}') from None
		try:
			self.restore(RegistrySnapshot.from_json(text))
		except FrameworkError:
			raise
		except (TypeError, ValueError, KeyError, AttributeError) as exc:
			raise ContractViolation(f'corrupt registry snapshot: {exc}') from None
