import random
import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from assembler.specs import CompositeSpec, MergeRule
from core.clock import VirtualClock
from core.descriptors import Granularity, ServiceClass, ServiceDescriptor
from core.errors import ContractViolation, NotFound
from core.values import Schema

from .endpoints import CallOutcome, EndpointDirectory
from .services import Lease, RegistrySnapshot, ServiceRegistry

TEMP = 'weather.temperature.read'
TEMP_SCHEMA = Schema.from_list([['c', 'int']])


def _descriptor(service_id, capability=TEMP, **kwargs):
	kwargs.setdefault('output_schema', TEMP_SCHEMA)
	return ServiceDescriptor(service_id=service_id, capability=capability, **kwargs)


class RegistryTestCase(SimpleTestCase):
	def setUp(self):
		self.clock = VirtualClock()
		self.registry = ServiceRegistry(self.clock)


class RegisterTests(RegistryTestCase):
	def test_register_returns_lease(self):
		lease = self.registry.register(_descriptor('y', lease_ttl_ms=5000))
		self.assertEqual(lease, Lease('y', 5000, 1))
		self.assertEqual([d.service_id for d in self.registry.discover(TEMP)], ['y'])

	def test_duplicate_live_registration_rejected(self):
		self.registry.register(_descriptor('y'))
		with self.assertRaises(ContractViolation):
			self.registry.register(_descriptor('y'))

	def test_nonfunctional_hidden_by_default(self):
		self.registry.register(_descriptor('aud', 'audit.append', service_class=ServiceClass.NON_FUNCTIONAL))
		self.assertEqual(self.registry.discover('audit.append'), [])
		self.assertEqual(len(self.registry.discover('audit.append', expose_nonfunctional=True)), 1)

	def test_composite_descriptor_needs_spec(self):
		with self.assertRaises(ContractViolation):
			self.registry.register(_descriptor('x', 'weather.report', granularity=Granularity.COMPOSITE))


class LeaseTests(RegistryTestCase):
	def test_renew_extends_expiry(self):
		lease = self.registry.register(_descriptor('y', lease_ttl_ms=1000))
		self.clock.advance(500)
		renewed = self.registry.renew(lease)
		self.assertGreater(renewed.expires_at_ms, lease.expires_at_ms)
		self.assertEqual(renewed.epoch, lease.epoch)

	def test_renew_after_expiry_not_found(self):
		lease = self.registry.register(_descriptor('y', lease_ttl_ms=1000))
		self.clock.advance(1000)
		with self.assertRaises(NotFound):
			self.registry.renew(lease)

	def test_epoch_increments_once_on_reregistration(self):
		lease = self.registry.register(_descriptor('y', lease_ttl_ms=1000))
		lease = self.registry.renew(lease)
		self.clock.advance(2000)
		with self.assertRaises(NotFound):
			self.registry.renew(lease)
		fresh = self.registry.register(_descriptor('y', lease_ttl_ms=1000))
		self.assertEqual(fresh.epoch, lease.epoch + 1)
		self.assertEqual(self.registry.renew(fresh).epoch, fresh.epoch)
		with self.assertRaises(NotFound):
			self.registry.renew(lease)

	def test_expired_lease_not_discovered(self):
		self.registry.register(_descriptor('y', lease_ttl_ms=1000))
		self.clock.advance(999)
		self.assertEqual(len(self.registry.discover(TEMP)), 1)
		self.clock.advance(1)
		self.assertEqual(self.registry.discover(TEMP), [])

	def test_reap_drops_expired(self):
		self.registry.register(_descriptor('a', lease_ttl_ms=10))
		self.registry.register(_descriptor('b', lease_ttl_ms=100))
		self.clock.advance(50)
		self.assertEqual(self.registry.reap(), ['a'])
		self.assertEqual([e.descriptor.service_id for e in self.registry.entries(include_expired=True)], ['b'])


class DiscoverTests(RegistryTestCase):
	def test_cheaper_first_then_service_id(self):
		self.registry.register(_descriptor('b', cost_hint_ms=200))
		self.registry.register(_descriptor('c', cost_hint_ms=50))
		self.registry.register(_descriptor('a', cost_hint_ms=200))
		self.assertEqual([d.service_id for d in self.registry.discover(TEMP)], ['c', 'a', 'b'])

	def test_domain_filter(self):
		self.registry.register(_descriptor('home', domain='smart-home'))
		self.registry.register(_descriptor('city', domain='smart-city'))
		found = self.registry.discover(TEMP, domain='smart-city')
		self.assertEqual([d.service_id for d in found], ['city'])

	def test_deregister_is_idempotent(self):
		self.registry.register(_descriptor('y'))
		self.registry.deregister('y')
		self.registry.deregister('y')
		self.assertEqual(self.registry.discover(TEMP), [])

	def test_suspended_hidden(self):
		self.registry.register(_descriptor('y'))
		self.registry.suspend('y')
		self.assertEqual(self.registry.discover(TEMP), [])
		self.assertEqual(len(self.registry.discover(TEMP, include_suspended=True)), 1)
		self.registry.resume('y')
		self.assertEqual(len(self.registry.discover(TEMP)), 1)


class ResolveEquivalentTests(RegistryTestCase):
	def test_y_down_z_offers_same_capability(self):
		self.registry.register(_descriptor('y'))
		self.registry.register(_descriptor('z', cost_hint_ms=10))
		self.assertEqual(self.registry.resolve_equivalent('y').service_id, 'z')

	def test_sole_provider(self):
		self.registry.register(_descriptor('y'))
		with self.assertRaises(NotFound):
			self.registry.resolve_equivalent('y')

	def test_incompatible_output_schema(self):
		self.registry.register(_descriptor('y'))
		self.registry.register(_descriptor('z', output_schema=Schema.from_list([['c', 'str']])))
		with self.assertRaises(NotFound):
			self.registry.resolve_equivalent('y')

	def test_schema_compatibility_matrix(self):
		cases = [
			([['c', 'int']], True),
			([['c', 'int'], ['unit', 'str']], True),
			([['c', 'float']], False),
			([['unit', 'str']], False),
			([], False),
		]
		for fields, compatible in cases:
			registry = ServiceRegistry(VirtualClock())
			registry.register(_descriptor('y'))
			registry.register(_descriptor('z', output_schema=Schema.from_list(fields)))
			if compatible:
				self.assertEqual(registry.resolve_equivalent('y').service_id, 'z')
			else:
				with self.assertRaises(NotFound):
					registry.resolve_equivalent('y')

	def test_deregistered_sibling_resolution(self):
		self.registry.register(_descriptor('y'))
		self.registry.register(_descriptor('z'))
		self.registry.deregister('y')
		self.assertEqual(self.registry.resolve_equivalent('y').service_id, 'z')

	def test_exclude_skips_down_equivalent(self):
		for sid in ('y', 'z1', 'z2'):
			self.registry.register(_descriptor(sid))
		self.assertEqual(self.registry.resolve_equivalent('y', exclude={'z1'}).service_id, 'z2')

	def test_never_returns_itself(self):
		self.registry.register(_descriptor('y'))
		self.registry.register(_descriptor('z'))
		resolved = self.registry.resolve_equivalent('z')
		self.assertNotEqual(resolved.service_id, 'z')
		self.assertEqual(resolved.capability.name, TEMP)

	def test_unknown_service(self):
		with self.assertRaises(NotFound):
			self.registry.resolve_equivalent('ghost')


class SnapshotTests(RegistryTestCase):
	def _queries(self, registry):
		capabilities = ['weather.temperature.read', 'weather.humidity.read', 'home.light.set']
		result = []
		for cap in capabilities:
			for domain in (None, 'smart-home', 'smart-city'):
				result.append([d.as_dict() for d in registry.discover(cap, domain=domain, expose_nonfunctional=True)])
		return result

	def test_empty_round_trip(self):
		snapshot = self.registry.snapshot()
		self.assertEqual(snapshot.entries, ())
		restored = ServiceRegistry(self.clock)
		restored.restore(RegistrySnapshot.from_json(snapshot.to_json()))
		self.assertEqual(restored.entries(), [])

	def test_random_round_trip(self):
		rng = random.Random(3)
		capabilities = ['weather.temperature.read', 'weather.humidity.read', 'home.light.set']
		for index in range(60):
			self.registry.register(_descriptor(
				f'svc-{index:03d}',
				rng.choice(capabilities),
				domain=rng.choice(['smart-home', 'smart-city', '']),
				cost_hint_ms=rng.randint(0, 300),
				service_class=rng.choice(list(ServiceClass)),
				lease_ttl_ms=rng.randint(1000, 60000),
			))
		self.registry.register_composite(CompositeSpec(
			'weather.report', [TEMP, 'weather.humidity.read'], [MergeRule(0, 'c', 'temperature')],
		))
		self.clock.advance(5000)
		text = self.registry.snapshot().to_json()
		restored = ServiceRegistry(self.clock)
		restored.restore(RegistrySnapshot.from_json(text))
		self.assertEqual(self._queries(restored), self._queries(self.registry))
		self.assertEqual(restored.snapshot().to_json(), text)

	def test_file_round_trip_is_atomic_and_sorted(self):
		self.registry.register(_descriptor('b'))
		self.registry.register(_descriptor('a'))
		with tempfile.TemporaryDirectory() as tmp:
			path = self.registry.save(Path(tmp) / 'registry.json')
			self.assertEqual([p.name for p in Path(tmp).iterdir()], ['registry.json'])
			restored = ServiceRegistry(self.clock)
			restored.load(path)
		self.assertEqual([e.descriptor.service_id for e in restored.entries()], ['a', 'b'])

	def test_truncated_snapshot(self):
		self.registry.register(_descriptor('y'))
		text = self.registry.snapshot().to_json()
		with tempfile.TemporaryDirectory() as tmp:
			path = Path(tmp) / 'registry.json'
			path.write_text(text[: len(text) // 2], encoding='utf-8')
			with self.assertRaises(ContractViolation):
				ServiceRegistry(self.clock).load(path)


class EndpointDirectoryTests(SimpleTestCase):
	def test_bind_and_unbind(self):
		directory = EndpointDirectory()
		endpoint = object()
		directory.bind('y', endpoint)
		self.assertIs(directory.get('y'), endpoint)
		self.assertIn('y', directory)
		directory.unbind('y')
		self.assertIsNone(directory.get('y'))

	def test_call_outcome_ok(self):
		self.assertFalse(CallOutcome(end_ms=10).ok)
		self.assertFalse(CallOutcome(end_ms=10, refused=True).ok)
