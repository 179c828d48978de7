import os
import random
import tempfile
import threading
from pathlib import Path
from unittest import mock

from django.test import SimpleTestCase

from . import runtime, schedulers
from .capabilities import parse_capability, topic_for_update
from .clock import EventScheduler, VirtualClock
from .conf import ConfigError, FrameworkConfig, load_config, parse_config
from .errors import ContractViolation, ErrorKind, FrameworkError, NotFound
from .ids import SequentialIds
from .testing import random_message
from .values import (
	CanonicalMessage,
	Schema,
	SchemaField,
	ValueKind,
	boolean,
	floating,
	integer,
	list_of,
	map_of,
	null,
	schema_satisfies,
	string,
	to_canonical,
	validate,
)


class CapabilityTests(SimpleTestCase):
	def test_parse_and_render(self):
		capability = parse_capability('weather.temperature.read')
		self.assertEqual(capability.segments, ('weather', 'temperature', 'read'))
		self.assertEqual(str(capability), 'weather.temperature.read')

	def test_rejects_bad_names(self):
		for text in ('', 'Weather.read', 'weather..read', 'weather.read.', '9lives.read', 'a.' * 8 + 'b'):
			with self.subTest(text=text), self.assertRaises(ContractViolation):
				parse_capability(text)

	def test_update_topic(self):
		self.assertEqual(topic_for_update(parse_capability('weather.humidity.read')), 'weather.humidity.updated')


class CanonicalValueTests(SimpleTestCase):
	def test_map_keys_sorted(self):
		value = map_of({'b': integer(1), 'a': integer(2)})
		self.assertEqual([key for key, _ in value.items()], ['a', 'b'])
		self.assertEqual(value, to_canonical({'a': 2, 'b': 1}))

	def test_signed_zero_kept_apart(self):
		self.assertNotEqual(floating(0.0), floating(-0.0))

	def test_int_and_float_differ(self):
		self.assertNotEqual(to_canonical(1), to_canonical(1.0))

	def test_out_of_range(self):
		with self.assertRaises(ContractViolation):
			integer(2 ** 63)
		with self.assertRaises(ContractViolation):
			floating(float('nan'))

	def test_message_headers_normalised(self):
		message = CanonicalMessage('m1', 'weather.temperature.read', 0, map_of({}), headers={'b': '2', 'a': '1'})
		self.assertEqual(message.headers, (('a', '1'), ('b', '2')))
		with self.assertRaises(ContractViolation):
			CanonicalMessage('', 'weather.temperature.read', 0, string('x'))


KIND_SAMPLES = {
	ValueKind.NULL: null(),
	ValueKind.BOOL: boolean(True),
	ValueKind.INT: integer(1),
	ValueKind.FLOAT: floating(1.5),
	ValueKind.STR: string('x'),
	ValueKind.LIST: list_of([]),
	ValueKind.MAP: map_of({}),
}


class ValidateTests(SimpleTestCase):
	def test_every_kind_pair(self):
		for expected in ValueKind:
			schema = Schema((SchemaField('v', expected),))
			for actual in ValueKind:
				with self.subTest(expected=expected.value, actual=actual.value):
					violations = validate(map_of({'v': KIND_SAMPLES[actual]}), schema)
					if expected is actual:
						self.assertEqual(violations, [])
					else:
						self.assertEqual(violations, [f'kind mismatch for v: expected {expected.value}, got {actual.value}'])

	def test_missing_required_field(self):
		schema = Schema((SchemaField('c', ValueKind.FLOAT), SchemaField('unit', ValueKind.STR, required=False)))
		self.assertEqual(validate(map_of({}), schema), ['missing c'])
		self.assertEqual(validate(map_of({'c': floating(21.0)}), schema), [])

	def test_extra_fields_allowed(self):
		schema = Schema((SchemaField('c', ValueKind.INT),))
		self.assertEqual(validate(to_canonical({'c': 21, 'extra': 'x'}), schema), [])

	def test_empty_schema_accepts_anything(self):
		for value in KIND_SAMPLES.values():
			self.assertEqual(validate(value, Schema()), [])

	def test_non_map_body(self):
		schema = Schema((SchemaField('c', ValueKind.INT),))
		self.assertEqual(validate(integer(1), schema), ['body is int, expected map'])

	def test_schema_satisfies(self):
		wanted = Schema((SchemaField('c', ValueKind.INT), SchemaField('note', ValueKind.STR, required=False)))
		self.assertTrue(schema_satisfies(Schema((SchemaField('c', ValueKind.INT), SchemaField('rh', ValueKind.INT))), wanted))
		self.assertFalse(schema_satisfies(Schema((SchemaField('c', ValueKind.FLOAT),)), wanted))
		self.assertFalse(schema_satisfies(Schema(), wanted))
		self.assertTrue(schema_satisfies(Schema(), Schema()))


class CanonicalEqualityTests(SimpleTestCase):
	def setUp(self):
		rng = random.Random(20240611)
		self.values = [random_message(rng).body for _ in range(60)]
		self.copies = [to_canonical(value.to_python()) for value in self.values]

	def test_reflexive(self):
		for value, copy in zip(self.values, self.copies):
			self.assertEqual(value, value)
			self.assertEqual(value, copy)
			self.assertEqual(hash(value), hash(copy))

	def test_symmetric(self):
		pool = self.values + self.copies
		for a in pool:
			for b in pool:
				self.assertEqual(a == b, b == a)

	def test_transitive(self):
		pool = self.values + self.copies
		for a in pool:
			for b in pool:
				if a != b:
					continue
				for c in pool:
					if b == c:
						self.assertEqual(a, c)


class ErrorTests(SimpleTestCase):
	def test_from_kind_covers_taxonomy(self):
		for kind in ErrorKind:
			error = FrameworkError.from_kind(kind, 'detail', 'txn-1')
			self.assertIs(error.kind, kind)
			self.assertEqual(error.as_dict(), {'kind': kind.value, 'detail': 'detail', 'transaction_id': 'txn-1'})

	def test_transaction_set_once(self):
		error = NotFound('x').with_transaction('a').with_transaction('b')
		self.assertEqual(error.transaction_id, 'a')


class SchedulerOrderTests(SimpleTestCase):
	def test_ties_broken_by_priority_then_submission(self):
		scheduler = EventScheduler(VirtualClock())
		seen = []
		scheduler.schedule(10, lambda: seen.append('late'), priority=5)
		scheduler.schedule(10, lambda: seen.append('first'), priority=0)
		scheduler.schedule(10, lambda: seen.append('second'), priority=0)
		scheduler.schedule(5, lambda: seen.append('early'), priority=9)
		self.assertEqual(scheduler.run(), 4)
		self.assertEqual(seen, ['early', 'first', 'second', 'late'])
		self.assertEqual(scheduler.now_ms, 10)

	def test_run_until_advances_clock(self):
		scheduler = EventScheduler(VirtualClock())
		scheduler.schedule(50, lambda: None)
		self.assertEqual(scheduler.run(until_ms=20), 0)
		self.assertEqual(scheduler.now_ms, 20)
		with self.assertRaises(ValueError):
			scheduler.schedule(10, lambda: None)


class SequentialIdsTests(SimpleTestCase):
	def test_same_seed_same_ids(self):
		first, second = SequentialIds(7), SequentialIds(7)
		self.assertEqual([first.new('txn') for _ in range(3)], [second.new('txn') for _ in range(3)])
		self.assertNotEqual(SequentialIds(8).new('txn'), SequentialIds(7).new('txn'))


class ConfigTests(SimpleTestCase):
	def test_defaults(self):
		config = load_config('')
		self.assertEqual(config.http.port, 8700)
		self.assertEqual(config.assembler.promotion_threshold, 10)

	def test_toml_sections(self):
		config = parse_config('[http]\nport = 9000\n\n[tokens]\n"tok-a" = "alice"\n')
		self.assertEqual(config.http.port, 9000)
		self.assertEqual(config.tokens, {'tok-a': 'alice'})

	def test_unknown_key_reports_line(self):
		with self.assertRaises(ConfigError) as ctx:
			parse_config('[http]\nport = 9000\nprot = 1\n', 'iot.toml')
		self.assertIn('iot.toml:3', str(ctx.exception))
		self.assertIn('unknown key', str(ctx.exception))

	def test_syntax_error(self):
		with self.assertRaises(ConfigError):
			parse_config('[http\n')

	def test_missing_file(self):
		with self.assertRaises(ConfigError):
			load_config('/nonexistent/iot.toml')

	def test_example_file_matches_defaults(self):
		example = load_config(Path(__file__).resolve().parent.parent / 'iotframe.example.toml')
		self.assertEqual(example.model_dump(exclude={'tokens'}), FrameworkConfig().model_dump(exclude={'tokens'}))

	def test_overrides_merge(self):
		config = FrameworkConfig(tokens={'a': 'alice'}).with_overrides({'monitor': {'failure_threshold': 2}, 'tokens': {'b': 'bob'}})
		self.assertEqual(config.monitor.failure_threshold, 2)
		self.assertEqual(config.monitor.probe_interval_ms, 1000)
		self.assertEqual(config.tokens, {'b': 'bob'})


class FrameworkTests(SimpleTestCase):
	def build(self, **overrides):
		config = FrameworkConfig().with_overrides(overrides)
		framework = runtime.Framework(config, VirtualClock(), SequentialIds(1), in_memory=not overrides)
		self.addCleanup(framework.close)
		return framework

	def test_builtin_services_registered(self):
		framework = self.build()
		capabilities = {entry.descriptor.capability.name for entry in framework.registry.entries()}
		self.assertEqual(capabilities, {'audit.append', 'monitor.probe'})

	def test_maintain_reaps_and_renews(self):
		framework = self.build()
		framework.clock.advance(25 * 60 * 60 * 1000)
		framework.maintain()
		self.assertTrue(framework.registry.is_live('gateway.audit'))

	def test_close_is_idempotent(self):
		framework = self.build()
		framework.close()
		framework.close()

	def test_snapshot_round_trip(self):
		with tempfile.TemporaryDirectory() as tmp:
			path = str(Path(tmp) / 'registry.json')
			audit = str(Path(tmp) / 'audit')
			first = self.build(registry={'snapshot_path': path}, auditor={'directory': audit})
			first.close()
			self.assertTrue(os.path.exists(path))
			second = self.build(registry={'snapshot_path': path}, auditor={'directory': audit})
			self.assertTrue(second.registry.is_live('gateway.monitor'))
			second.close()

	def test_install_returns_previous(self):
		framework = self.build()
		previous = runtime.install(framework)
		self.addCleanup(runtime.install, previous)
		self.assertIs(runtime.get_framework(), framework)
		self.assertIs(runtime.install(previous), framework)


class PeriodicLoopTests(SimpleTestCase):
	def test_failure_is_logged_not_raised(self):
		loop = schedulers.PeriodicLoop('teste', 1000, mock.Mock(side_effect=RuntimeError('x')))
		with self.assertLogs('core.schedulers', level='ERROR'):
			self.assertFalse(loop.run_once())

	def test_overlapping_cycle_skipped(self):
		entered = threading.Event()
		release = threading.Event()

		def slow():
			entered.set()
			release.wait(5)

		loop = schedulers.PeriodicLoop('lento', 1000, slow)
		worker = threading.Thread(target=loop.run_once)
		worker.start()
		entered.wait(5)
		self.assertFalse(loop.run_once())
		release.set()
		worker.join(5)

	def test_start_stop(self):
		ran = threading.Event()
		loop = schedulers.PeriodicLoop('rapido', 10, ran.set)
		loop.start()
		self.assertTrue(ran.wait(5))
		loop.stop()
		self.assertFalse(loop.running)

	def test_autostart_gate(self):
		with mock.patch.dict(os.environ, {'IOTFRAME_AUTOSTART': ''}):
			self.assertFalse(schedulers._should_start_loops())
		with mock.patch.dict(os.environ, {'IOTFRAME_AUTOSTART': '1'}), mock.patch.object(schedulers.sys, 'argv', ['manage.py', 'scenario']):
			self.assertFalse(schedulers._should_start_loops())
		with mock.patch.dict(os.environ, {'IOTFRAME_AUTOSTART': 'true'}), mock.patch.object(schedulers.sys, 'argv', ['asgi']):
			self.assertTrue(schedulers._should_start_loops())

	def test_background_loops_started_once(self):
		framework = runtime.Framework(FrameworkConfig(), VirtualClock(), SequentialIds(2), in_memory=True)
		self.addCleanup(framework.close)
		self.addCleanup(schedulers.stop_background_loops)
		loops = schedulers.start_background_loops(framework, force=True)
		self.assertEqual([loop.name for loop in loops], ['monitor', 'bus', 'registry'])
		self.assertEqual(schedulers.start_background_loops(framework, force=True), loops)
