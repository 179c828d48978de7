import json
import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from codec.services import Codec
from core.clock import VirtualClock
from core.errors import ContractViolation, NotFound
from core.values import CanonicalMessage, to_canonical
from registry.endpoints import EndpointDirectory
from registry.services import ServiceRegistry

from .devices import DeviceEndpoint, SimFleet, make_generator
from .faults import FaultKind, FaultSpec
from .runner import REPORT_CAPABILITY, ScenarioRunner, run_scenario
from .scenario import DeviceModel, OutputModel, load_scenario, parse_scenario

SCENARIOS = Path(__file__).resolve().parent / 'scenarios'


def _device(device_id='sensor', delay=100, **output):
	return DeviceModel.model_validate({
		'device_id': device_id,
		'domain': 'lab',
		'token': f'tok-{device_id}',
		'capabilities': [{'capability': 'lab.sensor.read', 'delay_ms': delay, 'output': output or {'field': 'v', 'value': 1}}],
	})


def _request(at_ms=0):
	return CanonicalMessage(message_id='q1', capability='lab.sensor.read', timestamp_ms=at_ms, body=to_canonical({}))


class ScenarioModelTests(SimpleTestCase):
	def test_empty_document_is_a_valid_scenario(self):
		scenario = parse_scenario({})
		self.assertEqual(scenario.devices, [])
		self.assertEqual(scenario.clock.kind, 'virtual')

	def test_unknown_key_is_named(self):
		with self.assertRaisesMessage(ContractViolation, 'colour: unknown key'):
			parse_scenario({'colour': 'blue'})

	def test_workload_must_be_sorted(self):
		with self.assertRaisesMessage(ContractViolation, 'sorted by at_ms'):
			parse_scenario({'workload': [
				{'at_ms': 200, 'capability': 'lab.sensor.read'},
				{'at_ms': 100, 'capability': 'lab.sensor.read'},
			]})

	def test_duplicate_device_rejected(self):
		device = _device().model_dump()
		with self.assertRaisesMessage(ContractViolation, 'duplicate device_id'):
			parse_scenario({'devices': [device, device]})

	def test_fault_target_must_exist(self):
		with self.assertRaisesMessage(ContractViolation, "unknown device 'ghost'"):
			parse_scenario({'faults': [{'target': 'ghost', 'kind': 'Crash', 'start_ms': 0, 'duration_ms': 10}]})

	def test_timing_fault_needs_extra_delay(self):
		with self.assertRaises(ContractViolation):
			parse_scenario({
				'devices': [_device().model_dump()],
				'faults': [{'target': 'sensor', 'kind': 'Timing', 'start_ms': 0, 'duration_ms': 10}],
			})

	def test_bad_capability_rejected(self):
		with self.assertRaises(ContractViolation):
			parse_scenario({'workload': [{'at_ms': 0, 'capability': 'Not A Capability'}]})

	def test_assertion_needs_its_fields(self):
		with self.assertRaisesMessage(ContractViolation, "needs 'request'"):
			parse_scenario({'assertions': [{'type': 'latency', 'equals_ms': 10}]})
		with self.assertRaisesMessage(ContractViolation, 'unknown outcome'):
			parse_scenario({'assertions': [{'type': 'outcome', 'request': 'a', 'expected': 'Boom'}]})
		with self.assertRaisesMessage(ContractViolation, 'is a count'):
			parse_scenario({'assertions': [{'type': 'events', 'topic': '#', 'expected': 'many'}]})

	def test_load_reports_json_line(self):
		with tempfile.TemporaryDirectory() as tmp:
			path = Path(tmp) / 'broken.json'
			path.write_text('{\n  "devices": [,\n}', encoding='utf-8')
			with self.assertRaisesMessage(ContractViolation, 'broken.json:2:'):
				load_scenario(path)

	def test_load_names_scenario_after_file(self):
		with tempfile.TemporaryDirectory() as tmp:
			path = Path(tmp) / 'quiet.json'
			path.write_text('{}', encoding='utf-8')
			self.assertEqual(load_scenario(path).name, 'quiet')

	def test_missing_file(self):
		with self.assertRaisesMessage(ContractViolation, 'cannot read scenario'):
			load_scenario(SCENARIOS / 'nope.json')


class FaultSpecTests(SimpleTestCase):
	def test_active_window_is_half_open(self):
		spec = FaultSpec('sensor', FaultKind.CRASH, start_ms=1000, duration_ms=500)
		self.assertFalse(spec.active(999))
		self.assertTrue(spec.active(1000))
		self.assertTrue(spec.down(1499))
		self.assertFalse(spec.active(1500))

	def test_transient_alternates(self):
		spec = FaultSpec('sensor', 'Transient', start_ms=0, duration_ms=4000, flap_period_ms=1000)
		self.assertEqual([spec.down(t) for t in (0, 1000, 2000, 3000, 4000)], [True, False, True, False, False])

	def test_only_crash_and_transient_take_device_down(self):
		for kind in ('Omission', 'Unauthorised'):
			self.assertFalse(FaultSpec('sensor', kind, 0, 100).down(50))
		self.assertFalse(FaultSpec('sensor', 'Timing', 0, 100, extra_delay_ms=5).down(50))

	def test_invalid_parameters(self):
		with self.assertRaises(ContractViolation):
			FaultSpec('sensor', FaultKind.CRASH, 0, 0)
		with self.assertRaises(ContractViolation):
			FaultSpec('sensor', FaultKind.TRANSIENT, 0, 100)


class SimDeviceTests(SimpleTestCase):
	def setUp(self):
		self.clock = VirtualClock()
		self.registry = ServiceRegistry(self.clock)
		self.directory = EndpointDirectory()
		self.fleet = SimFleet(self.registry, self.directory, self.clock, seed=4)

	def test_reply_is_stamped_after_delay(self):
		device = self.fleet.spawn(_device(delay=120))
		answer = device.respond(_request(1000), 1000)
		self.assertEqual(answer.done_ms, 1120)
		self.assertEqual(answer.reply.timestamp_ms, 1120)
		self.assertEqual(answer.reply.correlation_id, 'q1')
		self.assertEqual(answer.reply.body.to_python(), {'v': 1})

	def test_crash_refuses(self):
		device = self.fleet.spawn(_device())
		device.inject(FaultSpec('sensor', FaultKind.CRASH, 0, 1000))
		self.assertTrue(device.respond(_request(), 10).refused)
		self.assertFalse(device.ping(10))
		self.assertTrue(device.ping(1000))

	def test_omission_swallows_request(self):
		device = self.fleet.spawn(_device())
		device.inject(FaultSpec('sensor', FaultKind.OMISSION, 0, 1000))
		answer = device.respond(_request(), 10)
		self.assertIsNone(answer.reply)
		self.assertFalse(answer.refused)
		self.assertTrue(device.ping(10))

	def test_timing_adds_delay(self):
		device = self.fleet.spawn(_device(delay=100))
		device.inject(FaultSpec('sensor', FaultKind.TIMING, 0, 1000, extra_delay_ms=900))
		self.assertEqual(device.respond(_request(), 0).done_ms, 1000)

	def test_unauthorised_drops_telemetry_token(self):
		device = self.fleet.spawn(_device())
		device.inject(FaultSpec('sensor', FaultKind.UNAUTHORISED, 100, 100))
		self.assertEqual(device.telemetry_token(50), 'tok-sensor')
		self.assertEqual(device.telemetry_token(150), '')

	def test_endpoint_reports_late_reply(self):
		device = self.fleet.spawn(_device(delay=300))
		codec = Codec()
		outcome = DeviceEndpoint(device, 'lab.sensor.read').invoke(codec.encode(_request(), 'json'), 0, 200)
		self.assertTrue(outcome.late)
		self.assertEqual(outcome.end_ms, 300)

	def test_ramp_and_random_generators(self):
		ramp = make_generator(OutputModel(kind='ramp', field='x', value=10, step=5), 'k')
		self.assertEqual([ramp(n).to_python()['x'] for n in range(3)], [10, 15, 20])
		first = make_generator(OutputModel(kind='random', low=1, high=2), 'same')
		second = make_generator(OutputModel(kind='random', low=1, high=2), 'same')
		self.assertEqual([first(n).to_python() for n in range(5)], [second(n).to_python() for n in range(5)])


class SimFleetTests(SimpleTestCase):
	def setUp(self):
		self.clock = VirtualClock()
		self.registry = ServiceRegistry(self.clock)
		self.fleet = SimFleet(self.registry, EndpointDirectory(), self.clock)

	def test_duplicate_spawn_rejected(self):
		self.fleet.spawn(_device())
		with self.assertRaises(ContractViolation):
			self.fleet.spawn(_device())

	def test_pubsub_device_needs_channel(self):
		model = _device().model_copy(update={'wire': 'PubSubWire'})
		with self.assertRaisesMessage(ContractViolation, 'bus channel'):
			self.fleet.spawn(model)

	def test_unknown_fault_target(self):
		with self.assertRaises(NotFound):
			self.fleet.inject_fault(FaultSpec('ghost', FaultKind.CRASH, 0, 10))

	def test_hundred_devices_are_discoverable(self):
		for n in range(100):
			self.fleet.spawn(_device(f'sensor-{n:03d}'))
		found = self.registry.discover('lab.sensor.read')
		self.assertEqual(len(found), 100)
		self.assertEqual(found[0].service_id, 'sensor-000.lab.sensor.read')

	def test_down_device_sends_no_heartbeat(self):
		device = self.fleet.spawn(_device())
		device.inject(FaultSpec('sensor', FaultKind.CRASH, 0, 1000))
		self.assertEqual(self.fleet.renew('sensor', 10), 0)
		self.assertEqual(self.fleet.renew('sensor', 1000), 1)


class ScenarioRunnerTests(SimpleTestCase):
	def test_empty_scenario(self):
		report = run_scenario(parse_scenario({}))
		self.assertTrue(report.passed)
		self.assertEqual(report.requests, [])
		self.assertEqual(report.audit, [])
		self.assertEqual(report.summary()['requests'], 0)

	def test_shipped_scenarios_pass(self):
		paths = sorted(SCENARIOS.glob('*.json'))
		self.assertGreaterEqual(len(paths), 5)
		for path in paths:
			with self.subTest(scenario=path.stem):
				report = run_scenario(load_scenario(path))
				self.assertTrue(report.passed, json.dumps(report.failures, indent=2))
				summary = report.summary()
				self.assertEqual(summary['requests'], summary['audited_requests'])

	def test_same_seed_same_report(self):
		scenario = load_scenario(SCENARIOS / 'failover.json')
		reports = {run_scenario(scenario).to_jsonform() for _ in range(3)}
		self.assertEqual(len(reports), 1)

	def test_seed_override(self):
		scenario = load_scenario(SCENARIOS / 'latency.json')
		self.assertEqual(ScenarioRunner(scenario, seed=99).seed, 99)
		self.assertEqual(run_scenario(scenario, seed=99).seed, 99)

	def test_latency_figures(self):
		report = run_scenario(load_scenario(SCENARIOS / 'latency.json'))
		latencies = {request['request_id']: request['latency_ms'] for request in report.requests}
		self.assertEqual(latencies['single'], 200)
		self.assertEqual(latencies['chained'], 600)
		self.assertEqual(latencies['parallel'], 200)

	def test_failing_assertion_is_reported(self):
		data = json.loads((SCENARIOS / 'latency.json').read_text(encoding='utf-8'))
		data['assertions'] = [{'type': 'latency', 'request': 'single', 'equals_ms': 1}]
		report = run_scenario(parse_scenario(data))
		self.assertFalse(report.passed)
		self.assertEqual(len(report.failures), 1)

	def test_report_is_a_jsonform_document(self):
		report = run_scenario(load_scenario(SCENARIOS / 'latency.json'))
		message = Codec(max_bytes=64 * 1024 * 1024).decode_bytes(report.to_jsonform(), 'json')
		self.assertEqual(message.capability.name, REPORT_CAPABILITY)
		body = message.body.to_python()
		self.assertEqual(body['scenario'], 'latency')
		self.assertTrue(body['passed'])

	def test_bad_composite_fails_setup(self):
		data = {'composites': [{'capability': 'lab.pair', 'members': []}]}
		with self.assertRaises(ContractViolation):
			run_scenario(parse_scenario(data))

	def test_wall_clock_run(self):
		report = run_scenario(parse_scenario({
			'clock': {'kind': 'wall', 'duration_ms': 300},
			'config': {'tokens': {'tok-ops': 'ops'}},
			'devices': [_device(delay=20).model_dump()],
			'workload': [{'id': 'one', 'at_ms': 50, 'capability': 'lab.sensor.read', 'token': 'tok-ops'}],
			'assertions': [{'type': 'outcome', 'request': 'one', 'expected': 'ok'}],
		}))
		self.assertTrue(report.passed, report.failures)
		self.assertGreaterEqual(report.requests[0]['latency_ms'], 20)
