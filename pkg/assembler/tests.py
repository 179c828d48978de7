from django.test import SimpleTestCase

from bus.services import EventBus
from codec.services import Codec
from core.clock import VirtualClock
from core.conf import AssemblerSection
from core.descriptors import Granularity
from core.errors import ContractViolation, CrashFailure, NotFound, TimingFault
from core.ids import SequentialIds
from core.values import CanonicalMessage, map_of, string
from monitor.services import ServiceMonitor
from registry.endpoints import EndpointDirectory
from registry.services import ServiceRegistry
from sim.devices import SimFleet
from sim.faults import FaultKind, FaultSpec
from sim.scenario import CapabilityModel, DeviceModel, OutputModel

from .services import DemandCounter, ServiceAssembler
from .specs import CompositeSpec, ExecutionMode, MergeRule, SplitMapping

TEMPERATURE = 'weather.temperature.read'
HUMIDITY = 'weather.humidity.read'
WIND = 'weather.wind.read'
REPORT = 'weather.report'


def _device(device_id, capability, delay=200, field='value', value=1, fmt='json', cost=None, schema=None):
	return DeviceModel(
		device_id=device_id,
		capabilities=[CapabilityModel(
			capability=capability,
			delay_ms=delay,
			output=OutputModel(field=field, value=value),
			format=fmt,
			cost_hint_ms=cost,
			input_schema=schema or [],
		)],
	)


class AssemblerTestCase(SimpleTestCase):
	def setUp(self):
		self.clock = VirtualClock()
		self.ids = SequentialIds(5)
		self.registry = ServiceRegistry(self.clock)
		self.directory = EndpointDirectory()
		self.bus = EventBus(self.clock, self.ids)
		self.monitor = ServiceMonitor(self.registry, self.directory, self.bus, self.clock, self.ids)
		self.assembler = ServiceAssembler(
			self.registry, self.directory, self.monitor, Codec(), self.clock, self.ids, AssemblerSection(),
		)
		self.addCleanup(self.assembler.close)
		self.fleet = SimFleet(self.registry, self.directory, self.clock)

	def request(self, capability=REPORT, body=None):
		return CanonicalMessage(
			message_id=self.ids.new('req'),
			capability=capability,
			timestamp_ms=self.clock.now_ms(),
			body=body if body is not None else map_of({}),
		)

	def three_members(self, mode):
		self.fleet.spawn(_device('t1', TEMPERATURE, field='c', value=21))
		self.fleet.spawn(_device('h1', HUMIDITY, field='rh', value=40))
		self.fleet.spawn(_device('w1', WIND, field='kmh', value=12))
		return CompositeSpec(
			REPORT,
			(TEMPERATURE, HUMIDITY, WIND),
			(MergeRule(0, 'c', 'temperature'), MergeRule(1, 'rh', 'humidity'), MergeRule(2, 'kmh', 'wind')),
			mode,
		)


class PlanTests(AssemblerTestCase):
	def test_both_members_resolved(self):
		self.fleet.spawn(_device('t1', TEMPERATURE))
		self.fleet.spawn(_device('h1', HUMIDITY))
		spec = CompositeSpec(REPORT, (TEMPERATURE, HUMIDITY), ())
		plan = self.assembler.plan(spec, 1000)
		self.assertEqual([d.service_id for d in plan.resolved], [f't1.{TEMPERATURE}', f'h1.{HUMIDITY}'])
		self.assertEqual(plan.deadline_ms, 1000)

	def test_missing_member_named(self):
		self.fleet.spawn(_device('t1', TEMPERATURE))
		spec = CompositeSpec(REPORT, (TEMPERATURE, HUMIDITY), ())
		with self.assertRaisesMessage(NotFound, HUMIDITY):
			self.assembler.plan(spec, 1000)

	def test_cheaper_provider_chosen(self):
		self.fleet.spawn(_device('t-slow', TEMPERATURE, cost=200))
		self.fleet.spawn(_device('t-fast', TEMPERATURE, cost=50))
		self.fleet.spawn(_device('h1', HUMIDITY))
		plan = self.assembler.plan(CompositeSpec(REPORT, (TEMPERATURE, HUMIDITY), ()), 1000)
		self.assertEqual(plan.resolved[0].cost_hint_ms, 50)


class ExecuteTests(AssemblerTestCase):
	def run_plan(self, spec, deadline=5000):
		trace = []
		request = self.request()
		routed = self.assembler.execute(self.assembler.plan(spec, deadline), request, 0, trace)
		return request, routed, trace

	def test_chained_is_the_sum(self):
		_, routed, trace = self.run_plan(self.three_members(ExecutionMode.CHAINED))
		self.assertEqual(routed.end_ms, 600)
		self.assertEqual([(h.start_ms, h.end_ms) for h in trace], [(0, 200), (200, 400), (400, 600)])

	def test_parallel_is_the_max(self):
		_, routed, trace = self.run_plan(self.three_members(ExecutionMode.PARALLEL))
		self.assertEqual(routed.end_ms, 200)
		self.assertLess(routed.end_ms, 300)
		self.assertEqual({h.start_ms for h in trace}, {0})

	def test_merge_keeps_only_mapped_fields(self):
		request, routed, _ = self.run_plan(self.three_members(ExecutionMode.PARALLEL))
		self.assertEqual(routed.reply.body.to_python(), {'humidity': 40, 'temperature': 21, 'wind': 12})
		self.assertEqual(routed.reply.correlation_id, request.message_id)
		self.assertEqual(routed.reply.capability.name, REPORT)

	def test_failover_to_equivalent(self):
		self.fleet.spawn(_device('t-y', TEMPERATURE, field='c', value=21, cost=10))
		self.fleet.spawn(_device('t-z', TEMPERATURE, field='c', value=21, cost=20))
		self.fleet.spawn(_device('h1', HUMIDITY, field='rh', value=40))
		self.fleet.inject_fault(FaultSpec('t-y', FaultKind.CRASH, 0, 10_000))
		spec = CompositeSpec(REPORT, (TEMPERATURE, HUMIDITY), (MergeRule(0, 'c', 'c'), MergeRule(1, 'rh', 'rh')))
		_, routed, trace = self.run_plan(spec)
		self.assertEqual(routed.reply.body.to_python(), {'c': 21, 'rh': 40})
		self.assertEqual(
			[(h.service_id, h.outcome) for h in trace],
			[(f't-y.{TEMPERATURE}', 'CrashFailure'), (f't-z.{TEMPERATURE}', 'ok'), (f'h1.{HUMIDITY}', 'ok')],
		)

	def test_deadline_exceeded(self):
		self.fleet.spawn(_device('t1', TEMPERATURE, delay=1500))
		self.fleet.spawn(_device('h1', HUMIDITY))
		spec = CompositeSpec(REPORT, (TEMPERATURE, HUMIDITY), ())
		with self.assertRaises(TimingFault):
			self.run_plan(spec, deadline=1000)

	def test_split_runs_as_composite(self):
		self.three_members(ExecutionMode.PARALLEL)
		split = SplitMapping(REPORT, (TEMPERATURE, HUMIDITY), (MergeRule(0, 'c', 't'), MergeRule(1, 'rh', 'h')))
		_, routed, _ = self.run_plan(split.as_composite())
		self.assertEqual(routed.reply.body.to_python(), {'h': 40, 't': 21})


class CallTests(AssemblerTestCase):
	def test_xml_provider_round_trip(self):
		self.fleet.spawn(_device('t1', TEMPERATURE, field='c', value=21.5, fmt='xml'))
		descriptor = self.registry.discover(TEMPERATURE)[0]
		trace = []
		routed = self.assembler.call(descriptor, self.request(TEMPERATURE), 0, 1000, trace)
		self.assertEqual(routed.reply.body.to_python(), {'c': 21.5})
		self.assertEqual(trace[0].outcome, 'ok')

	def test_request_schema_enforced(self):
		self.fleet.spawn(_device('t1', TEMPERATURE, schema=[{'name': 'unit', 'kind': 'str'}]))
		descriptor = self.registry.discover(TEMPERATURE)[0]
		with self.assertRaises(ContractViolation):
			self.assembler.call(descriptor, self.request(TEMPERATURE), 0, 1000)
		routed = self.assembler.call(descriptor, self.request(TEMPERATURE, map_of({'unit': string('C')})), 0, 1000)
		self.assertEqual(routed.end_ms, 200)

	def test_sole_crashed_provider_is_not_not_found(self):
		self.fleet.spawn(_device('t1', TEMPERATURE))
		self.fleet.inject_fault(FaultSpec('t1', FaultKind.CRASH, 0, 60_000))
		for now in (0, 1000, 2000):
			self.monitor.probe(f't1.{TEMPERATURE}', now)
		with self.assertRaises(CrashFailure):
			self.assembler.route(TEMPERATURE, self.request(TEMPERATURE), 2500, 3500)


class DemandTests(AssemblerTestCase):
	def test_single_request(self):
		counter = self.assembler.record_demand((TEMPERATURE, HUMIDITY), 0)
		self.assertEqual(counter.count(0), 1)

	def test_signature_ignores_order(self):
		self.assembler.record_demand((TEMPERATURE, HUMIDITY), 0)
		counter = self.assembler.record_demand((HUMIDITY, TEMPERATURE), 0)
		self.assertEqual(counter.count(0), 2)

	def test_threshold_within_window(self):
		counter = DemandCounter((TEMPERATURE, HUMIDITY), window_ms=60_000, threshold=10)
		for n in range(10):
			counter.record(n * 1000)
		self.assertTrue(counter.promotable(9000))

	def test_spread_beyond_window(self):
		counter = DemandCounter((TEMPERATURE, HUMIDITY), window_ms=60_000, threshold=10)
		for n in range(10):
			counter.record(n * 12_000)
			self.assertFalse(counter.promotable(n * 12_000))

	def test_promotion_once(self):
		self.three_members(ExecutionMode.PARALLEL)
		spec = CompositeSpec(REPORT, (TEMPERATURE, HUMIDITY), (MergeRule(0, 'c', 'c'),))
		counter = None
		for _ in range(10):
			counter = self.assembler.record_demand(spec.signature, 0)
		promoted = self.assembler.maybe_promote(counter, spec, 0)
		self.assertEqual(promoted.granularity, Granularity.COMPOSITE)
		self.assertEqual([d.service_id for d in self.registry.discover(REPORT)], [promoted.service_id])
		self.assertIsNone(self.assembler.maybe_promote(counter, spec, 0))
		self.assertEqual(self.registry.composite(REPORT), spec)

	def test_not_promotable_yet(self):
		spec = CompositeSpec(REPORT, (TEMPERATURE, HUMIDITY), ())
		counter = self.assembler.record_demand(spec.signature, 0)
		self.assertIsNone(self.assembler.maybe_promote(counter, spec, 0))
		self.assertEqual(self.registry.discover(REPORT), [])
