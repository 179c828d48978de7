import itertools
import random
from unittest import mock

from django.test import SimpleTestCase

from bus.services import EventBus
from core.clock import VirtualClock
from core.conf import MonitorSection
from core.descriptors import ServiceDescriptor
from core.errors import ErrorKind, NotFound
from core.ids import SequentialIds
from registry.endpoints import EndpointDirectory
from registry.services import ServiceRegistry

from .services import (
	RESTORED_TOPIC,
	BreakerState,
	HealthStatus,
	ServiceMonitor,
	Symptoms,
	_TransitionLogger,
	classify,
)

CAPABILITY = 'weather.temperature.read'


class FakeEndpoint:
	def __init__(self):
		self.up = True

	def ping(self, now_ms):
		return self.up

	def invoke(self, request, start_ms, timeout_ms):
		raise AssertionError('monitor never invokes')


class MonitorTestCase(SimpleTestCase):
	def setUp(self):
		self.clock = VirtualClock()
		self.registry = ServiceRegistry(self.clock)
		self.directory = EndpointDirectory()
		self.bus = EventBus(self.clock, SequentialIds(3))
		self.events = self.bus.subscribe('service.#')
		self.monitor = ServiceMonitor(
			self.registry, self.directory, self.bus, self.clock, SequentialIds(4), MonitorSection(),
		)
		self.endpoints = {}

	def add(self, service_id, cost=0):
		self.registry.register(ServiceDescriptor(service_id, CAPABILITY, cost_hint_ms=cost, lease_ttl_ms=10 ** 9))
		endpoint = self.endpoints[service_id] = FakeEndpoint()
		self.directory.bind(service_id, endpoint)
		return endpoint

	def check_every_second(self, service_id, times):
		state = None
		for _ in range(times):
			state = self.monitor.probe(service_id, self.clock.now_ms())
			self.clock.advance(1000)
		return state

	def topics(self):
		return [event.topic for event in self.events.drain()]


class ProbeTests(MonitorTestCase):
	def test_healthy_device(self):
		self.add('temp-1')
		state = self.monitor.probe('temp-1')
		self.assertEqual((state.status, state.consecutive_failures, state.breaker), (HealthStatus.UP, 0, BreakerState.CLOSED))

	def test_unknown_service(self):
		with self.assertRaises(NotFound):
			self.monitor.probe('ghost')

	def test_three_failures_open_the_breaker(self):
		self.add('temp-1').up = False
		first = self.monitor.probe('temp-1')
		self.assertEqual((first.status, first.breaker), (HealthStatus.SUSPECT, BreakerState.CLOSED))
		self.clock.advance(1000)
		state = self.check_every_second('temp-1', 2)
		self.assertEqual((state.status, state.breaker), (HealthStatus.DOWN, BreakerState.OPEN))
		self.assertEqual(state.last_classification, ErrorKind.CRASH_FAILURE)
		self.assertEqual(state.open_until_ms, 2000 + 5000)
		self.assertEqual(self.registry.discover(CAPABILITY), [])

	def test_cooldown_then_half_open_then_closed(self):
		endpoint = self.add('temp-1')
		endpoint.up = False
		self.check_every_second('temp-1', 3)
		self.events.drain()
		self.clock.advance_to(7000)
		self.assertEqual(self.monitor.state('temp-1').breaker, BreakerState.HALF_OPEN)
		endpoint.up = True
		state = self.monitor.probe('temp-1')
		self.assertEqual((state.status, state.breaker, state.consecutive_failures), (HealthStatus.UP, BreakerState.CLOSED, 0))
		self.assertEqual(self.topics(), [RESTORED_TOPIC])
		self.assertEqual([d.service_id for d in self.registry.discover(CAPABILITY)], ['temp-1'])

	def test_half_open_failure_reopens(self):
		self.add('temp-1').up = False
		self.check_every_second('temp-1', 3)
		self.clock.advance_to(7000)
		state = self.monitor.probe('temp-1')
		self.assertEqual(state.breaker, BreakerState.OPEN)
		self.assertEqual(state.open_until_ms, 12_000)

	def test_run_cycle_visits_in_id_order(self):
		self.add('b-1')
		self.add('a-1')
		self.assertEqual([s.service_id for s in self.monitor.run_cycle()], ['a-1', 'b-1'])


class FailoverTests(MonitorTestCase):
	def test_redirect_names_replacement(self):
		self.add('temp-y', cost=10).up = False
		self.add('temp-z', cost=20)
		self.check_every_second('temp-y', 3)
		event = self.events.poll()
		self.assertEqual(event.topic, 'service.redirect')
		body = event.payload.body.to_python()
		self.assertEqual((body['failed'], body['replacement'], body['capability']), ('temp-y', 'temp-z', CAPABILITY))

	def test_no_equivalent_is_unavailable(self):
		self.add('temp-y').up = False
		self.check_every_second('temp-y', 3)
		event = self.events.poll()
		self.assertEqual(event.topic, 'service.unavailable')
		self.assertIsNone(event.payload.body.to_python()['replacement'])

	def test_down_equivalent_is_skipped(self):
		self.add('temp-a', cost=10)
		self.add('temp-b', cost=20).up = False
		self.add('temp-c', cost=30)
		self.check_every_second('temp-b', 3)
		self.events.drain()
		self.endpoints['temp-a'].up = False
		self.check_every_second('temp-a', 3)
		action = self.events.poll().payload.body.to_python()
		self.assertEqual(action['replacement'], 'temp-c')


class RequestPathTests(MonitorTestCase):
	def test_omission_keeps_breaker_closed(self):
		self.add('temp-1')
		self.monitor.probe('temp-1')
		kind = self.monitor.record_call('temp-1', Symptoms(request_timed_out=True))
		state = self.monitor.state('temp-1')
		self.assertEqual(kind, ErrorKind.OMISSION_FAILURE)
		self.assertEqual((state.status, state.breaker), (HealthStatus.SUSPECT, BreakerState.CLOSED))

	def test_late_reply_is_timing(self):
		self.add('temp-1')
		self.assertEqual(self.monitor.record_call('temp-1', Symptoms(deadline_exceeded=True)), ErrorKind.TIMING_FAULT)

	def test_half_open_admits_one_trial(self):
		self.add('temp-1').up = False
		self.check_every_second('temp-1', 3)
		self.assertFalse(self.monitor.admit('temp-1', 6000))
		self.assertTrue(self.monitor.admit('temp-1', 7000))
		self.assertFalse(self.monitor.admit('temp-1', 7000))
		self.monitor.record_call('temp-1', None, 7000)
		state = self.monitor.state('temp-1')
		self.assertEqual((state.breaker, state.status), (BreakerState.CLOSED, HealthStatus.UP))

	def test_flapping_is_transient_and_never_down(self):
		endpoint = self.add('temp-1')
		for n in range(12):
			endpoint.up = n % 2 == 0
			state = self.monitor.probe('temp-1', self.clock.now_ms())
			self.assertNotEqual(state.status, HealthStatus.DOWN)
			self.clock.advance(1000)
		self.assertEqual(self.monitor.state('temp-1').last_classification, ErrorKind.TRANSIENT_FAULT)

	def test_note_fault(self):
		self.add('temp-1')
		self.monitor.note_fault(['temp-1'], ErrorKind.UNAUTHORISED_ACCESS)
		self.assertEqual(self.monitor.state('temp-1').last_classification, ErrorKind.UNAUTHORISED_ACCESS)


class ClassifyTests(SimpleTestCase):
	def test_all_sixteen_tuples(self):
		for probe_ok, timed_out, refused, late in itertools.product((True, False), repeat=4):
			symptoms = Symptoms(probe_ok, timed_out, refused, late)
			if refused or not probe_ok:
				expected = ErrorKind.CRASH_FAILURE
			elif timed_out:
				expected = ErrorKind.OMISSION_FAILURE
			elif late:
				expected = ErrorKind.TIMING_FAULT
			else:
				expected = ErrorKind.TRANSIENT_FAULT
			self.assertEqual(classify(symptoms), expected, symptoms)
			self.assertEqual(classify(symptoms, flapping=True), ErrorKind.TRANSIENT_FAULT)

	def test_examples(self):
		self.assertEqual(classify(Symptoms(probe_ok=True, request_timed_out=True)), ErrorKind.OMISSION_FAILURE)
		self.assertEqual(classify(Symptoms(connection_refused=True)), ErrorKind.CRASH_FAILURE)


class BreakerWalkTests(MonitorTestCase):
	def test_only_legal_transitions_are_reachable(self):
		seen = set()

		def record(listener, cb, old_state, new_state):
			seen.add((old_state.name, new_state.name))

		endpoint = self.add('temp-1')
		rng = random.Random(77)
		with mock.patch.object(_TransitionLogger, 'state_change', autospec=True, side_effect=record):
			for _ in range(2000):
				op = rng.randrange(4)
				if op == 0:
					endpoint.up = rng.random() < 0.5
					self.monitor.probe('temp-1')
				elif op == 1:
					self.clock.advance(rng.choice((0, 1000, 5000)))
				elif op == 2 and self.monitor.admit('temp-1'):
					self.monitor.record_call('temp-1', None if rng.random() < 0.5 else Symptoms(connection_refused=True))
				else:
					state = self.monitor.state('temp-1')
					if state.breaker is BreakerState.OPEN:
						self.assertEqual(state.status, HealthStatus.DOWN)
		legal = {('closed', 'open'), ('open', 'half-open'), ('half-open', 'closed'), ('half-open', 'open')}
		self.assertTrue(seen)
		self.assertLessEqual(seen, legal)
