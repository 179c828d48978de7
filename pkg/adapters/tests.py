import json
import socket
import threading
from unittest import mock

import requests
from django.test import SimpleTestCase
from rest_framework import status
from rest_framework.test import APIClient

from bus.services import EventBus
from core.clock import VirtualClock
from core.conf import FrameworkConfig
from core.descriptors import WireFormat
from core.errors import ContractViolation, ErrorKind, FrameworkError
from core.ids import SequentialIds
from core.runtime import Framework, install
from core.values import CanonicalMessage, map_of
from registry.endpoints import EndpointDirectory
from registry.services import ServiceRegistry
from sim.devices import SimFleet
from sim.scenario import CapabilityModel, DeviceModel, OutputModel

from .bindings import BindingSet, BindingState, HttpBinding, PubSubBinding
from .endpoints import DeviceChannel
from .pubsub import FrameQueue, FrameSession
from .status import FAULT_HEADER, STATUS_BY_KIND, kind_for, status_for

TEMPERATURE = 'weather.temperature.read'
TOKEN = 'tok-alice'


def _device(device_id, capability=TEMPERATURE, delay=200):
	return DeviceModel(
		device_id=device_id,
		token=TOKEN,
		capabilities=[CapabilityModel(capability=capability, delay_ms=delay, output=OutputModel(field='c', value=21))],
	)


class FrameworkTestCase(SimpleTestCase):
	def setUp(self):
		self.framework = Framework(
			FrameworkConfig(tokens={TOKEN: 'alice'}), VirtualClock(), SequentialIds(9), in_memory=True,
		)
		previous = install(self.framework)
		self.addCleanup(install, previous)
		self.addCleanup(self.framework.close)
		self.fleet = SimFleet(
			self.framework.registry, self.framework.directory, self.framework.clock, self.framework.codec,
		)
		self.client = APIClient()

	def envelope(self, capability=TEMPERATURE, fmt=WireFormat.JSON, message_id='req-1'):
		message = CanonicalMessage(message_id=message_id, capability=capability, timestamp_ms=0, body=map_of({}))
		return self.framework.codec.encode(message, fmt).data

	def call(self, capability=TEMPERATURE, token=TOKEN, accept='application/json', **headers):
		if token:
			headers['HTTP_X_AUTH_TOKEN'] = token
		return self.client.post(
			f'/svc/{capability}', self.envelope(capability), content_type='application/json', HTTP_ACCEPT=accept, **headers,
		)


class StatusTableTests(SimpleTestCase):
	def test_round_trip_every_kind(self):
		for kind in ErrorKind:
			self.assertIs(kind_for(status_for(kind), kind.value), kind)

	def test_status_without_header(self):
		self.assertIs(kind_for(401), ErrorKind.UNAUTHORISED_ACCESS)
		self.assertIs(kind_for(408), ErrorKind.TIMING_FAULT)
		self.assertIsNone(kind_for(200))

	def test_mismatched_header_ignored(self):
		self.assertIs(kind_for(502, 'NotFound'), ErrorKind.CRASH_FAILURE)


class ServiceCallTests(FrameworkTestCase):
	def test_json_provider_xml_consumer(self):
		self.fleet.spawn(_device('t1'))
		response = self.call(accept='application/xml')
		self.assertEqual(response.status_code, status.HTTP_200_OK)
		self.assertTrue(response['Content-Type'].startswith('application/xml'))
		reply = self.framework.codec.decode_bytes(response.content, WireFormat.XML)
		self.assertEqual(reply.body.to_python(), {'c': 21})
		self.assertEqual(reply.correlation_id, 'req-1')

	def test_missing_token(self):
		self.fleet.spawn(_device('t1'))
		response = self.call(token='')
		self.assertEqual(response.status_code, status.HTTP_401_UNAUTHORIZED)
		self.assertEqual(response[FAULT_HEADER], 'UnauthorisedAccess')

	def test_unknown_capability(self):
		response = self.call('weather.pressure.read')
		self.assertEqual(response.status_code, status.HTTP_404_NOT_FOUND)
		self.assertEqual(response.json()['error']['kind'], 'NotFound')

	def test_non_functional_is_not_found(self):
		for capability in ('audit.append', 'monitor.probe'):
			self.assertEqual(self.call(capability).status_code, status.HTTP_404_NOT_FOUND)

	def test_bad_deadline_header(self):
		self.fleet.spawn(_device('t1'))
		response = self.call(HTTP_X_DEADLINE_MS='soon')
		self.assertEqual(response.status_code, 422)

	def test_deadline_header_applies(self):
		self.fleet.spawn(_device('t1', delay=600))
		response = self.call(HTTP_X_DEADLINE_MS='500')
		self.assertEqual(response.status_code, 408)
		self.assertEqual(response[FAULT_HEADER], 'TimingFault')

	def test_every_kind_maps_through_the_view(self):
		for kind in ErrorKind:
			with self.subTest(kind=kind.value):
				with mock.patch.object(
					self.framework.gateway, 'handle_request', side_effect=FrameworkError.from_kind(kind, 'boom'),
				):
					response = self.call()
				self.assertEqual(response.status_code, STATUS_BY_KIND[kind])
				self.assertIs(kind_for(response.status_code, response[FAULT_HEADER]), kind)


class RegistryViewTests(FrameworkTestCase):
	descriptor = {
		'service_id': 'remote.weather.temperature.read',
		'capability': TEMPERATURE,
		'device_id': 'remote',
		'lease_ttl_ms': 10_000,
	}

	def test_lists_functional_services(self):
		self.fleet.spawn(_device('t1'))
		services = self.client.get('/registry').json()['services']
		self.assertEqual([s['descriptor']['service_id'] for s in services], [f't1.{TEMPERATURE}'])
		everything = self.client.get('/registry?all=1').json()['services']
		self.assertIn('audit.append', {s['descriptor']['capability'] for s in everything})

	def test_register_requires_token(self):
		response = self.client.post('/registry', self.descriptor, format='json')
		self.assertEqual(response.status_code, status.HTTP_401_UNAUTHORIZED)

	def test_register_renew_delete(self):
		auth = {'HTTP_X_AUTH_TOKEN': TOKEN}
		created = self.client.post('/registry', self.descriptor, format='json', **auth)
		self.assertEqual(created.status_code, status.HTTP_201_CREATED)
		self.assertIn(self.descriptor['service_id'], self.framework.directory)
		renewed = self.client.post(f'/registry/{self.descriptor["service_id"]}/renew', **auth)
		self.assertEqual(renewed.json()['lease']['epoch'], 1)
		deleted = self.client.delete(f'/registry/{self.descriptor["service_id"]}', **auth)
		self.assertEqual(deleted.status_code, status.HTTP_204_NO_CONTENT)
		self.assertEqual(self.framework.registry.discover(TEMPERATURE), [])

	def test_device_id_must_fit_a_topic_segment(self):
		auth = {'HTTP_X_AUTH_TOKEN': TOKEN}
		for device_id in ('Remote.1', 'remote.1', 'Remote', 'a b'):
			with self.subTest(device_id=device_id):
				descriptor = dict(self.descriptor, device_id=device_id)
				response = self.client.post('/registry', descriptor, format='json', **auth)
				self.assertEqual(response.status_code, 422)
				self.assertEqual(response[FAULT_HEADER], 'ContractViolation')
				self.assertEqual(self.framework.registry.discover(TEMPERATURE), [])
				self.assertNotIn(self.descriptor['service_id'], self.framework.directory)

	def test_renew_unknown(self):
		response = self.client.post('/registry/ghost/renew', HTTP_X_AUTH_TOKEN=TOKEN)
		self.assertEqual(response.status_code, status.HTTP_404_NOT_FOUND)

	def test_duplicate_registration(self):
		auth = {'HTTP_X_AUTH_TOKEN': TOKEN}
		self.client.post('/registry', self.descriptor, format='json', **auth)
		response = self.client.post('/registry', self.descriptor, format='json', **auth)
		self.assertEqual(response.status_code, 422)


class CompositionViewTests(FrameworkTestCase):
	auth = {'HTTP_X_AUTH_TOKEN': TOKEN}

	def test_compose_then_list(self):
		spec = {
			'capability': 'weather.report',
			'members': [TEMPERATURE, 'weather.humidity.read'],
			'merge': [{'member': 0, 'from': 'c', 'to': 'temperature'}],
		}
		response = self.client.post('/composites', spec, format='json', **self.auth)
		self.assertEqual(response.status_code, status.HTTP_201_CREATED)
		listed = self.client.get('/composites').json()['composites']
		self.assertEqual([c['capability'] for c in listed], ['weather.report'])

	def test_self_referential_split(self):
		mapping = {'coarse': 'weather.report', 'fines': ['weather.report', TEMPERATURE]}
		response = self.client.post('/splits', mapping, format='json', **self.auth)
		self.assertEqual(response.status_code, 422)
		self.assertEqual(response[FAULT_HEADER], 'ContractViolation')

	def test_split_listed(self):
		mapping = {'coarse': 'weather.report', 'fines': [TEMPERATURE, 'weather.humidity.read']}
		self.client.post('/splits', mapping, format='json', **self.auth)
		self.assertEqual(self.client.get('/splits').json()['splits'][0]['coarse'], 'weather.report')


class ReadViewTests(FrameworkTestCase):
	def test_audit_tail(self):
		self.fleet.spawn(_device('t1'))
		self.call()
		self.call(token='')
		records = self.client.get('/audit?after=0').json()['records']
		self.assertEqual([r['final_outcome'] for r in records], ['ok', 'UnauthorisedAccess'])
		later = self.client.get(f'/audit?after={records[0]["seq"]}').json()
		self.assertEqual(len(later['records']), 1)
		self.assertEqual(later['last_seq'], records[1]['seq'])

	def test_health(self):
		self.fleet.spawn(_device('t1'))
		response = self.client.get(f'/health/t1.{TEMPERATURE}')
		self.assertTrue(response['Content-Type'].startswith('application/json'))
		document = self.framework.codec.decode_bytes(response.content, 'application/json')
		self.assertEqual(str(document.capability), 'monitor.health.state')
		detail = document.body.to_python()
		self.assertEqual((detail['service_id'], detail['status'], detail['breaker']), (f't1.{TEMPERATURE}', 'Up', 'Closed'))
		self.assertEqual(self.client.get('/health/ghost').status_code, 404)

	def test_health_listing(self):
		self.fleet.spawn(_device('t1'))
		self.framework.monitor.run_cycle()
		document = self.framework.codec.decode_bytes(self.client.get('/health').content, 'application/json')
		self.assertIn(f't1.{TEMPERATURE}', [s['service_id'] for s in document.body.to_python()['services']])

	def test_telemetry(self):
		device = self.fleet.spawn(_device('t1'))
		self.framework.gateway.publish_upstream(TOKEN, 'weather.temperature.updated', device.telemetry(TEMPERATURE, 0))
		response = self.client.get('/telemetry/weather.temperature.updated')
		self.assertEqual(response.status_code, 200)
		self.assertEqual(json.loads(response.content)['body'], {'c': 21})
		self.assertEqual(self.client.get('/telemetry/weather.wind.updated').status_code, 404)


class FrameSessionTests(FrameworkTestCase):
	def setUp(self):
		super().setUp()
		self.pushed = []
		self.session = FrameSession(
			self.framework.gateway, self.framework.bus, self.framework.clock, self.framework.ids,
			sink=lambda frame: self.pushed.append(frame) or True,
		)
		self.addCleanup(self.session.close)

	def send(self, frame):
		return self.session.handle_line(json.dumps(frame).encode())

	def test_pub_reaches_subscriber(self):
		subscription = self.framework.bus.subscribe('weather.#')
		reply = self.send({'op': 'pub', 'topic': 'weather.temperature.updated', 'payload': {'c': 21}, 'token': TOKEN})
		self.assertEqual(reply['op'], 'ok')
		[event] = subscription.drain()
		self.assertEqual(event.delivery_id, reply['delivery_id'])
		self.assertEqual(event.payload.body.to_python(), {'c': 21})

	def test_malformed_lines(self):
		for line in (b'{not json', b'', b'[1, 2]', b'\xff\xfe', json.dumps({'op': 'nope'}).encode()):
			self.assertEqual(self.session.handle_line(line)['op'], 'err')

	def test_sub_evt_ack(self):
		reply = self.send({'op': 'sub', 'pattern': 'weather.*.updated', 'id': 's1'})
		self.assertEqual((reply['op'], reply['ref']), ('ok', 's1'))
		self.send({'op': 'pub', 'topic': 'weather.temperature.updated', 'payload': {'c': 1}})
		self.send({'op': 'pub', 'topic': 'weather.temperature.updated', 'payload': {'c': 2}})
		[event] = self.pushed
		self.assertEqual((event['op'], event['payload'], event['attempt']), ('evt', {'c': 1}, 1))
		acked = self.send({'op': 'ack', 'sub': reply['sub'], 'delivery_id': event['delivery_id']})
		self.assertEqual(acked['op'], 'ok')
		self.assertEqual([f['payload'] for f in self.pushed], [{'c': 1}, {'c': 2}])

	def test_unacked_event_redelivered(self):
		self.send({'op': 'sub', 'pattern': 'weather.#'})
		self.send({'op': 'pub', 'topic': 'weather.temperature.updated', 'payload': {}})
		self.framework.clock.advance(2000)
		self.framework.bus.tick()
		self.assertEqual([f['attempt'] for f in self.pushed], [1, 2])

	def test_token_required(self):
		self.session.require_token = True
		reply = self.send({'op': 'pub', 'topic': 'weather.temperature.updated', 'payload': {}})
		self.assertEqual((reply['op'], reply['kind']), ('err', 'UnauthorisedAccess'))

	def test_bad_token_rejected(self):
		reply = self.send({'op': 'pub', 'topic': 'weather.temperature.updated', 'payload': {}, 'token': 'wrong'})
		self.assertEqual(reply['kind'], 'UnauthorisedAccess')

	def test_hundred_readings_counted(self):
		subscription = self.framework.bus.subscribe('weather.#')
		for n in range(100):
			self.send({'op': 'pub', 'topic': 'weather.temperature.updated', 'payload': {'c': n}, 'device': 't1'})
		self.assertEqual(len(subscription.drain()), 100)
		self.assertEqual(len(self.framework.auditor.query(capability='weather.temperature.updated')), 100)


class FrameQueueTests(SimpleTestCase):
	def test_overflow_reported_once(self):
		queue = FrameQueue(2)
		self.assertTrue(queue.put({'op': 'evt', 'n': 1}))
		self.assertTrue(queue.put({'op': 'evt', 'n': 2}))
		self.assertFalse(queue.put({'op': 'evt', 'n': 3}))
		self.assertTrue(queue.put({'op': 'ok'}, force=True))
		frames = queue.drain()
		self.assertEqual([f['op'] for f in frames], ['err', 'evt', 'evt', 'ok'])
		self.assertEqual(queue.drain(), [])


class BindingTests(FrameworkTestCase):
	def pubsub(self, port=0):
		binding = PubSubBinding('127.0.0.1', port, self.framework, queue_size=16)
		self.addCleanup(binding.stop, 1000)
		return binding

	def test_start_is_idempotent(self):
		binding = self.pubsub()
		self.assertIs(binding.start(), BindingState.RUNNING)
		port = binding.address[1]
		self.assertIs(binding.start(), BindingState.RUNNING)
		self.assertEqual(binding.address[1], port)
		self.assertIs(binding.stop(), BindingState.STOPPED)
		self.assertIs(binding.stop(), BindingState.STOPPED)

	def test_busy_endpoint(self):
		taken = socket.socket()
		taken.bind(('127.0.0.1', 0))
		taken.listen(1)
		self.addCleanup(taken.close)
		with self.assertRaises(ContractViolation):
			self.pubsub(taken.getsockname()[1]).start()

	def test_one_binding_per_protocol(self):
		bindings = BindingSet()
		bindings.add(self.pubsub())
		with self.assertRaises(ContractViolation):
			bindings.add(self.pubsub())

	def test_frames_over_tcp(self):
		binding = self.pubsub()
		binding.start()
		conn = socket.create_connection(binding.address, timeout=5)
		self.addCleanup(conn.close)
		stream = conn.makefile('rb')
		conn.sendall(b'{"op":"sub","pattern":"weather.#","id":"s1"}\n')
		self.assertEqual(json.loads(stream.readline())['op'], 'ok')
		conn.sendall(b'garbage\n')
		self.assertEqual(json.loads(stream.readline())['op'], 'err')
		conn.sendall(b'{"op":"pub","topic":"weather.temperature.updated","payload":{"c":3}}\n')
		frames = [json.loads(stream.readline()) for _ in range(2)]
		self.assertEqual(sorted(f['op'] for f in frames), ['evt', 'ok'])

	def test_http_binding_serves_registry(self):
		binding = HttpBinding('127.0.0.1', 0, drain_timeout_ms=1000)
		self.addCleanup(binding.stop, 1000)
		binding.start()
		host, port = binding.address
		response = requests.get(f'http://{host}:{port}/registry', timeout=10)
		self.assertEqual(response.status_code, 200)
		self.assertEqual(response.json(), {'services': []})


class DeviceChannelTests(SimpleTestCase):
	def test_bus_attached_device(self):
		clock = VirtualClock()
		ids = SequentialIds(4)
		bus = EventBus(clock, ids)
		channel = DeviceChannel(bus, clock, ids)
		self.addCleanup(channel.close)
		fleet = SimFleet(ServiceRegistry(clock), EndpointDirectory(), clock, channel=channel)
		model = _device('b1').model_copy(update={'wire': 'PubSubWire'})
		fleet.spawn(model)
		endpoint = fleet.directory.get(f'b1.{TEMPERATURE}')
		self.assertTrue(endpoint.ping(0))
		request = CanonicalMessage(message_id='req-7', capability=TEMPERATURE, timestamp_ms=0, body=map_of({}))
		outcome = endpoint.invoke(fleet.codec.encode(request, WireFormat.JSON), 0, 1000)
		self.assertTrue(outcome.ok)
		self.assertEqual(outcome.end_ms, 200)
		self.assertEqual(fleet.codec.decode(outcome.response).correlation_id, 'req-7')

	def test_endpoint_rejects_ids_outside_topic_grammar(self):
		clock = VirtualClock()
		channel = DeviceChannel(EventBus(clock, SequentialIds(4)), clock)
		self.addCleanup(channel.close)
		self.assertEqual(channel.endpoint('remote-1').device_id, 'remote-1')
		for device_id in ('Remote', 'remote.1', '', 'x#'):
			with self.subTest(device_id=device_id), self.assertRaises(ContractViolation):
				channel.endpoint(device_id)


class HttpDrainTests(SimpleTestCase):
	"""Wall-clock framework: the device really takes 600ms to answer."""

	def setUp(self):
		self.framework = Framework(FrameworkConfig(tokens={TOKEN: 'alice'}), in_memory=True)
		previous = install(self.framework)
		self.addCleanup(install, previous)
		self.addCleanup(self.framework.close)
		fleet = SimFleet(self.framework.registry, self.framework.directory, self.framework.clock, self.framework.codec)
		fleet.spawn(_device('slow', delay=600))
		self.entered = threading.Event()
		endpoint = self.framework.directory.get(f'slow.{TEMPERATURE}')
		invoke = endpoint.invoke

		def traced(*args, **kwargs):
			self.entered.set()
			return invoke(*args, **kwargs)

		patcher = mock.patch.object(endpoint, 'invoke', side_effect=traced)
		patcher.start()
		self.addCleanup(patcher.stop)

	def test_stop_drains_in_flight_request(self):
		binding = HttpBinding('127.0.0.1', 0, drain_timeout_ms=5000)
		binding.start()
		self.addCleanup(binding.stop, 1000)
		host, port = binding.address
		message = CanonicalMessage(message_id='req-slow', capability=TEMPERATURE, timestamp_ms=0, body=map_of({}))
		body = self.framework.codec.encode(message, WireFormat.JSON).data
		replies = []

		def send():
			replies.append(requests.post(
				f'http://{host}:{port}/svc/{TEMPERATURE}', data=body, timeout=10,
				headers={'Content-Type': 'application/json', 'x-auth-token': TOKEN},
			))

		worker = threading.Thread(target=send)
		worker.start()
		self.assertTrue(self.entered.wait(5))
		self.assertIs(binding.stop(5000), BindingState.STOPPED)
		worker.join(10)
		[reply] = replies
		self.assertIn(reply.status_code, (200, 408))
		if reply.status_code == 200:
			decoded = self.framework.codec.decode_bytes(reply.content, WireFormat.JSON)
			self.assertEqual(decoded.body.to_python(), {'c': 21})
		else:
			self.assertEqual(reply.headers[FAULT_HEADER], 'TimingFault')
