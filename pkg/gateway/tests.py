import threading

from django.test import SimpleTestCase

from assembler.services import ServiceAssembler
from assembler.specs import CompositeSpec, MergeRule, SplitMapping
from auditor.services import AuditLog
from bus.services import EventBus
from codec.services import Codec
from core.clock import VirtualClock
from core.descriptors import ServiceClass, WireFormat
from core.errors import ContractViolation, ErrorKind, NotFound, TimingFault, UnauthorisedAccess
from core.ids import SequentialIds
from core.values import CanonicalMessage, map_of
from monitor.services import ServiceMonitor
from registry.endpoints import EndpointDirectory
from registry.services import ServiceRegistry
from sim.devices import SimFleet
from sim.scenario import CapabilityModel, DeviceModel, OutputModel

from .services import BUILTIN_SERVICES, ConsumerContract, Gateway, TokenTable

TEMPERATURE = 'weather.temperature.read'
HUMIDITY = 'weather.humidity.read'
REPORT = 'weather.report'
TOKEN = 'tok-alice'


def _device(device_id, capability, delay=200, field='value', value=1, fmt='json', token='', extra=None):
	return DeviceModel(
		device_id=device_id,
		token=token,
		capabilities=[CapabilityModel(
			capability=capability,
			delay_ms=delay,
			output=OutputModel(field=field, value=value, extra=extra or {}),
			format=fmt,
		)],
	)


class TokenTableTests(SimpleTestCase):
	def setUp(self):
		self.table = TokenTable({TOKEN: 'alice', 'tok-bob': 'bob'})

	def test_configured_token(self):
		self.assertEqual(self.table.authenticate(TOKEN), 'alice')
		self.assertEqual(self.table.authenticate('tok-bob'), 'bob')

	def test_unknown_token(self):
		with self.assertRaises(UnauthorisedAccess):
			self.table.authenticate('tok-mallory')

	def test_empty_token(self):
		for token in ('', None):
			with self.assertRaises(UnauthorisedAccess):
				self.table.authenticate(token)


class ConsumerContractTests(SimpleTestCase):
	def test_deadline_must_be_positive(self):
		with self.assertRaises(ContractViolation):
			ConsumerContract(TEMPERATURE, TOKEN, deadline_ms=0)

	def test_capability_must_parse(self):
		with self.assertRaises(ContractViolation):
			ConsumerContract('Weather..read', TOKEN)


class GatewayTestCase(SimpleTestCase):
	def setUp(self):
		self.clock = VirtualClock()
		self.ids = SequentialIds(3)
		self.codec = Codec()
		self.registry = ServiceRegistry(self.clock)
		self.directory = EndpointDirectory()
		self.bus = EventBus(self.clock, self.ids)
		self.monitor = ServiceMonitor(self.registry, self.directory, self.bus, self.clock, self.ids)
		self.assembler = ServiceAssembler(self.registry, self.directory, self.monitor, self.codec, self.clock, self.ids)
		self.addCleanup(self.assembler.close)
		self.auditor = AuditLog()
		self.addCleanup(self.auditor.close)
		self.gateway = Gateway(
			self.registry, self.assembler, self.monitor, self.auditor, self.bus,
			{TOKEN: 'alice'}, self.codec, self.clock, self.ids,
		)
		self.fleet = SimFleet(self.registry, self.directory, self.clock, self.codec)

	def payload(self, capability, fmt=WireFormat.JSON, message_id=None):
		message = CanonicalMessage(
			message_id=message_id or self.ids.new('req'),
			capability=capability,
			timestamp_ms=self.clock.now_ms(),
			body=map_of({}),
		)
		return message, self.codec.encode(message, fmt)

	def contract(self, capability, fmt=WireFormat.JSON, token=TOKEN, deadline=1000):
		return ConsumerContract(capability, token, fmt, deadline)

	def report_fleet(self):
		self.fleet.spawn(_device('t1', TEMPERATURE, field='c', value=21))
		self.fleet.spawn(_device('h1', HUMIDITY, field='rh', value=40))


class HandleRequestTests(GatewayTestCase):
	def test_json_provider_xml_consumer(self):
		self.fleet.spawn(_device('t1', TEMPERATURE, field='c', value=21, extra={'unit': 'C'}))
		request, payload = self.payload(TEMPERATURE)
		response = self.gateway.handle_request(self.contract(TEMPERATURE, WireFormat.XML), payload)
		self.assertIs(response.format, WireFormat.XML)
		self.assertTrue(response.data.startswith(b'<msg '))
		reply = self.codec.decode(response)
		self.assertEqual(reply.body.to_python(), {'c': 21, 'unit': 'C'})
		self.assertEqual(reply.correlation_id, request.message_id)

	def test_xml_payload_json_provider(self):
		self.fleet.spawn(_device('t1', TEMPERATURE, field='c', value=21))
		request, payload = self.payload(TEMPERATURE, WireFormat.XML)
		reply = self.codec.decode(self.gateway.handle_request(self.contract(TEMPERATURE), payload))
		self.assertEqual(reply.body.to_python(), {'c': 21})
		self.assertEqual(reply.correlation_id, request.message_id)

	def test_missing_token(self):
		self.fleet.spawn(_device('t1', TEMPERATURE))
		_, payload = self.payload(TEMPERATURE)
		with self.assertRaises(UnauthorisedAccess) as caught:
			self.gateway.handle_request(self.contract(TEMPERATURE, token=''), payload)
		self.assertIsNotNone(caught.exception.transaction_id)
		[record] = self.auditor.query(transaction_id=caught.exception.transaction_id)
		self.assertEqual(record.final_outcome, ErrorKind.UNAUTHORISED_ACCESS.value)
		self.assertEqual(record.hops, ())

	def test_unknown_capability(self):
		_, payload = self.payload('weather.pressure.read')
		with self.assertRaises(NotFound):
			self.gateway.handle_request(self.contract('weather.pressure.read'), payload)

	def test_payload_for_another_capability(self):
		self.fleet.spawn(_device('t1', TEMPERATURE))
		_, payload = self.payload(HUMIDITY)
		with self.assertRaises(ContractViolation):
			self.gateway.handle_request(
				self.contract(TEMPERATURE),
				payload.__class__(payload.format, payload.data, TEMPERATURE),
			)

	def test_deadline_exceeded(self):
		self.fleet.spawn(_device('t1', TEMPERATURE, delay=1500))
		_, payload = self.payload(TEMPERATURE)
		served = self.gateway.serve(self.contract(TEMPERATURE, deadline=1000), payload)
		self.assertIsInstance(served.error, TimingFault)
		self.assertEqual(served.latency_ms, 1000)
		[record] = self.auditor.query(transaction_id=served.transaction_id)
		self.assertEqual(record.total_ms, 1000)

	def test_one_audit_record_per_request(self):
		self.fleet.spawn(_device('t1', TEMPERATURE))
		for _ in range(5):
			_, payload = self.payload(TEMPERATURE)
			self.gateway.handle_request(self.contract(TEMPERATURE), payload)
		records = self.auditor.query(capability=TEMPERATURE)
		self.assertEqual(len(records), 5)
		self.assertEqual(len({r.transaction_id for r in records}), 5)
		self.assertTrue(all(r.consumer_id == 'alice' and r.total_ms == 200 for r in records))


class NonFunctionalTests(GatewayTestCase):
	def test_builtin_services_registered_but_hidden(self):
		self.gateway.ensure_builtin_services()
		self.gateway.ensure_builtin_services()
		listed = self.registry.discover('audit.append', expose_nonfunctional=True)
		self.assertEqual([d.service_class for d in listed], [ServiceClass.NON_FUNCTIONAL])
		self.assertEqual(self.registry.discover('audit.append'), [])

	def test_never_routable(self):
		self.gateway.ensure_builtin_services()
		for _, capability in BUILTIN_SERVICES:
			_, payload = self.payload(capability)
			with self.assertRaises(NotFound):
				self.gateway.handle_request(self.contract(capability), payload)


class SplitTests(GatewayTestCase):
	def test_self_referential_split(self):
		with self.assertRaises(ContractViolation):
			self.gateway.register_split(SplitMapping(REPORT, (REPORT, HUMIDITY), ()))

	def test_split_keeps_consumer_contract(self):
		self.report_fleet()
		self.fleet.spawn(_device('r1', REPORT, field='temperature', value=21, extra={'humidity': 40}))
		contract = self.contract(REPORT, WireFormat.XML)
		_, payload = self.payload(REPORT, message_id='req-golden')
		before = self.codec.decode(self.gateway.handle_request(contract, payload))
		self.gateway.register_split(SplitMapping(
			REPORT,
			(TEMPERATURE, HUMIDITY),
			(MergeRule(0, 'c', 'temperature'), MergeRule(1, 'rh', 'humidity')),
		))
		served = self.gateway.serve(contract, payload)
		self.assertEqual(served.path, 'split')
		after = self.codec.decode(served.response)
		self.assertEqual(after.body, before.body)
		self.assertEqual(after.correlation_id, 'req-golden')
		[record] = self.auditor.query(transaction_id=served.transaction_id)
		self.assertEqual(sorted(h.capability for h in record.hops), [HUMIDITY, TEMPERATURE])

	def test_replacing_mapping_under_load(self):
		self.report_fleet()
		first = SplitMapping(REPORT, (TEMPERATURE, HUMIDITY), (MergeRule(0, 'c', 't'),))
		second = SplitMapping(REPORT, (TEMPERATURE, HUMIDITY), (MergeRule(1, 'rh', 'h'),))
		self.gateway.register_split(first)
		shapes = []
		lock = threading.Lock()

		def consume():
			for _ in range(25):
				_, payload = self.payload(REPORT)
				body = self.codec.decode(self.gateway.handle_request(self.contract(REPORT), payload)).body
				with lock:
					shapes.append(tuple(sorted(body.to_python())))

		def flip():
			for n in range(50):
				self.gateway.register_split(second if n % 2 == 0 else first)

		threads = [threading.Thread(target=consume) for _ in range(4)] + [threading.Thread(target=flip)]
		for thread in threads:
			thread.start()
		for thread in threads:
			thread.join()
		self.assertEqual(len(shapes), 100)
		self.assertLessEqual(set(shapes), {('t',), ('h',)})

	def test_removed_split_falls_back(self):
		self.report_fleet()
		self.gateway.register_split(SplitMapping(REPORT, (TEMPERATURE, HUMIDITY), ()))
		self.assertTrue(self.gateway.remove_split(REPORT))
		_, payload = self.payload(REPORT)
		with self.assertRaises(NotFound):
			self.gateway.handle_request(self.contract(REPORT), payload)


class CompositeTests(GatewayTestCase):
	def setUp(self):
		super().setUp()
		self.report_fleet()
		self.spec = CompositeSpec(
			REPORT, (TEMPERATURE, HUMIDITY), (MergeRule(0, 'c', 'temperature'), MergeRule(1, 'rh', 'humidity')),
		)
		self.registry.register_composite(self.spec)

	def call_report(self):
		_, payload = self.payload(REPORT)
		return self.gateway.serve(self.contract(REPORT), payload)

	def test_registered_spec_is_callable(self):
		served = self.call_report()
		self.assertEqual(served.path, 'composite')
		self.assertEqual(served.reply.body.to_python(), {'humidity': 40, 'temperature': 21})
		self.assertEqual(served.latency_ms, 200)

	def test_promoted_after_threshold(self):
		for _ in range(9):
			self.call_report()
		self.assertEqual(self.registry.discover(REPORT), [])
		before = self.call_report()
		[promoted] = self.registry.discover(REPORT)
		self.assertTrue(promoted.is_composite)
		after = self.call_report()
		self.assertEqual(after.reply.body, before.reply.body)

	def test_spread_requests_not_promoted(self):
		for _ in range(10):
			self.call_report()
			self.clock.advance(12_000)
		self.assertEqual(self.registry.discover(REPORT), [])


class UpstreamTests(GatewayTestCase):
	def setUp(self):
		super().setUp()
		self.device = self.fleet.spawn(_device('t1', TEMPERATURE, field='c', value=21, token=TOKEN))

	def test_publish_reaches_subscriber(self):
		subscription = self.bus.subscribe('weather.#')
		message = self.device.telemetry(TEMPERATURE, 0)
		delivery_id = self.gateway.publish_upstream(TOKEN, 'weather.temperature.updated', message)
		[event] = subscription.drain()
		self.assertEqual(event.delivery_id, delivery_id)
		self.assertEqual(self.gateway.latest('weather.temperature.updated'), message)
		[record] = self.auditor.query(capability='weather.temperature.updated')
		self.assertEqual((record.kind, record.final_outcome, record.consumer_id), ('publish', 'ok', 't1'))

	def test_hundred_publishes_audited(self):
		for n in range(100):
			self.gateway.publish_upstream(TOKEN, 'weather.temperature.updated', self.device.telemetry(TEMPERATURE, n))
		self.assertEqual(len(self.auditor.query(capability='weather.temperature.updated')), 100)

	def test_unauthorised_publish_is_classified(self):
		message = self.device.telemetry(TEMPERATURE, 0)
		with self.assertRaises(UnauthorisedAccess):
			self.gateway.publish_upstream('', 'weather.temperature.updated', message)
		state = self.monitor.state(f't1.{TEMPERATURE}')
		self.assertIs(state.last_classification, ErrorKind.UNAUTHORISED_ACCESS)
		[record] = self.auditor.query(capability='weather.temperature.updated')
		self.assertEqual(record.final_outcome, 'UnauthorisedAccess')
		with self.assertRaises(NotFound):
			self.gateway.latest('weather.temperature.updated')

	def test_wildcard_topic_rejected(self):
		with self.assertRaises(ContractViolation):
			self.gateway.publish_upstream(TOKEN, 'weather.#', self.device.telemetry(TEMPERATURE, 0))
