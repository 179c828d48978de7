import json
import re
import socket
import tempfile
import threading
from io import StringIO
from pathlib import Path
from unittest import mock

import requests
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from adapters.bindings import HttpBinding
from codec.services import Codec, default_codec
from core.clock import VirtualClock
from core.conf import FrameworkConfig
from core.descriptors import WireFormat
from core.ids import SequentialIds
from core.runtime import Framework, get_framework, install
from core.values import CanonicalMessage, map_of
from sim.devices import SimFleet
from sim.runner import REPORT_CAPABILITY
from sim.scenario import CapabilityModel, DeviceModel, OutputModel

from .client import ASSERTION_FAILED, BIND_ERROR, REQUEST_ERROR, USAGE_ERROR

TOKEN = 'tok-alice'
SCENARIOS = Path(__file__).resolve().parent.parent / 'sim' / 'scenarios'


def _device(device_id, capability, field, value, delay=50):
	return DeviceModel(
		device_id=device_id,
		capabilities=[CapabilityModel(capability=capability, delay_ms=delay, output=OutputModel(field=field, value=value))],
	)


def _write(directory, name, content):
	path = Path(directory) / name
	path.write_text(content if isinstance(content, str) else json.dumps(content), encoding='utf-8')
	return str(path)


def _free_port():
	sock = socket.socket()
	sock.bind(('127.0.0.1', 0))
	port = sock.getsockname()[1]
	sock.close()
	return port


class ExitCodeTests(SimpleTestCase):
	def test_exit_codes_are_stable(self):
		self.assertEqual(
			(REQUEST_ERROR, USAGE_ERROR, BIND_ERROR, ASSERTION_FAILED),
			(1, 2, 3, 4),
		)


class LiveInstanceTestCase(SimpleTestCase):
	"""A framework with two devices served over a real HTTP binding."""

	def setUp(self):
		self.framework = Framework(
			FrameworkConfig(tokens={TOKEN: 'alice'}), VirtualClock(), SequentialIds(5), in_memory=True,
		)
		previous = install(self.framework)
		self.addCleanup(install, previous)
		self.addCleanup(self.framework.close)
		fleet = SimFleet(self.framework.registry, self.framework.directory, self.framework.clock, self.framework.codec)
		fleet.spawn(_device('thermo', 'weather.temperature.read', 'c', 21))
		fleet.spawn(_device('hygro', 'weather.humidity.read', 'rh', 40, delay=80))
		binding = HttpBinding('127.0.0.1', 0, drain_timeout_ms=1000)
		binding.start()
		self.addCleanup(binding.stop, 1000)
		self.url = 'http://%s:%s' % binding.address
		self.tmp = tempfile.TemporaryDirectory()
		self.addCleanup(self.tmp.cleanup)

	def run_command(self, name, *args, **options):
		out = StringIO()
		options.setdefault('url', self.url)
		options.setdefault('token', TOKEN)
		call_command(name, *args, stdout=out, **options)
		return out.getvalue()

	def assertFails(self, returncode, prefix, name, *args, **options):
		with self.assertRaises(CommandError) as caught:
			self.run_command(name, *args, **options)
		self.assertEqual(caught.exception.returncode, returncode)
		self.assertTrue(str(caught.exception).startswith(prefix), str(caught.exception))


class RegistryCommandTests(LiveInstanceTestCase):
	def test_ls_lists_services(self):
		out = self.run_command('registry', 'ls')
		self.assertIn('thermo.weather.temperature.read', out)
		self.assertIn('hygro.weather.humidity.read', out)

	def test_ls_filters_by_capability(self):
		out = self.run_command('registry', 'ls', capability='weather.humidity.read')
		self.assertNotIn('thermo', out)
		self.assertIn('hygro.weather.humidity.read', out)

	def test_json_output_is_jsonform(self):
		message = default_codec.decode_bytes(self.run_command('registry', 'ls', as_json=True).encode('utf-8'), 'json')
		services = message.body.to_python()['services']
		self.assertIn('thermo.weather.temperature.read', [entry['descriptor']['service_id'] for entry in services])

	def test_unreachable_instance(self):
		self.assertFails(REQUEST_ERROR, 'CrashFailure', 'registry', 'ls', url=f'http://127.0.0.1:{_free_port()}')


class CallCommandTests(LiveInstanceTestCase):
	def test_xml_call(self):
		out = self.run_command('call', 'weather.temperature.read', format='xml')
		self.assertTrue(out.lstrip().startswith('<'))
		message = default_codec.decode_bytes(out.encode('utf-8'), 'xml')
		self.assertEqual(message.body.to_python(), {'c': 21})

	def test_json_flag_forces_jsonform(self):
		out = self.run_command('call', 'weather.temperature.read', format='xml', as_json=True)
		message = default_codec.decode_bytes(out.encode('utf-8'), 'json')
		self.assertEqual(message.capability.name, 'weather.temperature.read')

	def test_error_message_starts_with_kind(self):
		self.assertFails(REQUEST_ERROR, 'NotFound', 'call', 'weather.pressure.read')
		self.assertFails(REQUEST_ERROR, 'UnauthorisedAccess', 'call', 'weather.temperature.read', token='nope')
		self.assertFails(REQUEST_ERROR, 'TimingFault', 'call', 'weather.temperature.read', deadline=10)

	def test_usage_errors(self):
		self.assertFails(USAGE_ERROR, '--payload', 'call', 'weather.temperature.read', payload='{oops')
		self.assertFails(USAGE_ERROR, '', 'call', 'Not A Capability')
		self.assertFails(USAGE_ERROR, '--deadline', 'call', 'weather.temperature.read', deadline=0)


class CompositionCommandTests(LiveInstanceTestCase):
	COMPOSITE = {
		'capability': 'weather.report',
		'members': ['weather.temperature.read', 'weather.humidity.read'],
		'merge': [{'member': 0, 'from': 'c', 'to': 'temperature'}, {'member': 1, 'from': 'rh', 'to': 'humidity'}],
	}

	def test_compose_then_ls(self):
		path = _write(self.tmp.name, 'weather_report.json', self.COMPOSITE)
		self.assertIn('weather.report', self.run_command('compose', path))
		self.assertIn('composite weather.report', self.run_command('registry', 'ls'))
		out = self.run_command('call', 'weather.report')
		self.assertEqual(
			default_codec.decode_bytes(out.encode('utf-8'), 'json').body.to_python(),
			{'temperature': 21, 'humidity': 40},
		)

	def test_compose_needs_token(self):
		path = _write(self.tmp.name, 'weather_report.json', self.COMPOSITE)
		self.assertFails(REQUEST_ERROR, 'UnauthorisedAccess', 'compose', path, token='')

	def test_invalid_composite(self):
		path = _write(self.tmp.name, 'bad.json', {'capability': 'weather.report', 'members': ['weather.temperature.read']})
		self.assertFails(REQUEST_ERROR, 'ContractViolation', 'compose', path)

	def test_unreadable_files(self):
		self.assertFails(USAGE_ERROR, '', 'compose', str(Path(self.tmp.name) / 'missing.json'))
		path = _write(self.tmp.name, 'broken.json', '{\n  "members": [\n')
		self.assertFails(USAGE_ERROR, f'{path}:', 'compose', path)

	def test_split(self):
		path = _write(self.tmp.name, 'split.json', {
			'coarse': 'weather.all.read',
			'fines': ['weather.temperature.read', 'weather.humidity.read'],
			'merge': [{'member': 0, 'from': 'c'}, {'member': 1, 'from': 'rh'}],
		})
		out = self.run_command('split', path, as_json=True)
		message = default_codec.decode_bytes(out.encode('utf-8'), 'json')
		self.assertEqual(message.body.to_python()['coarse'], 'weather.all.read')
		self.assertEqual([mapping.coarse.name for mapping in self.framework.gateway.splits()], ['weather.all.read'])


class AuditCommandTests(LiveInstanceTestCase):
	def test_tail_shows_requests(self):
		self.run_command('call', 'weather.temperature.read')
		self.assertFails(REQUEST_ERROR, 'NotFound', 'call', 'weather.pressure.read')
		lines = self.run_command('audit', 'tail').splitlines()
		self.assertEqual(len(lines), 2)
		self.assertIn('ok', lines[0])
		self.assertIn('NotFound', lines[1])

	def test_tail_json_lines_parse(self):
		self.run_command('call', 'weather.temperature.read')
		self.run_command('call', 'weather.humidity.read')
		lines = self.run_command('audit', 'tail', as_json=True, limit=1).splitlines()
		self.assertEqual(len(lines), 2)
		records = [default_codec.decode_bytes(line.encode('utf-8'), 'json').body.to_python() for line in lines]
		self.assertEqual([record['seq'] for record in records], [1, 2])

	def test_tail_after(self):
		self.run_command('call', 'weather.temperature.read')
		self.assertEqual(self.run_command('audit', 'tail', after=1), '')


class ScenarioCommandTests(SimpleTestCase):
	def run_command(self, *args, **options):
		out = StringIO()
		call_command('scenario', *args, stdout=out, **options)
		return out.getvalue()

	def test_same_seed_same_output(self):
		path = str(SCENARIOS / 'latency.json')
		first = self.run_command('run', path, seed=7)
		self.assertEqual(first, self.run_command('run', path, seed=7))
		self.assertIn('chained', first)

	def test_json_report(self):
		out = self.run_command('run', str(SCENARIOS / 'latency.json'), as_json=True)
		message = Codec(max_bytes=64 * 1024 * 1024).decode_bytes(out.encode('utf-8'), 'json')
		self.assertEqual(message.capability.name, REPORT_CAPABILITY)

	def test_failed_assertion_exit_code(self):
		with tempfile.TemporaryDirectory() as tmp:
			path = _write(tmp, 'absent.json', {
				'assertions': [{'type': 'registry', 'capability': 'lab.ghost.read', 'present': True}],
			})
			with self.assertRaises(CommandError) as caught:
				self.run_command('run', path)
		self.assertEqual(caught.exception.returncode, ASSERTION_FAILED)

	def test_invalid_scenario_is_usage_error(self):
		with tempfile.TemporaryDirectory() as tmp:
			path = _write(tmp, 'bad.json', {'colour': 'blue'})
			with self.assertRaises(CommandError) as caught:
				self.run_command('run', path)
		self.assertEqual(caught.exception.returncode, USAGE_ERROR)
		self.assertIn('unknown key', str(caught.exception))

	def test_run_needs_file(self):
		with self.assertRaises(CommandError) as caught:
			self.run_command('run')
		self.assertEqual(caught.exception.returncode, USAGE_ERROR)

	def test_schema(self):
		schema = json.loads(self.run_command('schema'))
		self.assertIn('devices', schema['properties'])
		self.assertIn('workload', schema['properties'])

	def test_schema_as_jsonform(self):
		out = self.run_command('schema', as_json=True)
		message = default_codec.decode_bytes(out.encode('utf-8'), 'json')
		self.assertEqual(message.capability.name, 'cli.scenario.schema')
		self.assertEqual(message.body.to_python(), json.loads(self.run_command('schema')))


class ServeCommandTests(SimpleTestCase):
	def setUp(self):
		self.tmp = tempfile.TemporaryDirectory()
		self.addCleanup(self.tmp.cleanup)

	def serve(self, config_text, *args, **options):
		out = StringIO()
		path = _write(self.tmp.name, 'iotframe.toml', config_text)
		call_command('serve', *args, config=path, stdout=out, **options)
		return out.getvalue()

	def test_malformed_config(self):
		with self.assertRaises(CommandError) as caught:
			self.serve('[http]\nport = \n')
		self.assertEqual(caught.exception.returncode, USAGE_ERROR)
		self.assertIn('line 2', str(caught.exception))

	def test_unknown_key(self):
		with self.assertRaises(CommandError) as caught:
			self.serve('[http]\ncolour = "blue"\n')
		self.assertEqual(caught.exception.returncode, USAGE_ERROR)
		self.assertIn('colour', str(caught.exception))

	def test_corrupt_registry_snapshot(self):
		snapshot = _write(self.tmp.name, 'registry.json', '{not json')
		audit = Path(self.tmp.name) / 'audit'
		with self.assertRaises(CommandError) as caught:
			self.serve(f'[registry]\nsnapshot_path = "{snapshot}"\n\n[auditor]\ndirectory = "{audit}"\n', no_pubsub=True)
		self.assertEqual(caught.exception.returncode, USAGE_ERROR)
		self.assertIn('ContractViolation: corrupt registry snapshot', str(caught.exception))

	def test_port_in_use(self):
		taken = socket.socket()
		taken.bind(('127.0.0.1', 0))
		taken.listen(1)
		self.addCleanup(taken.close)
		with self.assertRaises(CommandError) as caught:
			self.serve('', http_port=taken.getsockname()[1], no_pubsub=True)
		self.assertEqual(caught.exception.returncode, BIND_ERROR)

	def test_clean_shutdown_on_interrupt(self):
		with mock.patch('cli.management.commands.serve.time.sleep', side_effect=KeyboardInterrupt):
			out = self.serve('[http]\nhost = "127.0.0.1"\n', http_port=0, pubsub_port=0)
		self.assertIn('RequestWire', out)
		self.assertIn('PubSubWire', out)
		self.assertIn('Encerrado', out)

	def test_interrupt_during_in_flight_request(self):
		out = StringIO()
		entered = threading.Event()
		replies, workers = [], []

		def send(url, body):
			replies.append(requests.post(
				url, data=body, timeout=10, headers={'Content-Type': 'application/json', 'x-auth-token': TOKEN},
			))

		def interrupt_mid_request(_seconds):
			framework = get_framework()
			fleet = SimFleet(framework.registry, framework.directory, framework.clock, framework.codec)
			fleet.spawn(_device('slow', 'weather.temperature.read', 'c', 21, delay=600))
			endpoint = framework.directory.get('slow.weather.temperature.read')
			invoke = endpoint.invoke

			def traced(*args, **kwargs):
				entered.set()
				return invoke(*args, **kwargs)

			endpoint.invoke = traced
			port = re.search(r'RequestWire em [\d.]+:(\d+)', out.getvalue()).group(1)
			message = CanonicalMessage(
				message_id='req-slow', capability='weather.temperature.read', timestamp_ms=0, body=map_of({}),
			)
			worker = threading.Thread(target=send, args=(
				f'http://127.0.0.1:{port}/svc/weather.temperature.read',
				framework.codec.encode(message, WireFormat.JSON).data,
			))
			worker.start()
			workers.append(worker)
			entered.wait(5)
			raise KeyboardInterrupt

		path = _write(self.tmp.name, 'iotframe.toml', f'[http]\nhost = "127.0.0.1"\n\n[tokens]\n"{TOKEN}" = "alice"\n')
		with mock.patch('cli.management.commands.serve.time.sleep', side_effect=interrupt_mid_request):
			call_command('serve', config=path, http_port=0, no_pubsub=True, stdout=out)
		workers[0].join(10)
		self.assertTrue(entered.is_set())
		[reply] = replies
		self.assertEqual(reply.status_code, 200)
		self.assertEqual(json.loads(reply.content)['body'], {'c': 21})
		self.assertIn('Encerrado', out.getvalue())
