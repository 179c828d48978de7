import random
from pathlib import Path

from django.test import SimpleTestCase

from core.descriptors import WireFormat
from core.errors import ContractViolation
from core.testing import random_message
from core.values import CanonicalMessage, floating, integer, list_of, map_of, string, to_canonical

from .services import Codec, EncodedMessage, decode, encode, transform
from .xmlform import escape_key, unescape_key

GOLDEN = Path(__file__).resolve().parent.parent / 'docs' / 'golden'
CAP = 'weather.temperature.read'


def _reading(**overrides):
	values = dict(
		message_id='msg-1',
		capability=CAP,
		timestamp_ms=1000,
		body=to_canonical({'c': 21, 'unit': 'C'}),
		headers={'trace': 't-1'},
	)
	values.update(overrides)
	return CanonicalMessage(**values)


class EncodeTests(SimpleTestCase):
	def test_json_matches_golden_file(self):
		enc = encode(_reading(), WireFormat.JSON)
		self.assertEqual(enc.data, (GOLDEN / 'reading.json').read_bytes().strip())
		self.assertEqual(enc.declared_capability.name, CAP)

	def test_xml_matches_golden_file(self):
		enc = encode(_reading(), WireFormat.XML)
		self.assertEqual(enc.data, (GOLDEN / 'reading.xml').read_bytes().strip())

	def test_int_body_json(self):
		enc = encode(_reading(body=integer(21)), 'json')
		self.assertIn(b'"body":21', enc.data)

	def test_int_body_xml(self):
		enc = encode(_reading(body=integer(21)), 'xml')
		self.assertIn(b'<body t="int">21</body></msg>', enc.data)

	def test_encode_is_pure(self):
		msg = _reading(body=to_canonical({'z': 1, 'a': [1.5, None, True]}))
		self.assertEqual(encode(msg, 'json').data, encode(msg, 'json').data)
		self.assertEqual(encode(msg, 'xml').data, encode(msg, 'xml').data)
		self.assertLess(encode(msg, 'json').data.index(b'"a"'), encode(msg, 'json').data.index(b'"z"'))

	def test_size_limit(self):
		codec = Codec(max_bytes=64)
		with self.assertRaises(ContractViolation):
			codec.encode(_reading(body=string('x' * 200)), 'json')


class RoundTripTests(SimpleTestCase):
	def test_random_trees_both_formats(self):
		rng = random.Random(20240501)
		for _ in range(1000):
			msg = random_message(rng)
			for fmt in (WireFormat.JSON, WireFormat.XML):
				self.assertEqual(decode(encode(msg, fmt)), msg)

	def test_cross_format(self):
		rng = random.Random(7)
		for _ in range(1000):
			msg = random_message(rng)
			as_json = encode(msg, WireFormat.JSON)
			as_xml = transform(as_json, WireFormat.XML)
			self.assertIs(as_xml.format, WireFormat.XML)
			self.assertEqual(decode(as_xml), msg)
			self.assertEqual(decode(transform(as_xml, WireFormat.JSON)), msg)

	def test_negative_zero_survives(self):
		msg = _reading(body=list_of([floating(-0.0), floating(0.0)]))
		for fmt in ('json', 'xml'):
			self.assertEqual(decode(encode(msg, fmt)), msg)

	def test_transform_same_format_is_byte_identical(self):
		enc = encode(_reading(), 'xml')
		self.assertEqual(transform(enc, 'xml').data, enc.data)

	def test_transform_rejects_garbage_even_for_same_format(self):
		enc = EncodedMessage(WireFormat.JSON, b'{"id":', CAP)
		with self.assertRaises(ContractViolation):
			transform(enc, WireFormat.JSON)


class DecodeTests(SimpleTestCase):
	def _xml(self, body):
		return EncodedMessage('xml', f'<msg id="m" cap="{CAP}" ts="1">{body}</msg>'.encode(), CAP)

	def test_json_golden_decodes(self):
		msg = decode(EncodedMessage('json', (GOLDEN / 'reading.json').read_bytes(), CAP))
		self.assertEqual(msg, _reading())

	def test_xml_int_with_text_rejected(self):
		with self.assertRaises(ContractViolation):
			decode(self._xml('<body t="int">abc</body>'))

	def test_xml_unknown_tag_rejected(self):
		with self.assertRaises(ContractViolation):
			decode(self._xml('<body t="decimal">1.0</body>'))

	def test_xml_doctype_rejected(self):
		data = b'<!DOCTYPE msg [<!ENTITY a "aaaa">]><msg id="m" cap="a.b" ts="1"><body t="str">&a;</body></msg>'
		with self.assertRaises(ContractViolation):
			decode(EncodedMessage('xml', data, 'a.b'))

	def test_xml_stray_text_rejected(self):
		documents = (
			'<body t="map"><c t="int">1</c>tail</body>',
			'<body t="map">lead<c t="int">1</c></body>',
			'<body t="list"><item t="int">1</item> </body>',
			'<body t="list">x</body>',
			'<body t="int">1</body>after',
			'<headers><h n="a">1</h>x</headers><body t="null"/>',
			' <body t="null"/>',
		)
		for body in documents:
			with self.subTest(body=body), self.assertRaises(ContractViolation):
				decode(self._xml(body))

	def test_xml_namespaces_rejected(self):
		documents = (
			f'<msg xmlns="urn:x" id="m" cap="{CAP}" ts="1"><body t="null"/></msg>',
			f'<msg id="m" cap="{CAP}" ts="1"><body t="map"><c xmlns="urn:x" t="int">1</c></body></msg>',
			f'<msg xmlns:p="urn:x" id="m" cap="{CAP}" ts="1"><body t="map"><p:c t="int">1</p:c></body></msg>',
			f'<msg xmlns:p="urn:x" id="m" cap="{CAP}" ts="1"><body t="int" p:x="1">1</body></msg>',
		)
		for data in documents:
			with self.subTest(data=data), self.assertRaises(ContractViolation):
				decode(EncodedMessage('xml', data.encode(), CAP))

	def test_xml_non_canonical_key_name_rejected(self):
		with self.assertRaises(ContractViolation):
			decode(self._xml('<body t="map"><_x61 t="int">1</_x61></body>'))
		self.assertEqual(decode(self._xml('<body t="map"><a t="int">1</a></body>')).body, map_of({'a': integer(1)}))

	def test_json_nan_rejected(self):
		data = b'{"id":"m","cap":"a.b","ts":1,"body":NaN}'
		with self.assertRaises(ContractViolation):
			decode(EncodedMessage('json', data, 'a.b'))

	def test_xml_nan_rejected(self):
		with self.assertRaises(ContractViolation):
			decode(self._xml('<body t="float">nan</body>'))

	def test_json_duplicate_key_rejected(self):
		data = b'{"id":"m","cap":"a.b","ts":1,"body":{"a":1,"a":2}}'
		with self.assertRaises(ContractViolation):
			decode(EncodedMessage('json', data, 'a.b'))

	def test_declared_capability_must_match(self):
		enc = encode(_reading(), 'json')
		with self.assertRaises(ContractViolation):
			decode(EncodedMessage(enc.format, enc.data, 'weather.humidity.read'))

	def test_deep_nesting_rejected(self):
		data = b'{"id":"m","cap":"a.b","ts":1,"body":' + b'[' * 5000 + b']' * 5000 + b'}'
		with self.assertRaises(ContractViolation):
			decode(EncodedMessage('json', data, 'a.b'))

	def test_fuzzed_bytes_never_crash(self):
		rng = random.Random(99)
		seeds = [(GOLDEN / 'reading.json').read_bytes(), (GOLDEN / 'reading.xml').read_bytes()]
		for index in range(3000):
			fmt = 'json' if index % 2 == 0 else 'xml'
			data = bytearray(seeds[index % 2])
			for _ in range(rng.randint(1, 6)):
				op = rng.randrange(3)
				pos = rng.randrange(len(data) or 1)
				if op == 0 and data:
					data[pos] = rng.randrange(256)
				elif op == 1:
					data.insert(pos, rng.randrange(256))
				elif data:
					del data[pos:pos + rng.randint(1, 10)]
			try:
				msg = decode(EncodedMessage(fmt, bytes(data), CAP))
			except ContractViolation:
				continue
			self.assertIsInstance(msg, CanonicalMessage)


class KeyEscapingTests(SimpleTestCase):
	def test_safe_names_unchanged(self):
		self.assertEqual(escape_key('temperature'), 'temperature')
		self.assertEqual(escape_key('a-b.c_d'), 'a-b.c_d')

	def test_unsafe_names_escaped(self):
		self.assertEqual(escape_key('1a'), '_x31a')
		self.assertEqual(escape_key('a b'), 'a_x20b')
		self.assertEqual(escape_key('_x'), '_x5Fx')
		self.assertEqual(escape_key('ç'), '_xC3_xA7')

	def test_escape_round_trip(self):
		for key in ('1a', 'a b', '_x', '_x41', 'ç€', 'a:b', '-', 'x_'):
			self.assertEqual(unescape_key(escape_key(key)), key)

	def test_map_key_escaping_in_document(self):
		msg = _reading(body=map_of({'1st reading': integer(1)}))
		enc = encode(msg, 'xml')
		self.assertIn(b'<_x31st_x20reading t="int">1</_x31st_x20reading>', enc.data)
		self.assertEqual(decode(enc), msg)
