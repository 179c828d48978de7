import random

from django.test import SimpleTestCase

from core.clock import VirtualClock
from core.errors import ContractViolation, NotFound
from core.ids import SequentialIds
from core.values import CanonicalMessage, integer

from .services import DEADLETTER_TOPIC, BusEvent, DedupConsumer, EventBus, topic_matches

TOPIC = 'weather.temperature.updated'


def _message(n=21):
	return CanonicalMessage(message_id=f'msg-{n}', capability='weather.temperature.read', timestamp_ms=0, body=integer(n))


class BusTestCase(SimpleTestCase):
	def setUp(self):
		self.clock = VirtualClock()
		self.bus = EventBus(self.clock, SequentialIds(1))


class PublishTests(BusTestCase):
	def test_single_subscriber_gets_attempt_one(self):
		sub = self.bus.subscribe(TOPIC)
		delivery_id = self.bus.publish(TOPIC, _message())
		event = sub.poll()
		self.assertEqual((event.delivery_id, event.attempt, event.topic), (delivery_id, 1, TOPIC))
		self.assertIsNone(sub.poll())

	def test_no_subscribers(self):
		self.assertTrue(self.bus.publish(TOPIC, _message()))

	def test_wildcard_publish_rejected(self):
		for topic in ('weather.*', 'weather.#', '', 'Weather.x'):
			with self.assertRaises(ContractViolation):
				self.bus.publish(topic, _message())

	def test_fan_out_to_every_subscriber(self):
		first, second = self.bus.subscribe(TOPIC), self.bus.subscribe('weather.#')
		for n in range(10):
			self.bus.publish(TOPIC, _message(n))
		for sub in (first, second):
			received = 0
			while (event := sub.poll()) is not None:
				received += 1
				self.bus.ack(sub, event.delivery_id)
			self.assertEqual(received, 10)


class PatternTests(SimpleTestCase):
	def test_matching_rules(self):
		cases = [
			('weather.#', TOPIC, True),
			('weather.*', TOPIC, False),
			('weather.*', 'weather.alert', True),
			('weather.temperature.*', TOPIC, True),
			('#', 'bus.deadletter', True),
			(TOPIC, TOPIC, True),
			(TOPIC, 'weather.temperature', False),
		]
		for pattern, topic, expected in cases:
			self.assertEqual(topic_matches(pattern, topic), expected, (pattern, topic))

	def test_malformed_patterns(self):
		bus = EventBus(VirtualClock())
		for pattern in ('', '*', 'a.*.b', 'a.#.b', 'A.b', 'a..b'):
			with self.assertRaises(ContractViolation):
				bus.subscribe(pattern)


class AckTests(BusTestCase):
	def test_ack_stops_redelivery(self):
		sub = self.bus.subscribe(TOPIC)
		self.bus.publish(TOPIC, _message())
		event = sub.poll()
		self.bus.ack(sub, event.delivery_id)
		self.clock.advance(10_000)
		self.assertEqual(self.bus.tick(), 0)
		self.assertIsNone(sub.poll())

	def test_duplicate_ack_not_found(self):
		sub = self.bus.subscribe(TOPIC)
		self.bus.publish(TOPIC, _message())
		event = sub.poll()
		self.bus.ack(sub, event.delivery_id)
		with self.assertRaises(NotFound):
			self.bus.ack(sub, event.delivery_id)

	def test_withheld_ack_redelivers_then_dead_letters(self):
		dead = self.bus.subscribe(DEADLETTER_TOPIC)
		sub = self.bus.subscribe(TOPIC)
		delivery_id = self.bus.publish(TOPIC, _message())
		attempts = [sub.poll().attempt]
		for _ in range(4):
			self.clock.advance(1999)
			self.bus.tick()
			self.assertIsNone(sub.poll())
			self.clock.advance(1)
			self.bus.tick()
			event = sub.poll()
			self.assertEqual(event.delivery_id, delivery_id)
			attempts.append(event.attempt)
		self.assertEqual(attempts, [1, 2, 3, 4, 5])
		self.clock.advance(2000)
		self.bus.tick()
		self.assertIsNone(sub.poll())
		lost = dead.poll()
		self.assertEqual(lost.payload.header('x-original-topic'), TOPIC)
		self.assertEqual(lost.payload.header('x-delivery-id'), delivery_id)
		with self.assertRaises(NotFound):
			self.bus.ack(sub, delivery_id)

	def test_fifo_per_topic_with_redelivery(self):
		sub = self.bus.subscribe('weather.#')
		for n in range(3):
			self.bus.publish(TOPIC, _message(n))
		self.bus.publish('weather.humidity.updated', _message(99))
		first = sub.poll()
		other = sub.poll()
		self.assertEqual(other.topic, 'weather.humidity.updated')
		self.clock.advance(2000)
		self.bus.tick()
		again = sub.poll()
		self.assertEqual((again.delivery_id, again.attempt), (first.delivery_id, 2))
		acked = []
		event = again
		while event is not None:
			self.bus.ack(sub, event.delivery_id)
			if event.topic == TOPIC:
				acked.append(event.payload.body.value)
			event = sub.poll()
		self.assertEqual(acked, [0, 1, 2])


class PushTests(BusTestCase):
	def test_handler_auto_acks(self):
		seen = []
		sub = self.bus.subscribe(TOPIC, handler=seen.append)
		self.bus.publish(TOPIC, _message())
		self.assertEqual(len(seen), 1)
		self.assertEqual(sub.outstanding, [])

	def test_failing_handler_is_retried(self):
		calls = []

		def flaky(event):
			calls.append(event.attempt)
			if event.attempt < 3:
				raise RuntimeError('device busy')

		self.bus.subscribe(TOPIC, handler=flaky)
		self.bus.publish(TOPIC, _message())
		for _ in range(5):
			self.clock.advance(2000)
			self.bus.tick()
		self.assertEqual(calls, [1, 2, 3])

	def test_unsubscribe(self):
		seen = []
		sub = self.bus.subscribe(TOPIC, handler=seen.append)
		self.bus.unsubscribe(sub)
		self.bus.publish(TOPIC, _message())
		self.assertEqual(seen, [])


class DedupTests(BusTestCase):
	def test_exactly_once_under_adversarial_redelivery(self):
		rng = random.Random(10_000)
		observed = []
		dedup = DedupConsumer(lambda event: observed.append(event.delivery_id))

		def adversary(event):
			dedup(event)
			# drop the ack now and then so the bus redelivers
			if rng.random() < 0.3:
				raise RuntimeError('ack lost')

		self.bus = EventBus(self.clock, SequentialIds(2), max_attempts=50)
		sub = self.bus.subscribe('sensor.#', handler=adversary)
		published = []
		for n in range(10_000):
			published.append(self.bus.publish(f'sensor.s{n % 7}.updated', _message(n)))
			if n % 100 == 99:
				self.clock.advance(2000)
				self.bus.tick()
		for _ in range(10_000):
			if not sub.pending:
				break
			self.clock.advance(2000)
			self.bus.tick()
		self.assertEqual(sub.pending, 0)
		self.assertEqual(len(observed), len(set(observed)))
		self.assertEqual(sorted(observed), sorted(published))

	def test_memory_bounded_by_topics(self):
		rng = random.Random(77)
		observed = []
		dedup = DedupConsumer(lambda event: observed.append(event.delivery_id))

		def flaky(event):
			dedup(event)
			if rng.random() < 0.3:
				raise RuntimeError('ack lost')

		self.bus = EventBus(self.clock, SequentialIds(3), max_attempts=50)
		sub = self.bus.subscribe('sensor.#', handler=flaky)
		published = [self.bus.publish(f'sensor.s{n % 5}.updated', _message(n)) for n in range(2000)]
		for _ in range(10_000):
			if not sub.pending:
				break
			self.clock.advance(2000)
			self.bus.tick()
		self.assertEqual(sub.pending, 0)
		self.assertEqual(len(dedup), 5)
		self.assertEqual(sorted(observed), sorted(published))

	def test_newer_delivery_replaces_older_on_same_topic(self):
		dedup = DedupConsumer(lambda event: None)
		first, second = BusEvent('d1', TOPIC, _message(1)), BusEvent('d2', TOPIC, _message(2))
		other = BusEvent('d3', 'weather.humidity.updated', _message(3))
		self.assertEqual([dedup.observe(e) for e in (first, first, second, other, second)], [True, False, True, True, False])
		self.assertEqual(len(dedup), 2)
