import tempfile
import threading
from pathlib import Path
from unittest import mock

from django.test import SimpleTestCase

from core.errors import ContractViolation

from .records import AuditRecord, Hop
from .services import AuditLog, nearest_rank


def _record(txn='txn-1', capability='weather.temperature.read', total=600, start=0, outcome='ok', hops=None):
	if hops is None:
		hops = [Hop('svc', capability, start, start + total, outcome)]
	return AuditRecord(
		transaction_id=txn,
		capability=capability,
		start_ms=start,
		total_ms=total,
		final_outcome=outcome,
		correlation_id=f'{txn}-corr',
		consumer_id='app',
		hops=hops,
	)


class AppendTests(SimpleTestCase):
	def setUp(self):
		self.log = AuditLog()

	def tearDown(self):
		self.log.close()

	def test_first_sequence_is_one(self):
		self.assertEqual(self.log.append(_record()), 1)

	def test_hop_ending_before_start_rejected(self):
		with self.assertRaises(ContractViolation):
			self.log.append(_record(hops=[Hop('svc', 'a.b', 10, 5)]))
		self.assertEqual(self.log.count(), 0)

	def test_completed_record_needs_hops(self):
		with self.assertRaises(ContractViolation):
			self.log.append(_record(hops=[]))

	def test_failed_record_may_have_no_hops(self):
		self.assertEqual(self.log.append(_record(outcome='UnauthorisedAccess', total=0, hops=[])), 1)

	def test_total_must_cover_hops(self):
		with self.assertRaises(ContractViolation):
			self.log.append(_record(total=100, hops=[Hop('svc', 'a.b', 0, 200)]))

	def test_concurrent_appends(self):
		seqs = []
		lock = threading.Lock()

		def worker(index):
			seq = self.log.append(_record(txn=f'txn-{index}'))
			with lock:
				seqs.append(seq)

		threads = [threading.Thread(target=worker, args=(i,)) for i in range(1000)]
		for thread in threads:
			thread.start()
		for thread in threads:
			thread.join()
		self.assertEqual(sorted(seqs), list(range(1, 1001)))
		stored = [record.seq for record in self.log.tail(0, 2000)]
		self.assertEqual(stored, list(range(1, 1001)))

	def test_closed_log_rejects_appends(self):
		self.log.close()
		with self.assertRaises(ContractViolation):
			self.log.append(_record())


class QueryTests(SimpleTestCase):
	def test_empty_store(self):
		log = AuditLog()
		self.addCleanup(log.close)
		self.assertEqual(log.query(), [])

	def test_by_transaction_and_capability(self):
		log = AuditLog()
		self.addCleanup(log.close)
		log.append(_record('txn-1'))
		log.append(_record('txn-2', capability='weather.humidity.read'))
		self.assertEqual([r.transaction_id for r in log.query(transaction_id='txn-2')], ['txn-2'])
		self.assertEqual([r.transaction_id for r in log.query(capability='weather.temperature.read')], ['txn-1'])

	def test_range_straddling_rotation(self):
		with tempfile.TemporaryDirectory() as tmp:
			log = AuditLog(tmp, segment_size=3)
			for index in range(7):
				log.append(_record(f'txn-{index}', start=index * 100, total=10))
			log.close()
			self.assertEqual(len(list(Path(tmp).glob('segment-*.ndjson'))), 3)
			found = log.query(start_ms=200, end_ms=500)
			self.assertEqual([r.transaction_id for r in found], ['txn-2', 'txn-3', 'txn-4'])

	def test_reopen_continues_sequence(self):
		with tempfile.TemporaryDirectory() as tmp:
			log = AuditLog(tmp, segment_size=2)
			log.append(_record('txn-a'))
			log.append(_record('txn-b'))
			log.append(_record('txn-c'))
			log.close()
			reopened = AuditLog(tmp, segment_size=2)
			self.assertEqual(reopened.append(_record('txn-d')), 4)
			reopened.close()
			self.assertEqual([r.seq for r in reopened.query()], [1, 2, 3, 4])

	def test_memory_mode_rotates(self):
		log = AuditLog(segment_size=2)
		self.addCleanup(log.close)
		for index in range(5):
			log.append(_record(f'txn-{index}'))
		self.assertEqual(log.segment_count, 3)
		self.assertEqual(len(log.query()), 5)

	def test_tail(self):
		log = AuditLog()
		self.addCleanup(log.close)
		for index in range(5):
			log.append(_record(f'txn-{index}'))
		self.assertEqual([r.seq for r in log.tail(after_seq=2, limit=2)], [3, 4])


class StatsTests(SimpleTestCase):
	def test_single_record(self):
		log = AuditLog()
		self.addCleanup(log.close)
		log.append(_record(total=600))
		stats = log.stats('weather.temperature.read')
		self.assertEqual((stats['count'], stats['p50_ms'], stats['p95_ms'], stats['max_ms']), (1, 600, 600, 600))

	def test_no_records(self):
		log = AuditLog()
		self.addCleanup(log.close)
		stats = log.stats('weather.temperature.read')
		self.assertEqual(stats['count'], 0)
		self.assertIsNone(stats['p50_ms'])
		self.assertIsNone(stats['p95_ms'])

	def test_nearest_rank_oracle(self):
		log = AuditLog()
		self.addCleanup(log.close)
		for value in range(100, 0, -1):
			log.append(_record(f'txn-{value}', total=value))
		stats = log.stats('weather.temperature.read')
		self.assertEqual((stats['p50_ms'], stats['p95_ms'], stats['max_ms']), (50, 95, 100))

	def test_fault_counts(self):
		log = AuditLog()
		self.addCleanup(log.close)
		log.append(_record('a'))
		log.append(_record('b', outcome='CrashFailure', hops=[Hop('svc', 'a.b', 0, 0, 'CrashFailure')]))
		log.append(_record('c', outcome='CrashFailure', total=0, hops=[]))
		self.assertEqual(log.stats()['fault_counts'], {'CrashFailure': 2})

	def test_window(self):
		log = AuditLog()
		self.addCleanup(log.close)
		log.append(_record('old', start=0, total=10))
		log.append(_record('new', start=5000, total=20))
		self.assertEqual(log.stats(window_ms=1000, now_ms=5500)['count'], 1)

	def test_nearest_rank_helper(self):
		self.assertEqual(nearest_rank([7], 95), 7)
		self.assertIsNone(nearest_rank([], 50))


class DurabilityTests(SimpleTestCase):
	def test_segments_synced_before_append_returns(self):
		with tempfile.TemporaryDirectory() as tmp:
			with mock.patch('auditor.services.os.fsync') as fsync:
				log = AuditLog(tmp, segment_size=2)
				for n in range(3):
					log.append(_record(f'txn-{n}'))
					self.assertEqual(fsync.call_count, n + 1)
				log.close()
			self.assertEqual(len(list(Path(tmp).glob('segment-*.ndjson'))), 2)

	def test_memory_mode_does_not_sync(self):
		with mock.patch('auditor.services.os.fsync') as fsync:
			log = AuditLog()
			log.append(_record())
			log.close()
		fsync.assert_not_called()

	def test_sync_failure_fails_the_append(self):
		with tempfile.TemporaryDirectory() as tmp:
			with mock.patch('auditor.services.os.fsync', side_effect=OSError('disk gone')):
				log = AuditLog(tmp)
				with self.assertLogs('auditor.services', level='ERROR'), self.assertRaises(OSError):
					log.append(_record())
				log.close()
