from __future__ import annotations

import json
import logging
import os
import queue
import threading
from concurrent.futures import Future
from pathlib import Path
from typing import Iterator, Optional

from core.errors import ContractViolation

from .records import AuditRecord

logger = logging.getLogger(__name__)

DEFAULT_SEGMENT_SIZE = 10_000
_SEGMENT_GLOB = 'segment-*.ndjson'
_STOP = object()


def nearest_rank(sorted_values: list[int], percentile: int) -> Optional[int]:
	if not sorted_values:
		return None
	# integer ceil keeps p95 of 100 values at rank 95
	rank = max(1, -(-percentile * len(sorted_values) // 100))
	return sorted_values[rank - 1]


class AuditLog:
	"""Append-only transaction log.

	One writer thread drains a queue fed by any number of producers and
	assigns sequence numbers in queue order. With a ``directory`` records go
	to NDJSON segment files; without one the segments are kept in memory.
	"""

	def __init__(self, directory: 'str | Path | None' = None, segment_size: int = DEFAULT_SEGMENT_SIZE) -> None:
		if segment_size < 1:
			raise ValueError('segment_size must be positive')
		self.directory = Path(directory) if directory else None
		self.segment_size = segment_size
		self._lock = threading.RLock()
		self._memory: list[list[AuditRecord]] = [[]]
		self._active_count = 0
		self._segment_index = 1
		self._seq = 0
		self._dirty: set[Path] = set()
		self._closed = False
		self._queue: 'queue.Queue[object]' = queue.Queue()
		if self.directory is not None:
			self.directory.mkdir(parents=True, exist_ok=True)
			self._resume_from_disk()
		self._writer = threading.Thread(target=self._run, name='audit-writer', daemon=True)
		self._writer.start()

	# --- writing -----------------------------------------------------------

	def _resume_from_disk(self) -> None:
		segments = sorted(self.directory.glob(_SEGMENT_GLOB))
		if not segments:
			return
		self._segment_index = int(segments[-1].stem.split('-')[1])
		last = None
		for record in self._read_file(segments[-1]):
			last = record
			self._active_count += 1
		if last is not None and last.seq:
			self._seq = last.seq
		logger.info('auditor: retomando no segmento %s (seq %s)', self._segment_index, self._seq)

	def _segment_path(self, index: int) -> Path:
		return self.directory / f'segment-{index:06d}.ndjson'

	def submit(self, record: AuditRecord) -> 'Future[int]':
		record.check()
		future: 'Future[int]' = Future()
		with self._lock:
			if self._closed:
				raise ContractViolation('audit log is closed')
			self._queue.put((record, future))
		return future

	def append(self, record: AuditRecord) -> int:
		"""Append and wait for the writer to commit; returns the sequence number."""
		return self.submit(record).result()

	def _run(self) -> None:
		while True:
			batch = [self._queue.get()]
			while True:
				try:
					batch.append(self._queue.get_nowait())
				except queue.Empty:
					break
			committed = []
			stop = False
			for item in batch:
				if item is _STOP:
					stop = True
					continue
				record, future = item
				try:
					committed.append((future, self._commit(record)))
				except Exception as exc:
					logger.exception('auditor: falha ao gravar registro %s', record.transaction_id)
					future.set_exception(exc)
			# appends are acknowledged only after the batch reached the disk
			try:
				self._sync()
			except OSError as exc:
				logger.exception('auditor: falha no fsync dos segmentos')
				for future, _ in committed:
					future.set_exception(exc)
				committed = []
			for future, seq in committed:
				future.set_result(seq)
			if stop:
				return

	def _sync(self) -> None:
		with self._lock:
			dirty, self._dirty = self._dirty, set()
		for path in sorted(dirty):
			with path.open('ab') as handle:
				os.fsync(handle.fileno())

	def _commit(self, record: AuditRecord) -> int:
		with self._lock:
			if self._active_count >= self.segment_size:
				self._segment_index += 1
				self._active_count = 0
				self._memory.append([])
				logger.info('auditor: novo segmento %s', self._segment_index)
			stored = record.with_seq(self._seq + 1)
			if self.directory is not None:
				line = json.dumps(stored.as_dict(), sort_keys=True, ensure_ascii=False, separators=(',', ':'))
				path = self._segment_path(self._segment_index)
				with path.open('a', encoding='utf-8') as handle:
					handle.write(line + '\n')
				self._dirty.add(path)
			else:
				self._memory[-1].append(stored)
			self._seq = stored.seq
			self._active_count += 1
			return stored.seq

	def close(self) -> None:
		with self._lock:
			if self._closed:
				return
			self._closed = True
			self._queue.put(_STOP)
		self._writer.join()

	# --- reading -----------------------------------------------------------

	@staticmethod
	def _read_file(path: Path) -> Iterator[AuditRecord]:
		with path.open(encoding='utf-8') as handle:
			for line in handle:
				line = line.strip()
				if line:
					yield AuditRecord.from_dict(json.loads(line))

	def _records(self) -> list[AuditRecord]:
		with self._lock:
			if self.directory is None:
				return [record for segment in self._memory for record in segment]
			records = []
			for path in sorted(self.directory.glob(_SEGMENT_GLOB)):
				records.extend(self._read_file(path))
			return records

	@property
	def segment_count(self) -> int:
		with self._lock:
			if self.directory is None:
				return sum(1 for segment in self._memory if segment)
			return len(list(self.directory.glob(_SEGMENT_GLOB)))

	def count(self) -> int:
		with self._lock:
			return self._seq

	def query(
		self,
		transaction_id: Optional[str] = None,
		capability: Optional[str] = None,
		start_ms: Optional[int] = None,
		end_ms: Optional[int] = None,
	) -> list[AuditRecord]:
		"""Records matching every given filter, in sequence order. Time range is [start_ms, end_ms)."""
		matches = []
		for record in self._records():
			if transaction_id is not None and record.transaction_id != transaction_id:
				continue
			if capability is not None and record.capability != capability:
				continue
			if start_ms is not None and record.start_ms < start_ms:
				continue
			if end_ms is not None and record.start_ms >= end_ms:
				continue
			matches.append(record)
		return matches

	def tail(self, after_seq: int = 0, limit: int = 100) -> list[AuditRecord]:
		found = [record for record in self._records() if (record.seq or 0) > after_seq]
		return found[:max(0, limit)]

	def stats(self, capability: Optional[str] = None, window_ms: Optional[int] = None, now_ms: Optional[int] = None) -> dict:
		start = None
		if window_ms is not None and now_ms is not None:
			start = now_ms - window_ms
		records = self.query(capability=capability, start_ms=start)
		latencies = sorted(record.total_ms for record in records)
		faults: dict[str, int] = {}
		for record in records:
			if not record.ok:
				faults[record.final_outcome] = faults.get(record.final_outcome, 0) + 1
		return {
			'count': len(records),
			'p50_ms': nearest_rank(latencies, 50),
			'p95_ms': nearest_rank(latencies, 95),
			'max_ms': latencies[-1] if latencies else None,
			'fault_counts': dict(sorted(faults.items())),
		}
