"""Time sources.

Every timeout in the framework asks a Clock for the time instead of calling
``time`` directly, so simulations can run on a virtual timeline.
"""
from __future__ import annotations

import heapq
import itertools
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Optional

QUANTUM_MS = 1


class Clock(ABC):
    @abstractmethod
    def now_ms(self) -> int:
        """Current time in milliseconds."""

    @property
    def is_virtual(self) -> bool:
        return False

    def sleep_ms(self, delta_ms: int) -> None:
        time.sleep(max(0, delta_ms) / 1000)


class WallClock(Clock):
    def now_ms(self) -> int:
        return int(time.time() * 1000)


class VirtualClock(Clock):
    """Clock that only moves when told to."""

    def __init__(self, start_ms: int = 0) -> None:
        if start_ms < 0:
            raise ValueError('start_ms must be non-negative')
        self._now_ms = start_ms
        self._lock = threading.Lock()

    @property
    def is_virtual(self) -> bool:
        return True

    def now_ms(self) -> int:
        with self._lock:
            return self._now_ms

    def advance(self, delta_ms: int) -> int:
        if delta_ms < 0:
            raise ValueError('delta_ms must be non-negative')
        with self._lock:
            self._now_ms += delta_ms
            return self._now_ms

    def advance_to(self, ts_ms: int) -> int:
        with self._lock:
            if ts_ms < self._now_ms:
                raise ValueError('cannot move a clock backwards')
            self._now_ms = ts_ms
            return self._now_ms

    def sleep_ms(self, delta_ms: int) -> None:
        self.advance(max(0, delta_ms))


@dataclass(order=True)
class _Scheduled:
    """Heap ordering: timestamp, then priority (lower first), then submission order."""

    ts_ms: int
    priority: int
    seq_no: int
    action: Callable[[], None] = field(compare=False)
    label: str = field(default='', compare=False)


class EventScheduler:
    """Deterministic discrete-event scheduler driving a VirtualClock."""

    def __init__(self, clock: Optional[VirtualClock] = None) -> None:
        self.clock = clock or VirtualClock()
        self._queue: list[_Scheduled] = []
        self._seq = itertools.count(1)

    @property
    def now_ms(self) -> int:
        return self.clock.now_ms()

    def schedule(self, ts_ms: int, action: Callable[[], None], priority: int = 0, label: str = '') -> None:
        if ts_ms < self.now_ms:
            raise ValueError('cannot schedule in the past')
        heapq.heappush(self._queue, _Scheduled(ts_ms, priority, next(self._seq), action, label))

    def schedule_in(self, delay_ms: int, action: Callable[[], None], priority: int = 0, label: str = '') -> None:
        self.schedule(self.now_ms + max(0, delay_ms), action, priority, label)

    def has_pending(self) -> bool:
        return bool(self._queue)

    def peek_next_ts(self) -> Optional[int]:
        return self._queue[0].ts_ms if self._queue else None

    def step(self) -> bool:
        if not self._queue:
            return False
        item = heapq.heappop(self._queue)
        self.clock.advance_to(item.ts_ms)
        item.action()
        return True

    def run(self, until_ms: Optional[int] = None) -> int:
        """Execute events in order; stops once the next event is later than ``until_ms``."""
        executed = 0
        while self._queue:
            if until_ms is not None and self._queue[0].ts_ms > until_ms:
                break
            self.step()
            executed += 1
        if until_ms is not None and until_ms > self.now_ms:
            self.clock.advance_to(until_ms)
        return executed
