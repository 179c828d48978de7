from __future__ import annotations

import itertools
import random
import threading
import uuid


class IdFactory:
    """uuid4 identifiers for live deployments."""

    def new(self, kind: str) -> str:
        return f'{kind}-{uuid.uuid4().hex}'


class SequentialIds(IdFactory):
    """Deterministic identifiers for simulations: same seed, same ids."""

    def __init__(self, seed: int = 0) -> None:
        self._counters: dict[str, itertools.count] = {}
        self._lock = threading.Lock()
        self._prefix = f'{random.Random(seed).getrandbits(24):06x}'

    def new(self, kind: str) -> str:
        with self._lock:
            counter = self._counters.setdefault(kind, itertools.count(1))
            return f'{kind}-{self._prefix}-{next(counter):06d}'
