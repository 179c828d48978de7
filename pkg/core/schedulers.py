"""Background loops for wall-clock deployments.

The monitor probe cycle, the bus redelivery ticker and the registry reaper
each run in a daemon thread. Simulations drive the same calls from the
virtual scheduler instead.
"""
import logging
import os
import sys
import threading
from typing import Callable, Optional

logger = logging.getLogger(__name__)

_SKIP_COMMANDS = {'migrate', 'makemigrations', 'collectstatic', 'shell', 'test', 'check', 'serve', 'scenario', 'call', 'registry', 'compose', 'split', 'audit'}

_started: list['PeriodicLoop'] = []
_start_lock = threading.Lock()


def _should_start_loops() -> bool:
    """Skips one-shot management commands and respects IOTFRAME_AUTOSTART."""
    def _log_skip(reason: str) -> None:
        logger.info('scheduler: loops nao iniciados (%s).', reason)

    if os.getenv('IOTFRAME_AUTOSTART', '').strip().lower() not in {'1', 'true', 'yes', 'on'}:
        _log_skip('IOTFRAME_AUTOSTART desligado')
        return False
    argv = sys.argv
    if len(argv) >= 2 and argv[1] in _SKIP_COMMANDS:
        _log_skip(f'ignorado para comando {argv[1]}')
        return False
    return True


class PeriodicLoop:
    """Runs ``action`` every ``interval_ms`` in a daemon thread until stopped."""

    def __init__(self, name: str, interval_ms: int, action: Callable[[], object]) -> None:
        self.name = name
        self.interval_ms = interval_ms
        self.action = action
        self._stop = threading.Event()
        self._run_lock = threading.Lock()
        self._thread: Optional[threading.Thread] = None

    def __repr__(self) -> str:
        return f'<PeriodicLoop {self.name} {self.interval_ms}ms>'

    @property
    def running(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def run_once(self) -> bool:
        if self._run_lock.locked():
            logger.info('%s: ciclo anterior ainda em execucao, pulando.', self.name)
            return False
        with self._run_lock:
            try:
                self.action()
            except Exception:
                logger.exception('%s: falha no ciclo.', self.name)
                return False
        return True

    def _worker(self) -> None:
        logger.info('%s: loop iniciado (intervalo=%sms).', self.name, self.interval_ms)
        while not self._stop.wait(self.interval_ms / 1000):
            self.run_once()
        logger.info('%s: loop encerrado.', self.name)

    def start(self) -> None:
        if self.running:
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._worker, name=self.name, daemon=True)
        self._thread.start()

    def stop(self, timeout_s: float = 5.0) -> None:
        self._stop.set()
        thread, self._thread = self._thread, None
        if thread is not None and thread is not threading.current_thread():
            thread.join(timeout_s)


def framework_loops(framework) -> list[PeriodicLoop]:
    cfg = framework.config
    return [
        PeriodicLoop('monitor', cfg.monitor.probe_interval_ms, framework.monitor.run_cycle),
        PeriodicLoop('bus', cfg.bus.tick_interval_ms, framework.bus.tick),
        PeriodicLoop('registry', cfg.monitor.probe_interval_ms, framework.maintain),
    ]


def start_background_loops(framework, force: bool = False) -> list[PeriodicLoop]:
    """Public entry used by AppConfig.ready and the serve command."""
    with _start_lock:
        if _started:
            return list(_started)
        if not force and not _should_start_loops():
            return []
        loops = framework_loops(framework)
        for loop in loops:
            loop.start()
        _started.extend(loops)
        return list(loops)


def stop_background_loops() -> None:
    with _start_lock:
        loops = list(_started)
        _started.clear()
    for loop in loops:
        loop.stop()
