"""Process-wide wiring of the framework components.

``Framework`` builds registry, bus, monitor, assembler, auditor and gateway
from one ``FrameworkConfig`` and a clock. The HTTP views and the management
commands share the instance returned by ``get_framework``.
"""
from __future__ import annotations

import logging
import threading
from pathlib import Path
from typing import Optional

from django.conf import settings as django_settings

from .clock import Clock, WallClock
from .conf import FrameworkConfig, load_config
from .ids import IdFactory

logger = logging.getLogger(__name__)

_framework: Optional['Framework'] = None
_framework_lock = threading.Lock()


class Framework:
    def __init__(
        self,
        config: Optional[FrameworkConfig] = None,
        clock: Optional[Clock] = None,
        ids: Optional[IdFactory] = None,
        in_memory: bool = False,
    ) -> None:
        from adapters.endpoints import DeviceChannel
        from assembler.services import ServiceAssembler
        from auditor.services import AuditLog
        from bus.services import EventBus
        from codec.services import Codec
        from gateway.services import Gateway
        from monitor.services import ServiceMonitor
        from registry.endpoints import EndpointDirectory
        from registry.services import ServiceRegistry

        self.config = config or FrameworkConfig()
        self.clock = clock or WallClock()
        self.ids = ids or IdFactory()
        cfg = self.config
        self.codec = Codec(cfg.codec.max_message_bytes)
        self.registry = ServiceRegistry(self.clock)
        self.directory = EndpointDirectory()
        self.bus = EventBus(self.clock, self.ids, cfg.bus.redelivery_timeout_ms, cfg.bus.max_attempts)
        self.monitor = ServiceMonitor(self.registry, self.directory, self.bus, self.clock, self.ids, cfg.monitor)
        self.assembler = ServiceAssembler(
            self.registry, self.directory, self.monitor, self.codec, self.clock, self.ids, cfg.assembler,
        )
        audit_dir = None if in_memory else (cfg.auditor.directory or None)
        self.auditor = AuditLog(audit_dir, cfg.auditor.segment_size)
        self.gateway = Gateway(
            self.registry, self.assembler, self.monitor, self.auditor, self.bus,
            cfg.tokens, self.codec, self.clock, self.ids, cfg.gateway,
        )
        self.channel = DeviceChannel(self.bus, self.clock, self.ids, self.codec, cfg.monitor.probe_timeout_ms)
        self.snapshot_path = None if in_memory else (Path(cfg.registry.snapshot_path) if cfg.registry.snapshot_path else None)
        if self.snapshot_path is not None and self.snapshot_path.exists():
            try:
                self.registry.load(self.snapshot_path)
            except Exception:
                self.channel.close()
                self.assembler.close()
                self.auditor.close()
                raise
        self.gateway.ensure_builtin_services()
        self._closed = False

    def __repr__(self) -> str:
        return f'<Framework {"virtual" if self.clock.is_virtual else "wall"}>'

    def maintain(self, now_ms: Optional[int] = None) -> list[str]:
        """Drop lapsed leases and keep the gateway's own services registered."""
        reaped = self.registry.reap(now_ms)
        self.gateway.ensure_builtin_services()
        return reaped

    def save_snapshot(self) -> Optional[Path]:
        if self.snapshot_path is None:
            return None
        return self.registry.save(self.snapshot_path)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self.save_snapshot()
        except Exception:
            logger.exception('runtime: falha ao salvar snapshot do registro')
        self.channel.close()
        self.assembler.close()
        self.auditor.close()


def build_framework(config_path: Optional[str] = None) -> Framework:
    path = config_path if config_path is not None else getattr(django_settings, 'IOTFRAME_CONFIG', '')
    return Framework(load_config(path))


def get_framework() -> Framework:
    global _framework
    with _framework_lock:
        if _framework is None:
            _framework = build_framework()
            logger.info('runtime: framework criado')
        return _framework


def install(framework: Optional[Framework]) -> Optional[Framework]:
    """Replace the shared instance (serve command, tests); returns the previous one."""
    global _framework
    with _framework_lock:
        previous, _framework = _framework, framework
    return previous
