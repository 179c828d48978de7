"""Protocol bindings.

A binding owns one listening socket for one wire protocol: ``HttpBinding``
serves the Django ASGI application through uvicorn, ``PubSubBinding``
speaks the newline-delimited JSON frames of ``adapters.pubsub``.
"""
from __future__ import annotations

import asyncio
import enum
import logging
import socket
import threading
from abc import ABC, abstractmethod
from typing import Optional

from core.errors import ContractViolation

from .pubsub import MAX_LINE_BYTES, FrameQueue, FrameSession, encode_frame, error_frame

logger = logging.getLogger(__name__)


class Protocol(str, enum.Enum):
    REQUEST = 'RequestWire'
    PUBSUB = 'PubSubWire'


class BindingState(str, enum.Enum):
    STOPPED = 'Stopped'
    RUNNING = 'Running'


def bind_socket(host: str, port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
        sock.listen(128)
    except OSError as exc:
        sock.close()
        raise ContractViolation(f'cannot listen on {host}:{port} ({exc.strerror or exc})') from None
    sock.setblocking(False)
    return sock


class Binding(ABC):
    protocol: Protocol

    def __init__(self, binding_id: str, host: str, port: int) -> None:
        self.binding_id = binding_id
        self.host = host
        self.port = port
        self.state = BindingState.STOPPED
        self._lock = threading.Lock()
        self._socket: Optional[socket.socket] = None
        self._thread: Optional[threading.Thread] = None

    def __repr__(self) -> str:
        return f'<{self.__class__.__name__} {self.binding_id} {self.host}:{self.port} {self.state.value}>'

    @property
    def address(self) -> tuple[str, int]:
        """Bound address; the real port when 0 was requested."""
        if self._socket is not None:
            return self._socket.getsockname()[:2]
        return self.host, self.port

    def start(self) -> BindingState:
        with self._lock:
            if self.state is BindingState.RUNNING:
                return self.state
            self._socket = bind_socket(self.host, self.port)
            self._thread = threading.Thread(target=self._serve, name=f'binding-{self.binding_id}', daemon=True)
            self._thread.start()
            self.state = BindingState.RUNNING
        logger.info('adapters: binding %s ativo em %s:%s', self.binding_id, *self.address)
        return self.state

    def stop(self, drain_timeout_ms: int = 5000) -> BindingState:
        with self._lock:
            if self.state is BindingState.STOPPED:
                return self.state
            self._shutdown()
            thread, self._thread = self._thread, None
        if thread is not None:
            thread.join(drain_timeout_ms / 1000 + 1)
        with self._lock:
            if self._socket is not None:
                self._socket.close()
                self._socket = None
            self.state = BindingState.STOPPED
        logger.info('adapters: binding %s parado', self.binding_id)
        return self.state

    @abstractmethod
    def _serve(self) -> None:
        ...

    @abstractmethod
    def _shutdown(self) -> None:
        ...


class HttpBinding(Binding):
    """Request/response binding: uvicorn on a pre-bound socket."""

    protocol = Protocol.REQUEST

    def __init__(self, host: str, port: int, app=None, drain_timeout_ms: int = 5000, limit_concurrency: Optional[int] = None) -> None:
        super().__init__('http', host, port)
        self.app = app
        self.drain_timeout_ms = drain_timeout_ms
        self.limit_concurrency = limit_concurrency
        self._server = None

    def _serve(self) -> None:
        import uvicorn

        app = self.app
        if app is None:
            from django.core.asgi import get_asgi_application
            app = get_asgi_application()
        config = uvicorn.Config(
            app,
            lifespan='off',
            log_config=None,
            access_log=False,
            timeout_graceful_shutdown=max(1, self.drain_timeout_ms // 1000),
            limit_concurrency=self.limit_concurrency,
        )
        self._server = uvicorn.Server(config)
        try:
            self._server.run(sockets=[self._socket])
        except Exception:
            logger.exception('adapters: servidor http encerrou com erro')

    def _shutdown(self) -> None:
        if self._server is not None:
            self._server.should_exit = True


class PubSubBinding(Binding):
    """Pub/sub binding: one FrameSession per TCP connection."""

    protocol = Protocol.PUBSUB

    def __init__(self, host: str, port: int, framework, require_token: bool = False, queue_size: int = 256) -> None:
        super().__init__('pubsub', host, port)
        self.framework = framework
        self.require_token = require_token
        self.queue_size = queue_size
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._stopping: Optional[asyncio.Event] = None
        self._ready = threading.Event()

    def _serve(self) -> None:
        try:
            asyncio.run(self._main())
        except Exception:
            logger.exception('adapters: binding pubsub encerrou com erro')

    async def _main(self) -> None:
        self._loop = asyncio.get_running_loop()
        self._stopping = asyncio.Event()
        server = await asyncio.start_server(self._connection, sock=self._socket, limit=MAX_LINE_BYTES + 1)
        self._ready.set()
        async with server:
            await self._stopping.wait()
            server.close()
            await server.wait_closed()

    def _shutdown(self) -> None:
        self._ready.wait(5)
        if self._loop is not None and self._stopping is not None:
            self._loop.call_soon_threadsafe(self._stopping.set)

    async def _connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        loop = asyncio.get_running_loop()
        outbox = FrameQueue(self.queue_size)
        wake = asyncio.Event()

        def notify() -> None:
            loop.call_soon_threadsafe(wake.set)

        def sink(frame: dict) -> bool:
            accepted = outbox.put(frame)
            notify()
            return accepted

        framework = self.framework
        session = FrameSession(
            framework.gateway, framework.bus, framework.clock, framework.ids, sink, self.require_token,
        )
        pump = asyncio.create_task(self._write(writer, outbox, wake))
        try:
            while not reader.at_eof():
                try:
                    line = await reader.readline()
                except (asyncio.LimitOverrunError, ValueError):
                    outbox.put(error_frame('frame too large'), force=True)
                    notify()
                    continue
                if not line:
                    break
                reply = await loop.run_in_executor(None, session.handle_line, line.rstrip(b'\r\n'))
                outbox.put(reply, force=True)
                notify()
        except ConnectionError:
            pass
        finally:
            session.close()
            pump.cancel()
            try:
                for frame in outbox.drain():
                    writer.write(encode_frame(frame))
                await writer.drain()
            except ConnectionError:
                pass
            writer.close()

    async def _write(self, writer: asyncio.StreamWriter, outbox: FrameQueue, wake: asyncio.Event) -> None:
        while True:
            await wake.wait()
            wake.clear()
            for frame in outbox.drain():
                writer.write(encode_frame(frame))
            await writer.drain()


class BindingSet:
    """At most one binding per protocol."""

    def __init__(self) -> None:
        self._bindings: dict[Protocol, Binding] = {}

    def add(self, binding: Binding) -> Binding:
        if binding.protocol in self._bindings:
            raise ContractViolation(f'a {binding.protocol.value} binding is already registered')
        self._bindings[binding.protocol] = binding
        return binding

    def get(self, protocol: Protocol) -> Optional[Binding]:
        return self._bindings.get(protocol)

    def __iter__(self):
        return iter(list(self._bindings.values()))

    def start_all(self) -> None:
        started = []
        try:
            for binding in self:
                binding.start()
                started.append(binding)
        except ContractViolation:
            for binding in reversed(started):
                binding.stop()
            raise

    def stop_all(self, drain_timeout_ms: int = 5000) -> None:
        for binding in reversed(list(self)):
            binding.stop(drain_timeout_ms)
