"""Simulated devices.

A device answers every capability of its profile after ``delay_ms`` of
simulated processing. Under a virtual clock nothing sleeps: the reply is
stamped with the time it would have been produced.
"""
from __future__ import annotations

import itertools
import logging
import random
import threading
from dataclasses import dataclass
from typing import Callable, Optional

from adapters.endpoints import PING_CAPABILITY, DeviceChannel, command_topic, reply_topic
from bus.services import BusEvent, EventBus
from codec.services import Codec, EncodedMessage, default_codec
from core.clock import Clock
from core.descriptors import ServiceDescriptor, WireFormat
from core.errors import ContractViolation, NotFound
from core.values import CanonicalMessage, CanonicalValue, Schema, map_of, to_canonical
from registry.endpoints import CallOutcome, EndpointDirectory
from registry.services import ServiceRegistry

from .faults import FaultKind, FaultSpec
from .scenario import CapabilityModel, DeviceModel, OutputModel

logger = logging.getLogger(__name__)


def make_generator(output: OutputModel, seed_key: str) -> Callable[[int], CanonicalValue]:
    """Reading body for the n-th reading (n starts at 0); deterministic for a given seed_key."""
    rng = random.Random(seed_key)
    extra = {key: to_canonical(value) for key, value in output.extra.items()}

    def value_for(n: int):
        if output.kind == 'constant':
            return output.value
        if output.kind == 'ramp':
            return output.value + n * output.step
        return round(rng.uniform(output.low, output.high), output.digits)

    def generate(n: int) -> CanonicalValue:
        return map_of({output.field: to_canonical(value_for(n)), **extra})

    return generate


@dataclass(frozen=True, slots=True)
class Answer:
    reply: Optional[CanonicalMessage] = None
    refused: bool = False
    done_ms: int = 0


class SimDevice:
    def __init__(self, model: DeviceModel, clock: Clock, codec: Optional[Codec] = None, seed: int = 0, origin_ms: int = 0) -> None:
        self.model = model
        self.device_id = model.device_id
        self.clock = clock
        self.codec = codec or default_codec
        self.origin_ms = origin_ms
        self.faults: list[FaultSpec] = []
        self._profiles = {profile.capability: profile for profile in model.capabilities}
        self._generators = {
            profile.capability: make_generator(profile.output, f'{seed}:{model.device_id}:{profile.capability}')
            for profile in model.capabilities
        }
        self._readings = {name: itertools.count() for name in self._profiles}
        self._replies = itertools.count(1)
        self._lock = threading.Lock()

    def __repr__(self) -> str:
        return f'<SimDevice {self.device_id}>'

    def service_id(self, capability: str) -> str:
        return f'{self.device_id}.{capability}'

    def profile(self, capability: str) -> CapabilityModel:
        try:
            return self._profiles[capability]
        except KeyError:
            raise NotFound(f'{self.device_id} does not provide {capability}') from None

    @property
    def capabilities(self) -> list[str]:
        return list(self._profiles)

    def descriptors(self) -> list[ServiceDescriptor]:
        return [
            ServiceDescriptor(
                service_id=self.service_id(profile.capability),
                capability=profile.capability,
                device_id=self.device_id,
                domain=self.model.domain,
                input_schema=Schema.from_list(profile.input_schema),
                output_schema=Schema.from_list(profile.output_schema),
                preferred_format=WireFormat.parse(profile.format),
                cost_hint_ms=profile.delay_ms if profile.cost_hint_ms is None else profile.cost_hint_ms,
                lease_ttl_ms=self.model.lease_ttl_ms,
            )
            for profile in self.model.capabilities
        ]

    # --- faults ------------------------------------------------------------

    def inject(self, spec: FaultSpec) -> None:
        with self._lock:
            self.faults.append(spec)
        logger.info('sim: falha %s em %s de %s a %s ms', spec.kind.value, self.device_id, spec.start_ms, spec.end_ms)

    def _elapsed(self, now_ms: int) -> int:
        return now_ms - self.origin_ms

    def fault(self, kind: FaultKind, now_ms: int) -> Optional[FaultSpec]:
        elapsed = self._elapsed(now_ms)
        with self._lock:
            for spec in self.faults:
                if spec.kind is kind and spec.active(elapsed):
                    return spec
        return None

    def is_down(self, now_ms: int) -> bool:
        elapsed = self._elapsed(now_ms)
        with self._lock:
            return any(spec.down(elapsed) for spec in self.faults)

    # --- serving -----------------------------------------------------------

    def reading(self, capability: str) -> CanonicalValue:
        self.profile(capability)
        with self._lock:
            n = next(self._readings[capability])
        return self._generators[capability](n)

    def _reply_id(self) -> str:
        with self._lock:
            return f'{self.device_id}-r{next(self._replies):06d}'

    def respond(self, request: CanonicalMessage, start_ms: int) -> Answer:
        if self.is_down(start_ms):
            return Answer(refused=True, done_ms=start_ms)
        if self.fault(FaultKind.OMISSION, start_ms) is not None:
            return Answer(done_ms=start_ms)
        if request.capability.name == PING_CAPABILITY:
            body = map_of({'ok': to_canonical(True)})
            return Answer(request.reply(self._reply_id(), body, start_ms), done_ms=start_ms)
        profile = self.profile(request.capability.name)
        delay = profile.delay_ms
        timing = self.fault(FaultKind.TIMING, start_ms)
        if timing is not None:
            delay += timing.extra_delay_ms
        done = start_ms + delay
        return Answer(request.reply(self._reply_id(), self.reading(profile.capability), done), done_ms=done)

    def ping(self, now_ms: int) -> bool:
        return not self.is_down(now_ms)

    def telemetry(self, capability: str, now_ms: int) -> CanonicalMessage:
        return CanonicalMessage(
            message_id=self._reply_id(),
            capability=capability,
            timestamp_ms=now_ms,
            body=self.reading(capability),
            headers={'x-device-id': self.device_id},
        )

    def telemetry_token(self, now_ms: int) -> str:
        """Token sent with upstream publishes; dropped while an Unauthorised fault is active."""
        if self.fault(FaultKind.UNAUTHORISED, now_ms) is not None:
            return ''
        return self.model.token


class DeviceEndpoint:
    """Direct request/response endpoint for one capability of a simulated device."""

    def __init__(self, device: SimDevice, capability: str) -> None:
        self.device = device
        self.capability = capability

    def __repr__(self) -> str:
        return f'<DeviceEndpoint {self.device.service_id(self.capability)}>'

    def invoke(self, request: EncodedMessage, start_ms: int, timeout_ms: int) -> CallOutcome:
        device = self.device
        clock = device.clock
        deadline = start_ms + timeout_ms
        answer = device.respond(device.codec.decode(request), start_ms)
        if answer.refused:
            return CallOutcome(end_ms=start_ms, refused=True)
        if answer.reply is None:
            if not clock.is_virtual:
                clock.sleep_ms(timeout_ms)
            return CallOutcome(end_ms=deadline, timed_out=True)
        done = answer.done_ms
        if not clock.is_virtual:
            clock.sleep_ms(min(done, deadline) - start_ms)
            if done <= deadline:
                done = clock.now_ms()
        response = device.codec.encode(answer.reply, request.format)
        return CallOutcome(end_ms=done, response=response, late=done > deadline)

    def ping(self, now_ms: int) -> bool:
        return self.device.ping(now_ms)


class DeviceAgent:
    """Device side of the bus path: serves ``device.<id>.cmd`` and answers on ``device.<id>.reply``."""

    def __init__(self, device: SimDevice, bus: EventBus) -> None:
        self.device = device
        self.bus = bus
        self.subscription = bus.subscribe(command_topic(device.device_id), handler=self)

    def __call__(self, event: BusEvent) -> None:
        command = event.payload
        answer = self.device.respond(command, command.timestamp_ms)
        if answer.reply is not None:
            self.bus.publish(reply_topic(self.device.device_id), answer.reply)

    def detach(self) -> None:
        self.bus.unsubscribe(self.subscription)


class SimFleet:
    """Spawns simulated devices into a registry and keeps their leases alive."""

    def __init__(
        self,
        registry: ServiceRegistry,
        directory: EndpointDirectory,
        clock: Clock,
        codec: Optional[Codec] = None,
        seed: int = 0,
        channel: Optional[DeviceChannel] = None,
        origin_ms: int = 0,
    ) -> None:
        self.registry = registry
        self.directory = directory
        self.clock = clock
        self.codec = codec or default_codec
        self.seed = seed
        self.channel = channel
        self.origin_ms = origin_ms
        self._devices: dict[str, SimDevice] = {}
        self._agents: dict[str, DeviceAgent] = {}

    def spawn(self, model: DeviceModel) -> SimDevice:
        if model.device_id in self._devices:
            raise ContractViolation(f'device {model.device_id} already spawned')
        if model.wire == 'PubSubWire' and self.channel is None:
            raise ContractViolation('PubSubWire devices need a bus channel')
        device = SimDevice(model, self.clock, self.codec, self.seed, self.origin_ms)
        for descriptor in device.descriptors():
            self.registry.register(descriptor)
            if model.wire == 'PubSubWire':
                endpoint = self.channel.endpoint(device.device_id)
            else:
                endpoint = DeviceEndpoint(device, descriptor.capability.name)
            self.directory.bind(descriptor.service_id, endpoint)
        if model.wire == 'PubSubWire':
            self._agents[device.device_id] = DeviceAgent(device, self.channel.bus)
        self._devices[device.device_id] = device
        return device

    def device(self, device_id: str) -> SimDevice:
        try:
            return self._devices[device_id]
        except KeyError:
            raise NotFound(f'no simulated device {device_id}') from None

    def devices(self) -> list[SimDevice]:
        return [self._devices[device_id] for device_id in sorted(self._devices)]

    def inject_fault(self, spec: FaultSpec) -> None:
        self.device(spec.target).inject(spec)

    def renew(self, device_id: str, now_ms: Optional[int] = None) -> int:
        """Heartbeat every service of a device; re-registers lapsed ones. A device that is down sends nothing."""
        now = self.clock.now_ms() if now_ms is None else now_ms
        device = self.device(device_id)
        if device.is_down(now):
            return 0
        renewed = 0
        for descriptor in device.descriptors():
            if self.registry.is_live(descriptor.service_id):
                self.registry.renew(descriptor.service_id)
            else:
                self.registry.register(descriptor)
            renewed += 1
        return renewed

