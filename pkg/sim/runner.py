"""Scenario runner.

Builds a fresh framework for one scenario, spawns the fleet and drives
renewals, probes, bus ticks, telemetry and the workload from one timeline.
Under the virtual clock the report depends only on the scenario and the seed.
"""
from __future__ import annotations

import heapq
import itertools
import logging
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

from adapters.status import status_for
from assembler.specs import CompositeSpec, SplitMapping
from bus.services import BusEvent, topic_matches
from codec.services import Codec, EncodedMessage
from core.capabilities import parse_capability, topic_for_update
from core.clock import QUANTUM_MS, Clock, EventScheduler, VirtualClock, WallClock
from core.conf import FrameworkConfig
from core.descriptors import WireFormat
from core.errors import FrameworkError
from core.ids import SequentialIds
from core.runtime import Framework
from core.values import CanonicalMessage, to_canonical
from gateway.services import ConsumerContract

from .devices import SimFleet
from .scenario import AssertionModel, Scenario, WorkloadModel

logger = logging.getLogger(__name__)

REPORT_CAPABILITY = 'sim.scenario.report'

# same-instant ordering: faults, renewals, probes, bus, traffic, checks
FAULTS, RENEWALS, PROBES, BUS, TRAFFIC, CHECKS = range(6)


class WallTimeline:
    """EventScheduler counterpart that waits on the wall clock between events."""

    def __init__(self, clock: Clock) -> None:
        self.clock = clock
        self._queue: list[tuple[int, int, int, Callable[[], None]]] = []
        self._seq = itertools.count(1)
        self._lock = threading.Lock()

    @property
    def now_ms(self) -> int:
        return self.clock.now_ms()

    def schedule(self, ts_ms: int, action: Callable[[], None], priority: int = 0, label: str = '') -> None:
        with self._lock:
            heapq.heappush(self._queue, (ts_ms, priority, next(self._seq), action))

    def run(self, until_ms: Optional[int] = None) -> int:
        executed = 0
        while True:
            with self._lock:
                if not self._queue or (until_ms is not None and self._queue[0][0] > until_ms):
                    break
                ts_ms, _, _, action = heapq.heappop(self._queue)
            self.clock.sleep_ms(ts_ms - self.clock.now_ms())
            action()
            executed += 1
        if until_ms is not None:
            self.clock.sleep_ms(until_ms - self.clock.now_ms())
        return executed


@dataclass(frozen=True, slots=True)
class PlannedRequest:
    request_id: str
    at_ms: int
    item: WorkloadModel
    payload: EncodedMessage


@dataclass(frozen=True, slots=True)
class RequestResult:
    request_id: str
    capability: str
    consumer: str
    at_ms: int
    outcome: str
    latency_ms: int
    status: int
    transaction_id: str
    path: str = ''

    def as_dict(self) -> dict:
        return {
            'request_id': self.request_id,
            'capability': self.capability,
            'consumer': self.consumer,
            'at_ms': self.at_ms,
            'outcome': self.outcome,
            'latency_ms': self.latency_ms,
            'status': self.status,
            'transaction_id': self.transaction_id,
            'path': self.path,
        }


@dataclass(slots=True)
class ScenarioReport:
    scenario: str
    seed: int
    clock: str
    horizon_ms: int
    requests: list[dict] = field(default_factory=list)
    audit: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    monitor: list[dict] = field(default_factory=list)
    registry: list[dict] = field(default_factory=list)
    assertions: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check['passed'] for check in self.assertions)

    @property
    def failures(self) -> list[dict]:
        return [check for check in self.assertions if not check['passed']]

    def summary(self) -> dict:
        outcomes = Counter(request['outcome'] for request in self.requests)
        return {
            'requests': len(self.requests),
            'audited_requests': sum(1 for record in self.audit if record['kind'] == 'request'),
            'outcomes': dict(sorted(outcomes.items())),
        }

    def as_dict(self) -> dict:
        return {
            'scenario': self.scenario,
            'seed': self.seed,
            'clock': self.clock,
            'horizon_ms': self.horizon_ms,
            'summary': self.summary(),
            'requests': self.requests,
            'audit': self.audit,
            'events': self.events,
            'monitor': self.monitor,
            'registry': self.registry,
            'assertions': self.assertions,
            'passed': self.passed,
        }

    def to_message(self) -> CanonicalMessage:
        return CanonicalMessage(
            message_id=f'report-{self.seed}',
            capability=REPORT_CAPABILITY,
            timestamp_ms=self.horizon_ms,
            body=to_canonical(self.as_dict()),
            headers={'x-scenario': self.scenario} if self.scenario else {},
        )

    def to_jsonform(self, codec: Optional[Codec] = None) -> bytes:
        codec = codec or Codec(max_bytes=64 * 1024 * 1024)
        return codec.encode(self.to_message(), WireFormat.JSON).data


class ScenarioRunner:
    def __init__(self, scenario: Scenario, seed: Optional[int] = None, base_config: Optional[FrameworkConfig] = None) -> None:
        self.scenario = scenario
        self.seed = scenario.clock.seed if seed is None else seed
        self.virtual = scenario.clock.kind == 'virtual'
        config = (base_config or FrameworkConfig()).with_overrides(scenario.config)
        device_tokens = {device.token: device.device_id for device in scenario.devices if device.token}
        if device_tokens:
            config = config.with_overrides({'tokens': {**config.tokens, **device_tokens}})
        self.config = config
        self.horizon_ms = self._horizon()
        self._results: list[tuple[int, int, RequestResult]] = []
        self._events: list[dict] = []
        self._checks: list[dict] = []
        self._lock = threading.Lock()

    def _horizon(self) -> int:
        if self.scenario.clock.duration_ms is not None:
            return self.scenario.clock.duration_ms
        ends = [0]
        ends += [item.at_ms + (item.repeat - 1) * item.every_ms for item in self.scenario.workload]
        ends += [fault.start_ms + fault.duration_ms for fault in self.scenario.faults]
        ends += [check.at_ms for check in self.scenario.assertions if check.at_ms is not None]
        return max(ends)

    # --- setup -------------------------------------------------------------

    def _build(self) -> None:
        if self.virtual:
            clock = VirtualClock()
            self.timeline = EventScheduler(clock)
        else:
            clock = WallClock()
            self.timeline = WallTimeline(clock)
        self.clock = clock
        self.origin = clock.now_ms()
        self.framework = Framework(self.config, clock, SequentialIds(self.seed), in_memory=True)
        framework = self.framework
        try:
            framework.bus.subscribe('#', handler=self._log_event)
            for raw in self.scenario.composites:
                framework.registry.register_composite(CompositeSpec.from_dict(raw))
            for raw in self.scenario.splits:
                framework.gateway.register_split(SplitMapping.from_dict(raw))
            self.fleet = SimFleet(
                framework.registry, framework.directory, clock, framework.codec, self.seed, framework.channel, self.origin,
            )
            for model in self.scenario.devices:
                self.fleet.spawn(model)
            self.plan = self._plan_workload()
        except Exception:
            framework.close()
            raise

    def _plan_workload(self) -> list[PlannedRequest]:
        planned = []
        anonymous = itertools.count(1)
        for item in self.scenario.workload:
            for n in range(item.repeat):
                if item.id:
                    request_id = item.id if item.repeat == 1 else f'{item.id}#{n + 1}'
                else:
                    request_id = f'req-{next(anonymous)}'
                at = item.at_ms + n * item.every_ms
                message = CanonicalMessage(
                    message_id=request_id,
                    capability=item.capability,
                    timestamp_ms=self.origin + at,
                    body=to_canonical(item.payload),
                )
                planned.append(PlannedRequest(request_id, at, item, self.framework.codec.encode(message, item.format)))
        return planned

    def _at(self, offset_ms: int) -> int:
        return self.origin + offset_ms

    def _repeat(self, first_ms: int, period_ms: int, action: Callable[[int], None], priority: int, label: str) -> None:
        """Run ``action(offset)`` at first_ms, first_ms + period_ms, ... up to the horizon."""
        def fire(offset: int) -> None:
            action(offset)
            following = offset + period_ms
            if following <= self.horizon_ms:
                self.timeline.schedule(self._at(following), lambda: fire(following), priority, label)

        if first_ms <= self.horizon_ms:
            self.timeline.schedule(self._at(first_ms), lambda: fire(first_ms), priority, label)

    def _schedule(self, pool: Optional[ThreadPoolExecutor]) -> None:
        cfg = self.config
        framework = self.framework
        for fault in self.scenario.faults:
            spec = fault.to_spec()
            self.timeline.schedule(self._at(spec.start_ms), lambda spec=spec: self.fleet.inject_fault(spec), FAULTS, 'fault')
        for model in self.scenario.devices:
            half = max(QUANTUM_MS, model.lease_ttl_ms // 2)
            self._repeat(half, half, lambda offset, d=model.device_id: self.fleet.renew(d, self._at(offset)), RENEWALS, 'renew')
            for profile in model.capabilities:
                if profile.telemetry_period_ms:
                    self._repeat(
                        profile.telemetry_period_ms,
                        profile.telemetry_period_ms,
                        lambda offset, d=model.device_id, c=profile.capability: self._telemetry(d, c, offset),
                        TRAFFIC,
                        'telemetry',
                    )
        interval = cfg.monitor.probe_interval_ms
        self._repeat(interval, interval, lambda offset: framework.maintain(self._at(offset)), PROBES, 'maintain')
        self._repeat(interval, interval, lambda offset: framework.monitor.run_cycle(self._at(offset)), PROBES, 'probe')
        tick = cfg.bus.tick_interval_ms
        self._repeat(tick, tick, lambda offset: framework.bus.tick(self._at(offset)), BUS, 'tick')
        for planned in self.plan:
            if planned.at_ms > self.horizon_ms:
                continue
            if pool is None:
                action = lambda planned=planned: self._issue(planned)
            else:
                action = lambda planned=planned: pool.submit(self._issue, planned)
            self.timeline.schedule(self._at(planned.at_ms), action, TRAFFIC, 'request')
        for index, check in enumerate(self.scenario.assertions):
            if check.at_ms is not None and check.type in ('classification', 'registry', 'events'):
                self.timeline.schedule(
                    self._at(check.at_ms), lambda index=index, check=check: self._evaluate(index, check), CHECKS, 'check',
                )

    # --- traffic -----------------------------------------------------------

    def _issue(self, planned: PlannedRequest) -> None:
        item = planned.item
        contract = ConsumerContract(item.capability, item.token, item.format, item.deadline_ms, item.consumer)
        start = self._at(planned.at_ms) if self.virtual else None
        served = self.framework.gateway.serve(contract, planned.payload, start)
        status = 200 if served.ok else status_for(served.error.kind)
        result = RequestResult(
            request_id=planned.request_id,
            capability=served.capability,
            consumer=item.consumer,
            at_ms=planned.at_ms,
            outcome=served.outcome,
            latency_ms=served.latency_ms,
            status=status,
            transaction_id=served.transaction_id,
            path=served.path,
        )
        with self._lock:
            self._results.append((planned.at_ms, len(self._results), result))

    def _telemetry(self, device_id: str, capability: str, offset: int) -> None:
        now = self._at(offset)
        device = self.fleet.device(device_id)
        if device.is_down(now):
            return
        topic = topic_for_update(parse_capability(capability))
        try:
            self.framework.gateway.publish_upstream(device.telemetry_token(now), topic, device.telemetry(capability, now))
        except FrameworkError as exc:
            logger.info('sim: telemetria de %s recusada (%s)', device_id, exc.kind.value)

    def _log_event(self, event: BusEvent) -> None:
        message = event.payload
        entry = {
            'at_ms': self.clock.now_ms() - self.origin,
            'topic': event.topic,
            'delivery_id': event.delivery_id,
            'attempt': event.attempt,
            'message_id': message.message_id,
            'capability': message.capability.name,
        }
        with self._lock:
            self._events.append(entry)

    # --- assertions --------------------------------------------------------

    def _requests(self) -> list[RequestResult]:
        with self._lock:
            return [result for _, _, result in sorted(self._results, key=lambda row: (row[0], row[1]))]

    def _named(self, name: str) -> list[RequestResult]:
        return [r for r in self._requests() if r.request_id == name or r.request_id.startswith(f'{name}#')]

    def _evaluate(self, index: int, check: AssertionModel) -> None:
        try:
            passed, detail = getattr(self, f'_assert_{check.type}')(check)
        except FrameworkError as exc:
            passed, detail = False, str(exc)
        entry = {'index': index, 'type': check.type, 'passed': passed, 'detail': detail}
        with self._lock:
            self._checks.append(entry)
        if not passed:
            logger.warning('sim: verificacao %s (%s) falhou: %s', index, check.type, detail)

    def _assert_latency(self, check: AssertionModel) -> tuple[bool, str]:
        matched = self._named(check.request)
        if not matched:
            return False, f'no request named {check.request}'
        problems = []
        for result in matched:
            latency = result.latency_ms
            if check.equals_ms is not None and abs(latency - check.equals_ms) > QUANTUM_MS:
                problems.append(f'{result.request_id} took {latency} ms, expected {check.equals_ms}')
            if check.max_ms is not None and latency > check.max_ms:
                problems.append(f'{result.request_id} took {latency} ms, above {check.max_ms}')
            if check.min_ms is not None and latency < check.min_ms:
                problems.append(f'{result.request_id} took {latency} ms, below {check.min_ms}')
        latencies = ', '.join(str(r.latency_ms) for r in matched)
        return not problems, '; '.join(problems) or f'latency {latencies} ms'

    def _assert_outcome(self, check: AssertionModel) -> tuple[bool, str]:
        matched = self._named(check.request)
        if not matched:
            return False, f'no request named {check.request}'
        wrong = [f'{r.request_id}={r.outcome}' for r in matched if r.outcome != check.expected]
        return not wrong, ', '.join(wrong) or f'all {check.expected}'

    def _assert_status(self, check: AssertionModel) -> tuple[bool, str]:
        matched = self._named(check.request)
        if not matched:
            return False, f'no request named {check.request}'
        wrong = [f'{r.request_id}={r.status}' for r in matched if r.status != check.expected]
        return not wrong, ', '.join(wrong) or f'all {check.expected}'

    def _assert_outcome_counts(self, check: AssertionModel) -> tuple[bool, str]:
        after = check.after_ms or 0
        counts = Counter(
            r.outcome for r in self._requests()
            if r.at_ms >= after and (check.capability is None or r.capability == check.capability)
        )
        problems = [
            f'{outcome}: {counts.get(outcome, 0)} != {wanted}'
            for outcome, wanted in sorted((check.expected or {}).items())
            if counts.get(outcome, 0) != wanted
        ]
        problems += [f'{outcome}: {counts[outcome]} unexpected' for outcome in check.absent if counts.get(outcome, 0)]
        return not problems, '; '.join(problems) or str(dict(sorted(counts.items())))

    def _assert_classification(self, check: AssertionModel) -> tuple[bool, str]:
        state = self.framework.monitor.state(check.service_id)
        seen = state.last_classification.value if state.last_classification else None
        problems = []
        if check.expected is not None and seen != check.expected:
            problems.append(f'classified {seen}, expected {check.expected}')
        if check.breaker is not None and state.breaker.value != check.breaker:
            problems.append(f'breaker {state.breaker.value}, expected {check.breaker}')
        return not problems, '; '.join(problems) or f'{seen} / {state.breaker.value}'

    def _assert_registry(self, check: AssertionModel) -> tuple[bool, str]:
        found = [d.service_id for d in self.framework.registry.discover(check.capability)]
        present = bool(found)
        detail = ', '.join(found) or 'no provider'
        return present == check.present, detail

    def _assert_events(self, check: AssertionModel) -> tuple[bool, str]:
        with self._lock:
            count = sum(1 for e in self._events if topic_matches(check.topic, e['topic']) and e['attempt'] == 1)
        return count == check.expected, f'{count} event(s) on {check.topic}'

    # --- run ---------------------------------------------------------------

    def run(self) -> ScenarioReport:
        self._build()
        logger.info(
            'sim: cenario %s (seed %s, %s, horizonte %s ms)',
            self.scenario.name or '-', self.seed, self.scenario.clock.kind, self.horizon_ms,
        )
        pool = None if self.virtual else ThreadPoolExecutor(max_workers=32, thread_name_prefix='sim')
        try:
            self._schedule(pool)
            self.timeline.run(until_ms=self._at(self.horizon_ms))
            if pool is not None:
                pool.shutdown(wait=True)
            for index, check in enumerate(self.scenario.assertions):
                if check.at_ms is None or check.type not in ('classification', 'registry', 'events'):
                    self._evaluate(index, check)
            return self._report()
        finally:
            if pool is not None:
                pool.shutdown(wait=False)
            self.framework.close()

    def _report(self) -> ScenarioReport:
        framework = self.framework
        with self._lock:
            events = list(self._events)
            checks = sorted(self._checks, key=lambda entry: entry['index'])
        return ScenarioReport(
            scenario=self.scenario.name,
            seed=self.seed,
            clock=self.scenario.clock.kind,
            horizon_ms=self.horizon_ms,
            requests=[result.as_dict() for result in self._requests()],
            audit=[record.as_dict() for record in framework.auditor.query()],
            events=events,
            monitor=[state.as_dict() for state in framework.monitor.states()],
            registry=[entry.as_dict() for entry in framework.registry.entries()],
            assertions=checks,
        )


def run_scenario(scenario: Scenario, seed: Optional[int] = None, base_config: Optional[FrameworkConfig] = None) -> ScenarioReport:
    return ScenarioRunner(scenario, seed, base_config).run()
