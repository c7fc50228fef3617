"""Master-side scheduling: intake, FIFO queue, one-unit-per-core dispatch,
completion handling and recovery from node loss.

The scheduler owns no clock and no sockets. Drivers (the TCP master or the
simulator) feed it events with explicit timestamps and carry out the
assignments it returns.
"""

from __future__ import annotations

import enum
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Mapping, MutableMapping, Protocol, Sequence

from cumulus import models
from cumulus.accounting import Ledger
from cumulus.core import (
    DEFAULT_MAX_ATTEMPTS,
    ApplicationDescriptor,
    CumulusError,
    Event,
    ExecutionUnit,
    FileSpec,
    NodeDescriptor,
    UnitResult,
    UnitState,
    Violation,
    transition,
    validate_application,
)
from cumulus.membership import Registry

logger = logging.getLogger(__name__)

UnitKey = tuple[str, str]


class ValidationFailed(CumulusError):
    def __init__(self, violations: Sequence[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class UnknownUnit(CumulusError):
    pass


class UnknownApplication(CumulusError):
    pass


class MissingInput(CumulusError):
    pass


class TransferFailed(CumulusError):
    pass


class AppState(str, enum.Enum):
    RUNNING = "Running"
    FINISHED = "Finished"
    FINISHED_WITH_FAILURES = "FinishedWithFailures"


@dataclass(frozen=True)
class Assignment:
    app_id: str
    unit_id: str
    node_id: str

    @property
    def key(self) -> UnitKey:
        return (self.app_id, self.unit_id)


@dataclass(frozen=True)
class CompletionReport:
    app_id: str
    unit_id: str
    node_id: str
    ok: bool
    exit_code: int | None = None
    started: int | None = None
    ended: int | None = None
    outputs: Mapping[str, bytes] = field(default_factory=dict)
    error: str | None = None

    @property
    def key(self) -> UnitKey:
        return (self.app_id, self.unit_id)


@dataclass
class AppRecord:
    descriptor: ApplicationDescriptor
    unit_ids: list[str]
    submitted_at: int
    dependents: dict[str, list[str]]
    state: AppState = AppState.RUNNING
    finished_at: int | None = None


@dataclass
class AppStatus:
    app_id: str
    state: AppState
    counts: dict[str, int]
    submitted_at: int
    finished_at: int | None
    makespan_ms: int

    @property
    def failed(self) -> int:
        return self.counts.get(UnitState.FAILED.value, 0)

    @property
    def finished(self) -> bool:
        return self.state is not AppState.RUNNING

    def to_json(self) -> dict[str, Any]:
        return {
            "app_id": self.app_id,
            "state": self.state.value,
            "counts": dict(sorted(self.counts.items())),
            "submitted_at": self.submitted_at,
            "finished_at": self.finished_at,
            "makespan_ms": self.makespan_ms,
        }


class SchedulingPolicy(Protocol):
    def assign(self, ready: Sequence[ExecutionUnit], nodes: Sequence[NodeDescriptor],
               free_cores: MutableMapping[str, int]) -> list[tuple[ExecutionUnit, str]]: ...


class FifoGreedyPolicy:
    """Queue order; each unit takes the first capable node (by node_id) with a free core."""

    def assign(self, ready, nodes, free_cores):
        out = []
        for unit in ready:
            for node in nodes:
                if free_cores[node.node_id] > 0 and unit.service in node.services:
                    free_cores[node.node_id] -= 1
                    out.append((unit, node.node_id))
                    break
        return out


class Scheduler:
    def __init__(self, registry: Registry, ledger: Ledger | None = None, *,
                 max_attempts: int = DEFAULT_MAX_ATTEMPTS, policy: SchedulingPolicy | None = None,
                 store: MutableMapping[str, bytes] | None = None):
        self.registry = registry
        self.ledger = ledger if ledger is not None else Ledger()
        self.max_attempts = max_attempts
        self.policy = policy or FifoGreedyPolicy()
        self.store = store if store is not None else {}
        self.units: dict[UnitKey, ExecutionUnit] = {}
        self.queue: list[UnitKey] = []
        self.in_flight: dict[UnitKey, str] = {}
        self.apps: dict[str, AppRecord] = {}
        self.draining: set[str] = set()
        self._shared_staged: dict[str, set[str]] = {}
        self._transfer_retries: Counter = Counter()
        self.trace: list[tuple[int, str, str, str]] = []

    # -- intake -------------------------------------------------------------

    def submit(self, descriptor: ApplicationDescriptor, now: int) -> str:
        violations = validate_application(descriptor)
        if descriptor.app_id in self.apps:
            violations.append(Violation("DuplicateApplication", descriptor.app_id))
        if violations:
            raise ValidationFailed(violations)
        units = models.expand(descriptor, submitted=now)
        dependents: dict[str, list[str]] = {u.unit_id: [] for u in units}
        for u in units:
            for p in u.depends_on:
                dependents[p].append(u.unit_id)
        self.apps[descriptor.app_id] = AppRecord(descriptor, [u.unit_id for u in units], now, dependents)
        for u in units:
            self.units[u.key] = u
            self.queue.append(u.key)
        self._shared_staged[descriptor.app_id] = set()
        return descriptor.app_id

    # -- dispatch -----------------------------------------------------------

    def free_cores(self) -> dict[str, int]:
        busy = Counter(self.in_flight.values())
        return {n.node_id: n.cores - busy[n.node_id] for n in self.registry.query()}

    def _ready(self, unit: ExecutionUnit) -> bool:
        return all(self.units[(unit.app_id, p)].state is UnitState.COMPLETED for p in unit.depends_on)

    def ready_units(self) -> list[ExecutionUnit]:
        return [self.units[k] for k in self.queue if self._ready(self.units[k])]

    def dispatch_cycle(self, now: int) -> list[Assignment]:
        nodes = [n for n in self.registry.query() if n.node_id not in self.draining]
        free = {n.node_id: n.cores for n in nodes}
        for node_id in self.in_flight.values():
            if node_id in free:
                free[node_id] -= 1
        pairs = self.policy.assign(self.ready_units(), nodes, free)
        if not pairs:
            return []
        taken = set()
        out = []
        for unit, node_id in pairs:
            unit = transition(unit, Event.STAGE, now)
            unit = transition(unit, Event.DISPATCH, now, node_id=node_id)
            self.units[unit.key] = unit
            self.in_flight[unit.key] = node_id
            taken.add(unit.key)
            out.append(Assignment(unit.app_id, unit.unit_id, node_id))
            self.trace.append((now, unit.app_id, unit.unit_id, node_id))
        self.queue = [k for k in self.queue if k not in taken]
        return out

    def stage_manifest(self, app_id: str, unit_id: str, node_id: str) -> list[FileSpec]:
        """Files a node needs before running the unit: app shared files (once per node) then inputs."""
        unit = self._unit(app_id, unit_id)
        staged = self._shared_staged.setdefault(app_id, set())
        files = []
        if node_id not in staged:
            files.extend(self.apps[app_id].descriptor.shared_files)
            staged.add(node_id)
        files.extend(unit.inputs)
        return files

    def stage_files(self, app_id: str, unit_id: str, direction: str, node_id: str | None = None,
                    outputs: Mapping[str, bytes] | None = None) -> dict[str, bytes]:
        """Move file contents between the master store and a unit.

        ``In`` resolves the unit's manifest against the store and returns the
        bytes by logical name. ``Out`` stores the unit's reported outputs.
        """
        if direction == "In":
            if node_id is None:
                raise ValueError("stage-in needs the target node")
            files = {}
            for f in self.stage_manifest(app_id, unit_id, node_id):
                if f.content_ref is None or f.content_ref not in self.store:
                    raise MissingInput(f"{app_id}/{unit_id}: {f.logical_name}")
                files[f.logical_name] = self.store[f.content_ref]
            return files
        if direction == "Out":
            for name, data in (outputs or {}).items():
                self.store[models.output_ref(app_id, unit_id, name)] = data
            return dict(outputs or {})
        raise ValueError(f"direction must be In or Out, not {direction!r}")

    def transfer_failed(self, app_id: str, unit_id: str, now: int) -> ExecutionUnit:
        """Staging to the node failed; the first failure requeues, the second fails the unit."""
        key = (app_id, unit_id)
        unit = self._unit(app_id, unit_id)
        self._transfer_retries[key] += 1
        self.in_flight.pop(key, None)
        if self._transfer_retries[key] > 1:
            unit = transition(unit, Event.FAIL, now, result=UnitResult(error="TransferFailed"))
            self.units[key] = unit
            self._terminal(unit, now, node_id=unit.assigned_node or "-")
        else:
            unit = transition(unit, Event.NODE_LOST, now, max_attempts=self.max_attempts + 1)
            self.units[key] = unit
            self.queue.insert(0, key)
        return unit

    def fail_unit(self, app_id: str, unit_id: str, now: int, error: str) -> ExecutionUnit:
        """Fail a queued or dispatched unit that can never run (e.g. a missing input)."""
        key = (app_id, unit_id)
        unit = transition(self._unit(app_id, unit_id), Event.FAIL, now, result=UnitResult(error=error))
        self.units[key] = unit
        node_id = self.in_flight.pop(key, None)
        self.queue = [k for k in self.queue if k != key]
        self._terminal(unit, now, node_id=node_id or "-")
        return unit

    def has_dependents(self, app_id: str, unit_id: str) -> bool:
        return bool(self.apps[app_id].dependents.get(unit_id))

    # -- progress -----------------------------------------------------------

    def mark_started(self, app_id: str, unit_id: str, node_id: str, now: int) -> bool:
        key = (app_id, unit_id)
        if self.in_flight.get(key) != node_id or self.units[key].state is not UnitState.DISPATCHED:
            logger.info("ignoring start for %s/%s from %s", app_id, unit_id, node_id)
            return False
        self.units[key] = transition(self.units[key], Event.START, now)
        return True

    def handle_completion(self, report: CompletionReport, now: int) -> bool:
        """Apply a completion report; stale or duplicate reports are logged and ignored."""
        key = report.key
        unit = self.units.get(key)
        if unit is None or self.in_flight.get(key) != report.node_id:
            logger.warning("ignoring stale completion for %s/%s from %s", report.app_id, report.unit_id, report.node_id)
            return False
        if unit.state is UnitState.DISPATCHED and report.ok:
            unit = transition(unit, Event.START, report.started if report.started is not None else now)
        if report.outputs:
            self.stage_files(report.app_id, report.unit_id, "Out", outputs=report.outputs)
        result = UnitResult(
            exit_status=report.exit_code,
            output_ids=tuple(sorted(models.output_ref(report.app_id, report.unit_id, n) for n in report.outputs)),
            error=report.error,
        )
        ended = report.ended if report.ended is not None else now
        unit = transition(unit, Event.COMPLETE if report.ok else Event.FAIL, ended, result=result)
        self.units[key] = unit
        del self.in_flight[key]
        self._terminal(unit, now, node_id=report.node_id)
        return True

    def handle_node_loss(self, node_id: str, now: int) -> list[str]:
        """Requeue (head of queue) or fail every unit in flight on a lost node."""
        lost = [k for k, n in self.in_flight.items() if n == node_id]
        requeued = []
        for key in lost:
            unit = transition(self.units[key], Event.NODE_LOST, now, max_attempts=self.max_attempts)
            self.units[key] = unit
            del self.in_flight[key]
            if unit.state is UnitState.PENDING:
                requeued.append(key)
            else:
                self._terminal(unit, now, node_id=node_id)
        self.queue = requeued + self.queue
        self.draining.discard(node_id)
        for staged in self._shared_staged.values():
            staged.discard(node_id)
        return [uid for _, uid in requeued]

    def handle_reject(self, app_id: str, unit_id: str, node_id: str, now: int) -> ExecutionUnit | None:
        """A node refused a dispatched unit; it goes back to the queue head like a loss."""
        key = (app_id, unit_id)
        if self.in_flight.get(key) != node_id:
            return None
        unit = transition(self.units[key], Event.NODE_LOST, now, max_attempts=self.max_attempts)
        self.units[key] = unit
        del self.in_flight[key]
        if unit.state is UnitState.PENDING:
            self.queue.insert(0, key)
        else:
            self._terminal(unit, now, node_id=node_id)
        return unit

    def drain(self, node_id: str) -> None:
        self.draining.add(node_id)

    def forget_node(self, node_id: str) -> None:
        self.draining.discard(node_id)
        for staged in self._shared_staged.values():
            staged.discard(node_id)

    def _terminal(self, unit: ExecutionUnit, now: int, node_id: str) -> None:
        app = self.apps[unit.app_id]
        ts = unit.timestamps
        started = ts.started if ts.started is not None else ts.dispatched
        if started is not None:
            node = self.registry.get(node_id)
            self.ledger.record_usage(
                user=app.descriptor.owner, app_id=unit.app_id, unit_id=unit.unit_id, node_id=node_id,
                started=started, ended=ts.ended if ts.ended is not None else now,
                instance_type=node.instance_type if node else None, state=unit.state.value,
            )
        if unit.state is UnitState.FAILED:
            self._cascade_failure(unit, now)
        self._check_finished(unit.app_id, now)

    def _cascade_failure(self, unit: ExecutionUnit, now: int) -> None:
        app = self.apps[unit.app_id]
        stack = list(app.dependents.get(unit.unit_id, ()))
        doomed = set()
        while stack:
            uid = stack.pop()
            key = (unit.app_id, uid)
            child = self.units[key]
            if child.state is not UnitState.PENDING or key in doomed:
                continue
            doomed.add(key)
            self.units[key] = transition(child, Event.FAIL, now, result=UnitResult(error="UpstreamFailed"))
            stack.extend(app.dependents.get(uid, ()))
        if doomed:
            self.queue = [k for k in self.queue if k not in doomed]

    def _check_finished(self, app_id: str, now: int) -> None:
        app = self.apps[app_id]
        if app.state is not AppState.RUNNING:
            return
        states = [self.units[(app_id, u)].state for u in app.unit_ids]
        if all(s.terminal for s in states):
            failed = any(s is UnitState.FAILED for s in states)
            app.state = AppState.FINISHED_WITH_FAILURES if failed else AppState.FINISHED
            app.finished_at = now

    # -- queries ------------------------------------------------------------

    def _unit(self, app_id: str, unit_id: str) -> ExecutionUnit:
        try:
            return self.units[(app_id, unit_id)]
        except KeyError:
            raise UnknownUnit(f"{app_id}/{unit_id}") from None

    def unit(self, app_id: str, unit_id: str) -> ExecutionUnit:
        return self._unit(app_id, unit_id)

    def app_units(self, app_id: str) -> list[ExecutionUnit]:
        if app_id not in self.apps:
            raise UnknownApplication(app_id)
        return [self.units[(app_id, u)] for u in self.apps[app_id].unit_ids]

    def status(self, app_id: str, now: int) -> AppStatus:
        app = self.apps.get(app_id)
        if app is None:
            raise UnknownApplication(app_id)
        counts = Counter(self.units[(app_id, u)].state.value for u in app.unit_ids)
        end = app.finished_at if app.finished_at is not None else now
        return AppStatus(app_id, app.state, dict(counts), app.submitted_at, app.finished_at, end - app.submitted_at)

    def terminal_count(self) -> int:
        return sum(1 for u in self.units.values() if u.state.terminal)

    def check_invariants(self) -> None:
        """Raise AssertionError if the queue / in-flight / terminal partition is broken."""
        pending = set(self.queue)
        flying = set(self.in_flight)
        terminal = {k for k, u in self.units.items() if u.state.terminal}
        assert len(pending) == len(self.queue), "duplicate queue entries"
        assert not (pending & flying) and not (pending & terminal) and not (flying & terminal)
        assert len(pending) + len(flying) + len(terminal) == len(self.units), "unit conservation broken"
        busy = Counter(self.in_flight.values())
        for node in self.registry.query():
            assert busy[node.node_id] <= node.cores, f"{node.node_id} oversubscribed"
