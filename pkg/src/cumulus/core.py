"""Domain types shared across the platform and the execution-unit state machine."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Union

DEFAULT_MAX_ATTEMPTS = 3

MICROS = 1_000_000
MS_PER_MINUTE = 60_000
MS_PER_HOUR = 3_600_000


class CumulusError(Exception):
    """Base class for every error raised by the platform."""


class IllegalTransition(CumulusError):
    pass


class ModelKind(str, enum.Enum):
    TASK = "Task"
    PSM = "PSM"
    MAPREDUCE = "MapReduce"
    WORKFLOW = "Workflow"


class UnitState(str, enum.Enum):
    PENDING = "Pending"
    STAGED = "Staged"
    DISPATCHED = "Dispatched"
    RUNNING = "Running"
    COMPLETED = "Completed"
    FAILED = "Failed"

    @property
    def terminal(self) -> bool:
        return self in (UnitState.COMPLETED, UnitState.FAILED)


class Event(str, enum.Enum):
    STAGE = "stage"
    DISPATCH = "dispatch"
    START = "start"
    COMPLETE = "complete"
    FAIL = "fail"
    NODE_LOST = "node_lost"


class Origin(str, enum.Enum):
    PHYSICAL = "Physical"
    PROVISIONED = "Provisioned"


# Service tags hosted by containers.
TASK_EXEC = "task-exec"
MAPREDUCE_EXEC = "mapreduce-exec"
STORAGE = "storage"

# (state, event) -> next state. node_lost is handled separately (attempt accounting).
TRANSITIONS: dict[tuple[UnitState, Event], UnitState] = {
    (UnitState.PENDING, Event.STAGE): UnitState.STAGED,
    (UnitState.STAGED, Event.DISPATCH): UnitState.DISPATCHED,
    (UnitState.DISPATCHED, Event.START): UnitState.RUNNING,
    (UnitState.RUNNING, Event.COMPLETE): UnitState.COMPLETED,
    (UnitState.RUNNING, Event.FAIL): UnitState.FAILED,
    # Failure before start: staging errors, spawn errors, upstream failure.
    (UnitState.PENDING, Event.FAIL): UnitState.FAILED,
    (UnitState.STAGED, Event.FAIL): UnitState.FAILED,
    (UnitState.DISPATCHED, Event.FAIL): UnitState.FAILED,
    (UnitState.DISPATCHED, Event.NODE_LOST): UnitState.PENDING,
    (UnitState.RUNNING, Event.NODE_LOST): UnitState.PENDING,
}


@dataclass(frozen=True)
class FileSpec:
    logical_name: str
    size_bytes: int = 0
    content_ref: str | None = None

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"name": self.logical_name, "size_bytes": self.size_bytes}
        if self.content_ref is not None:
            doc["content_ref"] = self.content_ref
        return doc

    @classmethod
    def from_json(cls, doc: dict[str, Any] | str) -> FileSpec:
        if isinstance(doc, str):
            return cls(doc)
        return cls(
            logical_name=doc["name"],
            size_bytes=int(doc.get("size_bytes", 0)),
            content_ref=doc.get("content_ref"),
        )


@dataclass(frozen=True)
class CommandSpec:
    """An external program invocation with its staging manifests."""

    program: str
    args: tuple[str, ...] = ()
    inputs: tuple[FileSpec, ...] = ()
    outputs: tuple[FileSpec, ...] = ()
    # Exit status reported by simulated containers; real containers ignore it.
    sim_exit_code: int = 0

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "program": self.program,
            "args": list(self.args),
            "inputs": [f.to_json() for f in self.inputs],
            "outputs": [f.to_json() for f in self.outputs],
        }
        if self.sim_exit_code:
            doc["sim_exit_code"] = self.sim_exit_code
        return doc

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> CommandSpec:
        return cls(
            program=doc["program"],
            args=tuple(str(a) for a in doc.get("args", ())),
            inputs=tuple(FileSpec.from_json(f) for f in doc.get("inputs", ())),
            outputs=tuple(FileSpec.from_json(f) for f in doc.get("outputs", ())),
            sim_exit_code=int(doc.get("sim_exit_code", 0)),
        )


@dataclass(frozen=True)
class OperatorRef:
    """Reference to a built-in MapReduce operator executed by a worker."""

    name: str
    role: str  # "map" or "reduce"
    index: int
    reducers: int
    inputs: tuple[FileSpec, ...] = ()
    args: tuple[tuple[str, str], ...] = ()

    def to_json(self) -> dict[str, Any]:
        return {
            "operator": self.name,
            "role": self.role,
            "index": self.index,
            "reducers": self.reducers,
            "inputs": [f.to_json() for f in self.inputs],
            "args": dict(self.args),
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> OperatorRef:
        return cls(
            name=doc["operator"],
            role=doc["role"],
            index=int(doc["index"]),
            reducers=int(doc["reducers"]),
            inputs=tuple(FileSpec.from_json(f) for f in doc.get("inputs", ())),
            args=tuple(sorted((str(k), str(v)) for k, v in doc.get("args", {}).items())),
        )

    @property
    def outputs(self) -> tuple[FileSpec, ...]:
        if self.role == "map":
            return tuple(FileSpec(f"part-{r}") for r in range(self.reducers))
        return (FileSpec("result"),)


Command = Union[CommandSpec, OperatorRef]


def command_from_json(doc: dict[str, Any]) -> Command:
    if "operator" in doc:
        return OperatorRef.from_json(doc)
    return CommandSpec.from_json(doc)


@dataclass(frozen=True)
class Timestamps:
    submitted: int | None = None
    dispatched: int | None = None
    started: int | None = None
    ended: int | None = None

    def ordered(self) -> bool:
        present = [t for t in (self.submitted, self.dispatched, self.started, self.ended) if t is not None]
        return all(a <= b for a, b in zip(present, present[1:]))


@dataclass(frozen=True)
class UnitResult:
    exit_status: int | None = None
    output_ids: tuple[str, ...] = ()
    error: str | None = None


@dataclass(frozen=True)
class ExecutionUnit:
    unit_id: str
    app_id: str
    command: Command
    state: UnitState = UnitState.PENDING
    assigned_node: str | None = None
    attempts: int = 0
    timestamps: Timestamps = field(default_factory=Timestamps)
    result: UnitResult | None = None
    depends_on: tuple[str, ...] = ()
    sim_duration_ms: int | None = None
    history: tuple[UnitState, ...] = (UnitState.PENDING,)

    @property
    def key(self) -> tuple[str, str]:
        return (self.app_id, self.unit_id)

    @property
    def service(self) -> str:
        return MAPREDUCE_EXEC if isinstance(self.command, OperatorRef) else TASK_EXEC

    @property
    def inputs(self) -> tuple[FileSpec, ...]:
        return self.command.inputs

    @property
    def outputs(self) -> tuple[FileSpec, ...]:
        return self.command.outputs

    def to_json(self) -> dict[str, Any]:
        ts = self.timestamps
        return {
            "unit_id": self.unit_id,
            "app_id": self.app_id,
            "command": self.command.to_json(),
            "state": self.state.value,
            "assigned_node": self.assigned_node,
            "attempts": self.attempts,
            "timestamps": {
                "submitted": ts.submitted,
                "dispatched": ts.dispatched,
                "started": ts.started,
                "ended": ts.ended,
            },
            "depends_on": list(self.depends_on),
            "sim_duration_ms": self.sim_duration_ms,
            "result": None if self.result is None else {
                "exit_status": self.result.exit_status,
                "output_ids": list(self.result.output_ids),
                "error": self.result.error,
            },
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> ExecutionUnit:
        ts = doc.get("timestamps", {})
        state = UnitState(doc.get("state", "Pending"))
        res = doc.get("result")
        return cls(
            unit_id=doc["unit_id"],
            app_id=doc["app_id"],
            command=command_from_json(doc["command"]),
            state=state,
            assigned_node=doc.get("assigned_node"),
            attempts=int(doc.get("attempts", 0)),
            timestamps=Timestamps(**{k: ts.get(k) for k in ("submitted", "dispatched", "started", "ended")}),
            depends_on=tuple(doc.get("depends_on", ())),
            sim_duration_ms=doc.get("sim_duration_ms"),
            result=None if res is None else UnitResult(res.get("exit_status"), tuple(res.get("output_ids", ())),
                                                       res.get("error")),
            # The audit trail stays with the scheduler; a decoded unit starts a fresh one.
            history=(state,),
        )


def transition(
    unit: ExecutionUnit,
    event: Event | str,
    now: int,
    *,
    node_id: str | None = None,
    result: UnitResult | None = None,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
) -> ExecutionUnit:
    """Apply ``event`` to ``unit`` and return the new unit.

    Raises IllegalTransition without touching ``unit`` when the event does
    not apply to its state. A node loss that would exceed ``max_attempts``
    yields a Failed unit whose result error is ``AttemptsExceeded``.
    """
    event = Event(event)
    target = TRANSITIONS.get((unit.state, event))
    if target is None:
        raise IllegalTransition(f"{unit.app_id}/{unit.unit_id}: {event.value} not allowed in {unit.state.value}")
    ts = unit.timestamps

    if event is Event.NODE_LOST:
        if unit.attempts + 1 > max_attempts:
            return replace(
                unit,
                state=UnitState.FAILED,
                timestamps=replace(ts, ended=max(now, _latest(ts))),
                result=UnitResult(error="AttemptsExceeded"),
                history=unit.history + (UnitState.FAILED,),
            )
        return replace(
            unit,
            state=UnitState.PENDING,
            assigned_node=None,
            attempts=unit.attempts + 1,
            timestamps=Timestamps(submitted=ts.submitted),
            history=unit.history + (UnitState.PENDING,),
        )

    changes: dict[str, Any] = {"state": target, "history": unit.history + (target,)}
    now = max(now, _latest(ts))
    if event is Event.DISPATCH:
        if node_id is None:
            raise IllegalTransition("dispatch requires a node_id")
        changes["assigned_node"] = node_id
        changes["attempts"] = max(unit.attempts, 1)
        changes["timestamps"] = replace(ts, dispatched=now)
    elif event is Event.START:
        changes["timestamps"] = replace(ts, started=now)
    elif event in (Event.COMPLETE, Event.FAIL):
        changes["timestamps"] = replace(ts, ended=now)
        changes["result"] = result if result is not None else UnitResult(exit_status=0 if event is Event.COMPLETE else None)
    return replace(unit, **changes)


def _latest(ts: Timestamps) -> int:
    return max((t for t in (ts.submitted, ts.dispatched, ts.started, ts.ended) if t is not None), default=0)


@dataclass(frozen=True)
class NodeDescriptor:
    node_id: str
    address: str
    cores: int
    memory_mb: int = 0
    os_tag: str = ""
    services: frozenset[str] = frozenset({TASK_EXEC})
    origin: Origin = Origin.PHYSICAL
    instance_type: str | None = None
    lease_start: int | None = None

    def problems(self) -> list[str]:
        out = []
        if not self.node_id:
            out.append("empty node_id")
        if self.cores < 1:
            out.append("cores must be >= 1")
        if self.origin is Origin.PROVISIONED and (self.instance_type is None or self.lease_start is None):
            out.append("provisioned node needs instance_type and lease_start")
        return out

    def to_json(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "address": self.address,
            "cores": self.cores,
            "memory_mb": self.memory_mb,
            "os_tag": self.os_tag,
            "services": sorted(self.services),
            "origin": self.origin.value,
            "instance_type": self.instance_type,
            "lease_start": self.lease_start,
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> NodeDescriptor:
        return cls(
            node_id=doc["node_id"],
            address=doc.get("address", ""),
            cores=int(doc["cores"]),
            memory_mb=int(doc.get("memory_mb", 0)),
            os_tag=doc.get("os_tag", ""),
            services=frozenset(doc.get("services", (TASK_EXEC,))),
            origin=Origin(doc.get("origin", "Physical")),
            instance_type=doc.get("instance_type"),
            lease_start=doc.get("lease_start"),
        )


@dataclass(frozen=True)
class ApplicationDescriptor:
    app_id: str
    owner: str
    model: ModelKind
    model_payload: dict[str, Any]
    shared_files: tuple[FileSpec, ...] = ()
    submitted_at: int | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "app_id": self.app_id,
            "owner": self.owner,
            "model": self.model.value,
            "shared_files": [f.to_json() for f in self.shared_files],
            "payload": self.model_payload,
            "submitted_at": self.submitted_at,
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> ApplicationDescriptor:
        return cls(
            app_id=str(doc.get("app_id", "")),
            owner=str(doc.get("owner", "")),
            model=ModelKind(doc["model"]),
            model_payload=doc.get("payload", {}),
            shared_files=tuple(FileSpec.from_json(f) for f in doc.get("shared_files", ())),
            submitted_at=doc.get("submitted_at"),
        )


@dataclass(frozen=True)
class Violation:
    code: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.code}: {self.detail}" if self.detail else self.code


def validate_application(descriptor: ApplicationDescriptor) -> list[Violation]:
    """Every schema or invariant breach in ``descriptor``; empty means valid."""
    from cumulus import models

    violations = []
    if not descriptor.app_id:
        violations.append(Violation("MissingAppId"))
    if not descriptor.owner:
        violations.append(Violation("EmptyOwner"))
    violations.extend(_duplicate_names(descriptor.shared_files, "shared_files"))
    for f in descriptor.shared_files:
        if f.size_bytes < 0:
            violations.append(Violation("NegativeSize", f.logical_name))
    violations.extend(models.validate_payload(descriptor.model, descriptor.model_payload))
    return violations


def _duplicate_names(files, where: str) -> list[Violation]:
    seen, out = set(), []
    for f in files:
        if f.logical_name in seen:
            out.append(Violation("DuplicateFileName", f"{where}: {f.logical_name}"))
        seen.add(f.logical_name)
    return out


# Money is kept in integer micro-units of the currency.

def to_micros(amount: str | int | float | Decimal) -> int:
    if isinstance(amount, int):
        return amount * MICROS
    if isinstance(amount, str):
        amount = amount.strip().lstrip("$")
    value = (Decimal(str(amount)) * MICROS).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    return int(value)


def format_money(micros: int, places: int = 2) -> str:
    """Render micro-units as ``$1.40``; more places are kept when needed."""
    sign = "-" if micros < 0 else ""
    value = Decimal(abs(micros)) / MICROS
    if value != value.quantize(Decimal(1).scaleb(-places)):
        return f"{sign}${value.normalize():f}"
    return f"{sign}${value:.{places}f}"


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def wall_minutes(started_ms: int, ended_ms: int) -> int:
    return max(1, ceil_div(max(0, ended_ms - started_ms), MS_PER_MINUTE))


def billed_hours(uptime_ms: int) -> int:
    return max(1, ceil_div(uptime_ms, MS_PER_HOUR))
