"""Programming models: turn an application payload into execution units.

Task      - a list of independent commands.
PSM       - one command template swept over the Cartesian product of parameters.
MapReduce - built-in named operators, one map unit per input partition and R reducers.
Workflow  - commands wired into a DAG by their shared files.
"""

from __future__ import annotations

import itertools
import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Mapping, Protocol, Sequence

from cumulus.core import (
    ApplicationDescriptor,
    CommandSpec,
    CumulusError,
    ExecutionUnit,
    FileSpec,
    ModelKind,
    OperatorRef,
    Timestamps,
    Violation,
)

PLACEHOLDER = re.compile(r"\{(\w+)\}")


class EmptyApplication(CumulusError):
    pass


class UnknownPlaceholder(CumulusError):
    pass


class OperatorNotFound(CumulusError):
    pass


class MissingDuration(CumulusError):
    pass


class StageFailed(CumulusError):
    pass


class StopStages(Exception):
    """Raised by a between-stages hook to end the run early."""


def output_ref(app_id: str, unit_id: str, name: str) -> str:
    """Storage key under which a unit's output file is kept."""
    return f"{app_id}/{unit_id}/{name}"


def _duration_ms(doc: Mapping[str, Any]) -> int | None:
    s = doc.get("sim_duration_s")
    return None if s is None else int(round(float(s) * 1000))


def _command(doc: Mapping[str, Any]) -> CommandSpec:
    return CommandSpec.from_json({"program": doc.get("program", ""), **{k: v for k, v in doc.items() if k != "program"}})


def _unit(app_id: str, unit_id: str, command, submitted: int | None, duration: int | None,
          depends_on: Sequence[str] = ()) -> ExecutionUnit:
    return ExecutionUnit(
        unit_id=unit_id,
        app_id=app_id,
        command=command,
        timestamps=Timestamps(submitted=submitted),
        depends_on=tuple(depends_on),
        sim_duration_ms=duration,
    )


# --------------------------------------------------------------------------
# Task model


def expand_task(payload: Mapping[str, Any], app_id: str = "", submitted: int | None = None) -> list[ExecutionUnit]:
    tasks = payload.get("tasks") or []
    if not tasks:
        raise EmptyApplication("task application has no tasks")
    return [
        _unit(app_id, f"task-{i:04d}", _command(doc), submitted, _duration_ms(doc))
        for i, doc in enumerate(tasks)
    ]


# --------------------------------------------------------------------------
# Parameter sweep model


def _substitute(text: str, binding: Mapping[str, str]) -> str:
    def repl(m: re.Match) -> str:
        name = m.group(1)
        if name not in binding:
            raise UnknownPlaceholder(name)
        return binding[name]

    return PLACEHOLDER.sub(repl, text)


def _template_placeholders(template: Mapping[str, Any]) -> set[str]:
    texts = [str(template.get("program", ""))] + [str(a) for a in template.get("args", ())]
    for key in ("inputs", "outputs"):
        for f in template.get(key, ()):
            if isinstance(f, str):
                texts.append(f)
            else:
                texts.append(f.get("name", ""))
                texts.append(f.get("content_ref") or "")
    return {m for t in texts for m in PLACEHOLDER.findall(t)}


def expand_psm(payload: Mapping[str, Any], app_id: str = "", submitted: int | None = None) -> list[ExecutionUnit]:
    """One unit per point of the parameter grid, first parameter varying slowest."""
    template = payload["template"]
    params = payload.get("parameters", [])
    names = [p["name"] for p in params]
    unknown = sorted(_template_placeholders(template) - set(names))
    if unknown:
        raise UnknownPlaceholder(", ".join(unknown))
    duration = _duration_ms(template)
    base = _command(template)
    units = []
    grid = itertools.product(*[[str(v) for v in p["values"]] for p in params])
    for i, values in enumerate(grid):
        binding = dict(zip(names, values))
        sub = lambda s: _substitute(s, binding)  # noqa: E731
        cmd = CommandSpec(
            program=sub(base.program),
            args=tuple(sub(a) for a in base.args),
            inputs=tuple(FileSpec(sub(f.logical_name), f.size_bytes, f.content_ref and sub(f.content_ref))
                         for f in base.inputs),
            outputs=tuple(FileSpec(sub(f.logical_name), f.size_bytes) for f in base.outputs),
            sim_exit_code=base.sim_exit_code,
        )
        units.append(_unit(app_id, f"psm-{i:04d}", cmd, submitted, duration))
    return units


# --------------------------------------------------------------------------
# MapReduce model


def fnv1a64(data: bytes | str) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def partition_for(key: str, reducers: int) -> int:
    return fnv1a64(key) % reducers


def _wc_map(text: str, args: Mapping[str, str]) -> Iterator[tuple[str, int]]:
    for token in text.split():
        yield token, 1


def _grep_map(text: str, args: Mapping[str, str]) -> Iterator[tuple[str, int]]:
    needle = args.get("pattern", "")
    for token in text.split():
        if needle in token:
            yield token, 1


def _int_map(text: str, args: Mapping[str, str]) -> Iterator[tuple[str, int]]:
    key = args.get("key", "sum")
    for line in text.splitlines():
        if line.strip():
            yield key, int(line)


def _sum_reduce(key: str, values: Iterable[int], args: Mapping[str, str]) -> int:
    return sum(values)


MAPPERS: dict[str, Callable[[str, Mapping[str, str]], Iterable[tuple[str, Any]]]] = {
    "word-count": _wc_map,
    "token-grep-count": _grep_map,
    "integer-sum": _int_map,
}
REDUCERS: dict[str, Callable[[str, Iterable[Any], Mapping[str, str]], Any]] = {
    "word-count": _sum_reduce,
    "token-grep-count": _sum_reduce,
    "integer-sum": _sum_reduce,
}


@dataclass
class MapReducePlan:
    map_units: list[ExecutionUnit]
    reduce_units: list[ExecutionUnit]
    # partitions[r] lists the storage keys reducer r consumes, one per map unit.
    partitions: list[list[str]]
    storage_node: str | None = None

    @property
    def units(self) -> list[ExecutionUnit]:
        return self.map_units + self.reduce_units


def plan_mapreduce(payload: Mapping[str, Any], app_id: str = "", submitted: int | None = None,
                   storage_node: str | None = None) -> MapReducePlan:
    mapper, reducer = payload["mapper"], payload["reducer"]
    if mapper not in MAPPERS:
        raise OperatorNotFound(mapper)
    if reducer not in REDUCERS:
        raise OperatorNotFound(reducer)
    r_count = int(payload.get("reducers", 1))
    inputs = [FileSpec.from_json(f) for f in payload.get("input", ())]
    if not inputs:
        raise EmptyApplication("MapReduce application has no input partitions")
    args = tuple(sorted((str(k), str(v)) for k, v in payload.get("args", {}).items()))
    duration = _duration_ms(payload)
    map_units = []
    for i, f in enumerate(inputs):
        op = OperatorRef(mapper, "map", i, r_count, inputs=(f,), args=args)
        map_units.append(_unit(app_id, f"map-{i:04d}", op, submitted, duration))
    partitions = [[output_ref(app_id, m.unit_id, f"part-{r}") for m in map_units] for r in range(r_count)]
    reduce_units = []
    for r in range(r_count):
        ins = tuple(FileSpec(f"{m.unit_id}.part-{r}", 0, ref) for m, ref in zip(map_units, partitions[r]))
        op = OperatorRef(reducer, "reduce", r, r_count, inputs=ins, args=args)
        reduce_units.append(_unit(app_id, f"reduce-{r:04d}", op, submitted, duration,
                                  depends_on=[m.unit_id for m in map_units]))
    return MapReducePlan(map_units, reduce_units, partitions, storage_node)


def execute_operator(op: OperatorRef, inputs: Mapping[str, bytes]) -> dict[str, bytes]:
    """Run a built-in operator over staged inputs, returning output files by name.

    Map outputs are ``part-<r>`` files of JSON ``[key, value]`` pairs routed by
    the FNV-1a partitioner; the reduce output is ``result``.
    """
    args = dict(op.args)
    if op.role == "map":
        fn = MAPPERS.get(op.name)
        if fn is None:
            raise OperatorNotFound(op.name)
        buckets: list[list[tuple[str, Any]]] = [[] for _ in range(op.reducers)]
        for f in op.inputs:
            text = inputs[f.logical_name].decode("utf-8")
            for key, value in fn(text, args):
                buckets[partition_for(key, op.reducers)].append((key, value))
        return {f"part-{r}": json.dumps(sorted(b)).encode("utf-8") for r, b in enumerate(buckets)}
    fn = REDUCERS.get(op.name)
    if fn is None:
        raise OperatorNotFound(op.name)
    grouped: dict[str, list[Any]] = defaultdict(list)
    for f in op.inputs:
        for key, value in json.loads(inputs[f.logical_name].decode("utf-8")):
            grouped[key].append(value)
    result = [[k, fn(k, grouped[k], args)] for k in sorted(grouped)]
    return {"result": json.dumps(result).encode("utf-8")}


# --------------------------------------------------------------------------
# Workflow model


def _edges(payload: Mapping[str, Any]) -> list[tuple[str, str, str | None]]:
    out = []
    for e in payload.get("edges", ()):
        e = list(e)
        out.append((str(e[0]), str(e[1]), str(e[2]) if len(e) > 2 else None))
    return out


def parents_of(payload: Mapping[str, Any]) -> dict[str, list[str]]:
    parents: dict[str, list[str]] = {t: [] for t in payload.get("tasks", {})}
    for a, b, _ in _edges(payload):
        if b in parents and a not in parents[b]:
            parents[b].append(a)
    return parents


def topological_order(payload: Mapping[str, Any]) -> list[str] | None:
    """Kahn order with ties broken by declaration order; None when cyclic."""
    tasks = list(payload.get("tasks", {}))
    parents = parents_of(payload)
    children: dict[str, list[str]] = defaultdict(list)
    for b, ps in parents.items():
        for a in ps:
            children[a].append(b)
    indeg = {t: len(parents[t]) for t in tasks}
    pos = {t: i for i, t in enumerate(tasks)}
    ready = sorted((t for t in tasks if indeg[t] == 0), key=pos.get)
    order = []
    while ready:
        t = ready.pop(0)
        order.append(t)
        for c in children[t]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
        ready.sort(key=pos.get)
    return order if len(order) == len(tasks) else None


def _task_files(doc: Mapping[str, Any], key: str) -> list[FileSpec]:
    return [FileSpec.from_json(f) for f in doc.get(key, ())]


def expand_workflow(payload: Mapping[str, Any], app_id: str = "", submitted: int | None = None) -> list[ExecutionUnit]:
    tasks = payload.get("tasks") or {}
    if not tasks:
        raise EmptyApplication("workflow has no tasks")
    order = topological_order(payload)
    if order is None:
        raise CumulusError("workflow has a dependency cycle")
    parents = parents_of(payload)
    produced_by: dict[str, dict[str, str]] = {}
    for tid, doc in tasks.items():
        for f in _task_files(doc, "outputs"):
            produced_by.setdefault(tid, {})[f.logical_name] = tid
    units = []
    for tid in order:
        doc = tasks[tid]
        inputs = []
        for f in _task_files(doc, "inputs"):
            src = next((p for p in parents[tid] if f.logical_name in produced_by.get(p, {})), None)
            if src is not None and f.content_ref is None:
                f = FileSpec(f.logical_name, f.size_bytes, output_ref(app_id, src, f.logical_name))
            inputs.append(f)
        base = _command(doc)
        cmd = CommandSpec(base.program, base.args, tuple(inputs), base.outputs, base.sim_exit_code)
        units.append(_unit(app_id, tid, cmd, submitted, _duration_ms(doc), depends_on=parents[tid]))
    return units


def ready_set(payload: Mapping[str, Any], completed: Iterable[str], running: Iterable[str] = ()) -> set[str]:
    done, busy = set(completed), set(running)
    return {
        t for t, ps in parents_of(payload).items()
        if t not in done and t not in busy and all(p in done for p in ps)
    }


def critical_path_ms(payload: Mapping[str, Any]) -> int:
    """Longest duration-weighted path through the DAG."""
    order = topological_order(payload)
    if order is None:
        raise CumulusError("workflow has a dependency cycle")
    parents = parents_of(payload)
    finish: dict[str, int] = {}
    for t in order:
        d = _duration_ms(payload["tasks"][t]) or 0
        finish[t] = max((finish[p] for p in parents[t]), default=0) + d
    return max(finish.values(), default=0)


# --------------------------------------------------------------------------
# Validation and dispatch by model kind


def _validate_command(doc: Any, where: str, *, require_program: bool = True) -> list[Violation]:
    out = []
    if not isinstance(doc, Mapping):
        return [Violation("BadCommand", where)]
    if require_program and not doc.get("program") and doc.get("sim_duration_s") is None:
        out.append(Violation("MissingCommand", where))
    for key in ("inputs", "outputs"):
        names = set()
        for f in doc.get(key, ()):
            name = f if isinstance(f, str) else f.get("name") if isinstance(f, Mapping) else None
            if not name:
                out.append(Violation("BadFileSpec", f"{where}.{key}"))
                continue
            if name in names:
                out.append(Violation("DuplicateFileName", f"{where}.{key}: {name}"))
            names.add(name)
            if isinstance(f, Mapping) and int(f.get("size_bytes", 0)) < 0:
                out.append(Violation("NegativeSize", f"{where}.{key}: {name}"))
    d = doc.get("sim_duration_s")
    if d is not None and float(d) < 0:
        out.append(Violation("NegativeDuration", where))
    return out


def validate_payload(model: ModelKind, payload: Any) -> list[Violation]:
    if not isinstance(payload, Mapping):
        return [Violation("BadPayload", "payload must be an object")]
    if model is ModelKind.TASK:
        tasks = payload.get("tasks")
        if not isinstance(tasks, list) or not tasks:
            return [Violation("EmptyApplication", "tasks must be a non-empty list")]
        return [v for i, t in enumerate(tasks) for v in _validate_command(t, f"tasks[{i}]")]

    if model is ModelKind.PSM:
        out = []
        template = payload.get("template")
        if not isinstance(template, Mapping) or not template.get("program"):
            return [Violation("EmptyTemplate", "template command has no program")]
        out += _validate_command(template, "template")
        params = payload.get("parameters", [])
        names = []
        for p in params:
            if p.get("name") in names:
                out.append(Violation("DuplicateParameter", str(p.get("name"))))
            names.append(p.get("name"))
            if not p.get("values"):
                out.append(Violation("EmptyParameterValues", str(p.get("name"))))
        for name in sorted(_template_placeholders(template) - set(names)):
            out.append(Violation("UnknownPlaceholder", name))
        return out

    if model is ModelKind.MAPREDUCE:
        out = []
        for role, registry in (("mapper", MAPPERS), ("reducer", REDUCERS)):
            if payload.get(role) not in registry:
                out.append(Violation("OperatorNotFound", f"{role} {payload.get(role)!r}"))
        if not payload.get("input"):
            out.append(Violation("EmptyApplication", "no input partitions"))
        if int(payload.get("reducers", 1)) < 1:
            out.append(Violation("InvalidReducers", "reducers must be >= 1"))
        return out

    if model is ModelKind.WORKFLOW:
        tasks = payload.get("tasks")
        if not isinstance(tasks, Mapping) or not tasks:
            return [Violation("EmptyApplication", "tasks must be a non-empty object")]
        out = [v for tid, t in tasks.items() for v in _validate_command(t, f"tasks.{tid}")]
        edges = _edges(payload)
        for a, b, f in edges:
            if a not in tasks or b not in tasks:
                out.append(Violation("UnknownTask", f"edge {a}->{b}"))
            elif f is not None:
                outs = {x.logical_name for x in _task_files(tasks[a], "outputs")}
                ins = {x.logical_name for x in _task_files(tasks[b], "inputs")}
                if f not in outs or f not in ins:
                    out.append(Violation("EdgeFileMismatch", f"{a}->{b} via {f}"))
        if not any(v.code == "UnknownTask" for v in out) and topological_order(payload) is None:
            out.append(Violation("CycleDetected", _cycle_members(payload)))
        return out

    return [Violation("UnknownModel", str(model))]


def _cycle_members(payload: Mapping[str, Any]) -> str:
    order = set(topological_order_partial(payload))
    return ",".join(t for t in payload["tasks"] if t not in order)


def topological_order_partial(payload: Mapping[str, Any]) -> list[str]:
    parents = parents_of(payload)
    done: list[str] = []
    changed = True
    while changed:
        changed = False
        for t, ps in parents.items():
            if t not in done and all(p in done for p in ps):
                done.append(t)
                changed = True
    return done


def expand(descriptor: ApplicationDescriptor, submitted: int | None = None) -> list[ExecutionUnit]:
    """Units for any model, in enqueue order."""
    payload, app_id = descriptor.model_payload, descriptor.app_id
    if descriptor.model is ModelKind.TASK:
        return expand_task(payload, app_id, submitted)
    if descriptor.model is ModelKind.PSM:
        return expand_psm(payload, app_id, submitted)
    if descriptor.model is ModelKind.MAPREDUCE:
        return plan_mapreduce(payload, app_id, submitted).units
    return expand_workflow(payload, app_id, submitted)


# --------------------------------------------------------------------------
# Iterative stage driver


class Session(Protocol):
    def submit(self, descriptor: ApplicationDescriptor) -> str: ...

    def wait(self, app_id: str) -> Any: ...


@dataclass
class StageResult:
    stage: int
    app_id: str
    status: Any


def run_stage_driver(
    session: Session,
    stages: int,
    tasks_per_stage: Callable[[int], ApplicationDescriptor | list[dict]],
    between_stages: Callable[[int, StageResult], None] | None = None,
    *,
    policy: str = "abort",
    owner: str = "driver",
    prefix: str = "stages",
) -> list[StageResult]:
    """Submit one bag per stage, block until it is terminal, then run the hook.

    The hook is the migration point between stages; raising StopStages from it
    ends the run with the stages completed so far.
    """
    if stages < 1:
        raise ValueError("stages must be >= 1")
    results = []
    for k in range(stages):
        bag = tasks_per_stage(k)
        if isinstance(bag, ApplicationDescriptor):
            desc = bag
        else:
            desc = ApplicationDescriptor(f"{prefix}-{k}", owner, ModelKind.TASK, {"tasks": list(bag)})
        app_id = session.submit(desc)
        status = session.wait(app_id)
        result = StageResult(k, app_id, status)
        results.append(result)
        if policy == "abort" and getattr(status, "failed", 0):
            raise StageFailed(f"stage {k}: {status.failed} unit(s) failed")
        if between_stages is not None:
            try:
                between_stages(k, result)
            except StopStages:
                break
    return results


# --------------------------------------------------------------------------
# Workflow simulation


@dataclass
class SimulationReport:
    makespan_s: float
    busy_s: dict[str, float]
    schedule: dict[str, dict[str, Any]]
    transfer_s: float
    instance_hours: dict[str, int]
    cost: int
    nodes: int = 0
    extra: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "makespan_s": self.makespan_s,
            "busy_s": dict(sorted(self.busy_s.items())),
            "schedule": {k: self.schedule[k] for k in sorted(self.schedule)},
            "transfer_s": self.transfer_s,
            "instance_hours": dict(sorted(self.instance_hours.items())),
            "cost": self.cost,
            "nodes": self.nodes,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))


def simulate_workflow(payload: Mapping[str, Any], cluster: Sequence[tuple[str, int]], netcfg=None,
                      catalog=None) -> SimulationReport:
    """Run a workflow end to end on a simulated cluster and bill it."""
    from cumulus.sim import simulate

    for tid, doc in payload.get("tasks", {}).items():
        if doc.get("sim_duration_s") is None:
            raise MissingDuration(tid)
    return simulate(payload, cluster, netcfg=netcfg, catalog=catalog)


# --------------------------------------------------------------------------
# Image-registration workflow shape

MB = 1_000_000
# Per-step durations; one subject run serially totals 69 minutes.
IR_STEPS_S = {
    "align_warp": 1200,
    "reslice": 900,
    "softmean": 840,
    "slicer": 240,
    "convert": 160,
}


def build_ir_workflow(subjects: int) -> dict[str, Any]:
    """Fan-out over subjects into per-subject chains joined by an atlas step.

    Each subject contributes two 16 MB input images; per-step outputs are
    20-40 MB. Step durations sum to 4140 s for a single subject.
    """
    tasks: dict[str, dict[str, Any]] = {}
    edges: list[list[str]] = []
    for s in range(subjects):
        tag = f"s{s:02d}"
        tasks[f"align_warp_{tag}"] = {
            "program": "align_warp",
            "args": [f"anatomy_{tag}.img", "reference.img"],
            "inputs": [
                {"name": f"anatomy_{tag}.img", "size_bytes": 16 * MB, "content_ref": f"input/anatomy_{tag}.img"},
                {"name": f"anatomy_{tag}.hdr", "size_bytes": 16 * MB, "content_ref": f"input/anatomy_{tag}.hdr"},
            ],
            "outputs": [{"name": f"warp_{tag}.warp", "size_bytes": 20 * MB}],
            "sim_duration_s": IR_STEPS_S["align_warp"],
        }
        tasks[f"reslice_{tag}"] = {
            "program": "reslice",
            "args": [f"warp_{tag}.warp"],
            "inputs": [{"name": f"warp_{tag}.warp", "size_bytes": 20 * MB}],
            "outputs": [{"name": f"resliced_{tag}.img", "size_bytes": 40 * MB}],
            "sim_duration_s": IR_STEPS_S["reslice"],
        }
        edges.append([f"align_warp_{tag}", f"reslice_{tag}", f"warp_{tag}.warp"])
        edges.append([f"reslice_{tag}", "softmean", f"resliced_{tag}.img"])
    tasks["softmean"] = {
        "program": "softmean",
        "args": ["atlas.img"],
        "inputs": [{"name": f"resliced_s{s:02d}.img", "size_bytes": 40 * MB} for s in range(subjects)],
        "outputs": [{"name": "atlas.img", "size_bytes": 40 * MB}],
        "sim_duration_s": IR_STEPS_S["softmean"],
    }
    for axis in ("x", "y", "z"):
        tasks[f"slicer_{axis}"] = {
            "program": "slicer",
            "args": ["atlas.img", f"-{axis}"],
            "inputs": [{"name": "atlas.img", "size_bytes": 40 * MB}],
            "outputs": [{"name": f"atlas_{axis}.pgm", "size_bytes": 20 * MB}],
            "sim_duration_s": IR_STEPS_S["slicer"],
        }
        tasks[f"convert_{axis}"] = {
            "program": "convert",
            "args": [f"atlas_{axis}.pgm", f"atlas_{axis}.gif"],
            "inputs": [{"name": f"atlas_{axis}.pgm", "size_bytes": 20 * MB}],
            "outputs": [{"name": f"atlas_{axis}.gif", "size_bytes": 20 * MB}],
            "sim_duration_s": IR_STEPS_S["convert"],
        }
        edges.append(["softmean", f"slicer_{axis}", "atlas.img"])
        edges.append([f"slicer_{axis}", f"convert_{axis}", f"atlas_{axis}.pgm"])
    return {"tasks": tasks, "edges": edges}
