"""The node daemon: profiles its host, registers and heartbeats with the
master, and runs the units it is handed, at most one per core."""

from __future__ import annotations

import asyncio
import base64
import json
import logging
import os
import platform
import socket
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

from cumulus import models
from cumulus.core import (
    MAPREDUCE_EXEC,
    TASK_EXEC,
    CommandSpec,
    CumulusError,
    ExecutionUnit,
    NodeDescriptor,
    OperatorRef,
    Origin,
)
from cumulus.provisioning import DEFAULT_CATALOG, Catalog
from cumulus.transport import Connection, Envelope, Sender, split_address

if TYPE_CHECKING:
    from cumulus.sim import SimCloud

logger = logging.getLogger(__name__)


class RegistrationRefused(CumulusError):
    pass


class MasterUnreachable(CumulusError):
    pass


class ServiceNotHosted(CumulusError):
    pass


def now_ms() -> int:
    return int(time.time() * 1000)


@dataclass
class ContainerConfig:
    master: str = "127.0.0.1:7070"
    services: frozenset[str] = frozenset({TASK_EXEC, MAPREDUCE_EXEC})
    node_id: str | None = None
    address: str = ""
    cores_override: int | None = None
    heartbeat_interval_ms: int = 2000
    work_dir: str = "./cumulus-work"
    instance_type: str | None = None
    origin: Origin = Origin.PHYSICAL
    lease_start: int | None = None
    connect_retries: int = 10
    retry_delay_ms: int = 500

    def __post_init__(self):
        self.services = frozenset(self.services)
        self.origin = Origin(self.origin)
        if not self.services:
            raise ValueError("a container must host at least one service")
        if self.heartbeat_interval_ms <= 0:
            raise ValueError("heartbeat_interval_ms must be > 0")

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> ContainerConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown container config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> ContainerConfig:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_json(self) -> dict[str, Any]:
        return {
            "master": self.master,
            "services": sorted(self.services),
            "node_id": self.node_id,
            "address": self.address,
            "cores_override": self.cores_override,
            "heartbeat_interval_ms": self.heartbeat_interval_ms,
            "work_dir": self.work_dir,
            "instance_type": self.instance_type,
            "origin": self.origin.value,
            "lease_start": self.lease_start,
            "connect_retries": self.connect_retries,
            "retry_delay_ms": self.retry_delay_ms,
        }


def _host_memory_mb() -> int:
    try:
        return os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES") // (1024 * 1024)
    except (ValueError, OSError, AttributeError):
        return 0


def profile_node(config: ContainerConfig, catalog: Catalog | None = None) -> NodeDescriptor:
    """Describe this node. Simulated instances take cores and memory from the catalog."""
    catalog = catalog or DEFAULT_CATALOG
    node_id = config.node_id or f"{socket.gethostname()}-{os.getpid()}"
    if config.instance_type is not None and config.instance_type in catalog:
        itype = catalog[config.instance_type]
        cores, memory = itype.cores, itype.memory_mb
    else:
        cores, memory = os.cpu_count() or 1, _host_memory_mb()
    if config.cores_override is not None:
        cores = config.cores_override
    return NodeDescriptor(
        node_id=node_id,
        address=config.address or node_id,
        cores=cores,
        memory_mb=memory,
        os_tag=platform.system().lower(),
        services=config.services,
        origin=config.origin,
        instance_type=config.instance_type,
        lease_start=config.lease_start,
    )


def _safe_path(root: Path, name: str) -> Path:
    path = (root / name).resolve()
    if root.resolve() not in path.parents and path != root.resolve():
        raise ValueError(f"file name escapes work dir: {name!r}")
    return path


class Container:
    """A running node daemon connected to a master over TCP."""

    def __init__(self, config: ContainerConfig, catalog: Catalog | None = None):
        self.config = config
        self.descriptor = profile_node(config, catalog)
        self.conn: Connection | None = None
        self.running: dict[tuple[str, str], asyncio.Task] = {}
        self.heartbeats_sent = 0
        self.completed_reports: list[dict[str, Any]] = []
        self._tasks: list[asyncio.Task] = []
        self._draining = False
        self._stopped = asyncio.Event()
        self._procs: dict[tuple[str, str], asyncio.subprocess.Process] = {}

    @property
    def node_id(self) -> str:
        return self.descriptor.node_id

    async def start(self) -> Container:
        host, port = split_address(self.config.master)
        last: Exception | None = None
        for _ in range(max(1, self.config.connect_retries)):
            try:
                self.conn = await Connection.open(host, port, self.node_id)
                break
            except OSError as exc:
                last = exc
                await asyncio.sleep(self.config.retry_delay_ms / 1000)
        else:
            raise MasterUnreachable(f"{self.config.master}: {last}")
        await self.conn.send("register", {"descriptor": self.descriptor.to_json()})
        reply = await self.conn.recv()
        if reply is None or reply.msg_type != "register_ok":
            self.conn.close()
            reason = reply.payload.get("message") if reply is not None and isinstance(reply.payload, dict) else "closed"
            raise RegistrationRefused(f"{self.node_id}: {reason}")
        self._tasks = [asyncio.create_task(self._heartbeat_loop()), asyncio.create_task(self._read_loop())]
        logger.info("container %s registered with %s (%d cores)", self.node_id, self.config.master,
                    self.descriptor.cores)
        return self

    async def wait_closed(self) -> None:
        await self._stopped.wait()

    async def _heartbeat_loop(self) -> None:
        interval = self.config.heartbeat_interval_ms / 1000
        try:
            while True:
                await asyncio.sleep(interval)
                await self.conn.send("heartbeat", {"at": now_ms()})
                self.heartbeats_sent += 1
        except (ConnectionError, asyncio.CancelledError):
            pass

    async def _read_loop(self) -> None:
        try:
            while True:
                env = await self.conn.recv()
                if env is None:
                    break
                await self._on_message(env)
        except (ConnectionError, CumulusError) as exc:
            logger.warning("container %s lost master connection: %s", self.node_id, exc)
        except asyncio.CancelledError:
            return
        if not self._stopped.is_set():
            await self.stop("Abrupt")

    async def _on_message(self, env: Envelope) -> None:
        if env.msg_type == "dispatch":
            self.accept(env.payload)
        elif env.msg_type == "shutdown":
            asyncio.create_task(self.stop(env.payload.get("mode", "Graceful") if env.payload else "Graceful"))

    def accept(self, payload: dict[str, Any]) -> None:
        unit = ExecutionUnit.from_json(payload["unit"])
        files = {k: base64.b64decode(v) for k, v in payload.get("files", {}).items()}
        reason = None
        if unit.service not in self.config.services:
            reason = f"ServiceNotHosted: {unit.service}"
        elif len(self.running) >= self.descriptor.cores:
            reason = "NoFreeCore"
        elif self._draining:
            reason = "Draining"
        if reason is not None:
            asyncio.create_task(self._send("reject", {"app_id": unit.app_id, "unit_id": unit.unit_id,
                                                      "reason": reason}))
            return
        self.running[unit.key] = asyncio.create_task(self._run(unit, files))

    async def _send(self, msg_type: str, payload: Any) -> None:
        try:
            await self.conn.send(msg_type, payload)
        except (ConnectionError, AttributeError):
            logger.warning("container %s could not send %s", self.node_id, msg_type)

    async def _run(self, unit: ExecutionUnit, files: dict[str, bytes]) -> None:
        try:
            report = await self.execute_unit(unit, files)
            self.completed_reports.append(report)
            await self._send("result", report)
        finally:
            self.running.pop(unit.key, None)

    async def execute_unit(self, unit: ExecutionUnit, files: dict[str, bytes]) -> dict[str, Any]:
        """Stage files into the unit's directory, run it, and build the result report."""
        workdir = Path(self.config.work_dir) / unit.app_id / unit.unit_id
        workdir.mkdir(parents=True, exist_ok=True)
        report: dict[str, Any] = {"app_id": unit.app_id, "unit_id": unit.unit_id, "ok": False,
                                  "exit_code": None, "outputs": {}, "error": None}
        for name, data in files.items():
            _safe_path(workdir, name).parent.mkdir(parents=True, exist_ok=True)
            _safe_path(workdir, name).write_bytes(data)
        missing = [f.logical_name for f in unit.inputs if not _safe_path(workdir, f.logical_name).exists()]
        started = now_ms()
        report["started"] = started
        if missing:
            report.update(error=f"MissingInput: {', '.join(missing)}", ended=now_ms())
            return report
        await self._send("started", {"app_id": unit.app_id, "unit_id": unit.unit_id, "at": started})

        if isinstance(unit.command, OperatorRef):
            try:
                inputs = {f.logical_name: _safe_path(workdir, f.logical_name).read_bytes() for f in unit.inputs}
                outputs = await asyncio.to_thread(models.execute_operator, unit.command, inputs)
            except Exception as exc:  # operator bugs surface as unit failures
                report.update(error=f"OperatorError: {exc}", ended=now_ms())
                return report
            report.update(ok=True, exit_code=0, ended=now_ms(),
                          outputs={k: base64.b64encode(v).decode("ascii") for k, v in outputs.items()})
            return report

        cmd: CommandSpec = unit.command
        try:
            proc = await asyncio.create_subprocess_exec(
                cmd.program, *cmd.args, cwd=str(workdir),
                stdout=asyncio.subprocess.PIPE, stderr=asyncio.subprocess.PIPE,
            )
        except OSError as exc:
            report.update(error=f"SpawnFailure: {exc}", ended=now_ms())
            return report
        self._procs[unit.key] = proc
        try:
            stdout, stderr = await proc.communicate()
        finally:
            self._procs.pop(unit.key, None)
        report["ended"] = now_ms()
        report["exit_code"] = proc.returncode
        report["stdout"] = stdout[-4096:].decode("utf-8", "replace")
        if proc.returncode != 0:
            report["error"] = f"exit {proc.returncode}: {stderr[-1024:].decode('utf-8', 'replace').strip()}"
            return report
        outputs = {}
        for f in cmd.outputs:
            path = _safe_path(workdir, f.logical_name)
            if not path.exists():
                report["error"] = f"MissingOutput: {f.logical_name}"
                return report
            outputs[f.logical_name] = base64.b64encode(path.read_bytes()).decode("ascii")
        report.update(ok=True, outputs=outputs)
        return report

    async def stop(self, mode: str = "Graceful") -> None:
        if self._stopped.is_set():
            return
        if mode == "Graceful":
            self._draining = True
            await self._send("drain", {})
            if self.running:
                await asyncio.gather(*self.running.values(), return_exceptions=True)
            await self._send("deregister", {})
        else:
            for proc in list(self._procs.values()):
                try:
                    proc.kill()
                except ProcessLookupError:
                    pass
            for task in list(self.running.values()):
                task.cancel()
        self._stopped.set()
        current = asyncio.current_task()
        for task in self._tasks:
            if task is not current:
                task.cancel()
        if self.conn is not None:
            if mode == "Graceful":
                self.conn.close()
            else:
                self.conn.abort()


async def start_container(config: ContainerConfig, catalog: Catalog | None = None) -> Container:
    return await Container(config, catalog).start()


async def stop_container(handle: Container, mode: str = "Graceful") -> None:
    await handle.stop(mode)


async def run_node(config: ContainerConfig) -> None:
    container = await start_container(config)
    await container.wait_closed()


# --------------------------------------------------------------------------
# Simulated container


@dataclass
class _Waiting:
    unit: ExecutionUnit
    needs: set[str]
    stage_out: bool


@dataclass
class SimContainer:
    """A container driven by the simulator's virtual clock.

    Command units complete at start + declared duration with the declared
    exit status; operator units really run on the bytes in the shared store.
    """

    descriptor: NodeDescriptor
    cloud: SimCloud
    files: set[str] = field(default_factory=set)
    running: set[tuple[str, str]] = field(default_factory=set)
    alive: bool = True
    draining: bool = False
    max_running: int = 0

    def __post_init__(self):
        self.sender = Sender(self.node_id)
        self._waiting: dict[tuple[str, str], _Waiting] = {}

    @property
    def node_id(self) -> str:
        return self.descriptor.node_id

    def send(self, msg_type: str, payload: Any, size_bytes: int = 0) -> None:
        if self.alive:
            self.cloud.route(self.sender.envelope(msg_type, payload), self.node_id, self.cloud.MASTER, size_bytes)

    def receive(self, env: Envelope) -> None:
        if not self.alive:
            return
        if env.msg_type == "file":
            self.files.add(env.payload["ref"])
            self.cloud.file_locations.setdefault(env.payload["ref"], set()).add(self.node_id)
            self._try_start()
        elif env.msg_type == "dispatch":
            unit = ExecutionUnit.from_json(env.payload["unit"])
            if unit.service not in self.descriptor.services:
                self.send("reject", {"app_id": unit.app_id, "unit_id": unit.unit_id,
                                     "reason": f"ServiceNotHosted: {unit.service}"})
                return
            needs = set(env.payload.get("refs", ()))
            self._waiting[unit.key] = _Waiting(unit, needs, bool(env.payload.get("stage_out")))
            self._try_start()
        elif env.msg_type == "shutdown":
            self.stop(env.payload.get("mode", "Graceful"))

    def _try_start(self) -> None:
        for key in sorted(self._waiting):
            w = self._waiting[key]
            if w.needs <= self.files:
                del self._waiting[key]
                self.execute_unit(w.unit, w.stage_out)

    def execute_unit(self, unit: ExecutionUnit, stage_out: bool = True) -> None:
        if len(self.running) >= self.descriptor.cores:
            raise AssertionError(f"{self.node_id} would exceed {self.descriptor.cores} cores")
        now = self.cloud.now
        self.running.add(unit.key)
        self.max_running = max(self.max_running, len(self.running))
        self.send("started", {"app_id": unit.app_id, "unit_id": unit.unit_id, "at": now})
        duration = unit.sim_duration_ms or 0
        self.cloud.loop.at(now + duration, lambda: self._finish(unit, now, stage_out))

    def _finish(self, unit: ExecutionUnit, started: int, stage_out: bool) -> None:
        if not self.alive or unit.key not in self.running:
            return
        self.running.discard(unit.key)
        now = self.cloud.now
        ok, exit_code, error = True, 0, None
        produced: dict[str, int] = {}
        if isinstance(unit.command, OperatorRef):
            try:
                inputs = {f.logical_name: self.cloud.store[f.content_ref] for f in unit.inputs}
                outputs = models.execute_operator(unit.command, inputs)
            except Exception as exc:
                ok, exit_code, error, outputs = False, None, f"OperatorError: {exc}", {}
            for name, data in outputs.items():
                ref = models.output_ref(unit.app_id, unit.unit_id, name)
                self.cloud.store[ref] = data
                produced[ref] = len(data)
        else:
            exit_code = unit.command.sim_exit_code
            ok = exit_code == 0
            if not ok:
                error = f"exit {exit_code}"
            if ok:
                for f in unit.outputs:
                    produced[models.output_ref(unit.app_id, unit.unit_id, f.logical_name)] = f.size_bytes
        for ref in produced:
            self.files.add(ref)
            self.cloud.file_locations.setdefault(ref, set()).add(self.node_id)
        if ok and stage_out:
            for ref, size in produced.items():
                self.send("file", {"ref": ref, "size": size}, size_bytes=size)
        self.send("result", {
            "app_id": unit.app_id, "unit_id": unit.unit_id, "ok": ok, "exit_code": exit_code,
            "started": started, "ended": now, "error": error,
        })
        self._try_start()
        if self.draining and not self.running and not self._waiting:
            self.send("deregister", {})
            self.alive = False

    def heartbeat(self) -> None:
        if self.alive:
            self.send("heartbeat", {"at": self.cloud.now})
            self.cloud.loop.after(self.cloud.registry.heartbeat_interval_ms, self.heartbeat)

    def stop(self, mode: str = "Graceful") -> None:
        if not self.alive:
            return
        if mode == "Graceful":
            self.draining = True
            self.send("drain", {})
            if not self.running and not self._waiting:
                self.send("deregister", {})
                self.alive = False
        else:
            self.alive = False
            self.running.clear()
            self._waiting.clear()
