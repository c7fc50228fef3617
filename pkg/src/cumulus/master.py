"""The master daemon: membership, scheduling, accounting and pools behind one TCP port.

Every input (node messages, client requests, sweep and pool timers) is
queued and handled by a single control loop, so scheduler state is never
touched concurrently.
"""

from __future__ import annotations

import asyncio
import base64
import json
import logging
import subprocess
import sys
import tempfile
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from cumulus.accounting import Invoice, Ledger, PriceTable, UnpricedResource, price_weighted_sum, usage_report
from cumulus.container import ContainerConfig
from cumulus.core import (
    ApplicationDescriptor,
    CumulusError,
    NodeDescriptor,
    Origin,
    to_micros,
)
from cumulus.membership import Registry, UnknownNode
from cumulus.provisioning import (
    InstanceState,
    Pool,
    PoolPolicy,
    QueueStats,
    SimProvider,
    apply_decision,
    evaluate_policy,
    load_catalog,
)
from cumulus.scheduler import (
    CompletionReport,
    MissingInput,
    Scheduler,
    UnknownApplication,
    ValidationFailed,
)
from cumulus.transport import Connection, Envelope, MalformedFrame, split_address

logger = logging.getLogger(__name__)


def now_ms() -> int:
    return int(time.time() * 1000)


@dataclass
class MasterConfig:
    listen: str = "127.0.0.1:7070"
    heartbeat_interval_ms: int = 2000
    missed_heartbeats_max: int = 3
    max_attempts: int = 3
    ledger_path: str | None = "ledger.jsonl"
    # Per-minute prices keyed by node id, instance type, or "*".
    prices: dict[str, str] = field(default_factory=dict)
    catalog_path: str | None = None
    pool: dict[str, Any] | None = None

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> MasterConfig:
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown master config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> MasterConfig:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


class Master:
    def __init__(self, config: MasterConfig):
        self.config = config
        self.registry = Registry(config.heartbeat_interval_ms, config.missed_heartbeats_max)
        self.ledger = Ledger(config.ledger_path)
        self.scheduler = Scheduler(self.registry, self.ledger, max_attempts=config.max_attempts)
        self.prices = PriceTable({k: to_micros(v) for k, v in config.prices.items()})
        self.catalog = load_catalog(config.catalog_path)
        self.pool: Pool | None = None
        self._launch_nodes = False
        self._node_procs: dict[str, subprocess.Popen] = {}
        if config.pool is not None:
            pcfg = dict(config.pool)
            self._pool_interval_ms = int(pcfg.pop("interval_ms", 5000))
            self._launch_nodes = bool(pcfg.pop("launch_nodes", False))
            self._node_work_dir = pcfg.pop("node_work_dir", tempfile.gettempdir())
            self.pool = Pool(SimProvider(self.catalog), PoolPolicy.from_json(pcfg.pop("policy", {})))
        self.node_conns: dict[str, Connection] = {}
        self._conn_node: dict[int, str] = {}
        self._idle_since: dict[str, int] = {}
        self.heartbeats: Counter = Counter()
        self.events: list[tuple[str, str]] = []
        self._queue: asyncio.Queue = asyncio.Queue()
        self._server: asyncio.base_events.Server | None = None
        self._tasks: list[asyncio.Task] = []
        self.address: str | None = None

    # -- lifecycle ----------------------------------------------------------

    async def start(self) -> str:
        host, port = split_address(self.config.listen)
        self._server = await asyncio.start_server(self._on_connect, host, port)
        sock_host, sock_port = self._server.sockets[0].getsockname()[:2]
        self.address = f"{sock_host}:{sock_port}"
        self._tasks = [
            asyncio.create_task(self._control_loop()),
            asyncio.create_task(self._timer("sweep", self.config.heartbeat_interval_ms)),
        ]
        if self.pool is not None:
            self._tasks.append(asyncio.create_task(self._timer("pool", self._pool_interval_ms)))
        logger.info("master listening on %s", self.address)
        return self.address

    async def serve_forever(self) -> None:
        await self.start()
        try:
            await asyncio.gather(*self._tasks)
        finally:
            await self.stop()

    async def stop(self) -> None:
        for task in self._tasks:
            task.cancel()
        if self._server is not None:
            self._server.close()
        for conn in list(self.node_conns.values()):
            conn.close()
        for proc in self._node_procs.values():
            proc.terminate()

    def kick(self) -> None:
        """Ask the control loop for a dispatch pass (after in-process submissions)."""
        self._queue.put_nowait(("tick", None, None))

    async def _timer(self, kind: str, interval_ms: int) -> None:
        while True:
            await asyncio.sleep(interval_ms / 1000)
            await self._queue.put((kind, None, None))

    async def _on_connect(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        conn = Connection(reader, writer, "master")
        try:
            while True:
                env = await conn.recv()
                if env is None:
                    break
                await self._queue.put(("msg", conn, env))
        except (ConnectionError, MalformedFrame) as exc:
            logger.warning("dropping connection: %s", exc)
        await self._queue.put(("eof", conn, None))

    # -- control loop -------------------------------------------------------

    async def _control_loop(self) -> None:
        while True:
            kind, conn, env = await self._queue.get()
            try:
                if kind == "msg":
                    await self._on_message(conn, env)
                elif kind == "eof":
                    self._on_eof(conn)
                elif kind == "sweep":
                    for node_id in self.registry.sweep(now_ms()):
                        logger.warning("node %s missed heartbeats; rescheduling its units", node_id)
                        self._lose(node_id)
                elif kind == "pool":
                    self._pool_tick()
                await self._dispatch()
            except Exception:
                logger.exception("control loop error handling %s", kind)

    def _lose(self, node_id: str) -> None:
        self.registry.deregister(node_id)
        requeued = self.scheduler.handle_node_loss(node_id, now_ms())
        if requeued:
            logger.info("requeued %s from %s", requeued, node_id)
        conn = self.node_conns.pop(node_id, None)
        if conn is not None:
            self._conn_node.pop(id(conn), None)
            conn.abort()
        self._idle_since.pop(node_id, None)

    def _on_eof(self, conn: Connection) -> None:
        node_id = self._conn_node.pop(id(conn), None)
        if node_id is not None and node_id in self.registry:
            logger.warning("connection to %s dropped", node_id)
            self._lose(node_id)
        elif node_id is not None:
            self.node_conns.pop(node_id, None)
        conn.close()

    async def _dispatch(self) -> None:
        now = now_ms()
        for a in self.scheduler.dispatch_cycle(now):
            self._idle_since.pop(a.node_id, None)
            try:
                files = self.scheduler.stage_files(a.app_id, a.unit_id, "In", node_id=a.node_id)
            except MissingInput as exc:
                self.scheduler.fail_unit(a.app_id, a.unit_id, now, f"MissingInput: {exc}")
                continue
            unit = self.scheduler.unit(a.app_id, a.unit_id)
            payload = {
                "unit": unit.to_json(),
                "files": {k: base64.b64encode(v).decode("ascii") for k, v in files.items()},
            }
            conn = self.node_conns.get(a.node_id)
            try:
                if conn is None:
                    raise ConnectionError(f"no connection to {a.node_id}")
                await conn.send("dispatch", payload)
            except (ConnectionError, OSError) as exc:
                logger.warning("dispatch of %s/%s to %s failed: %s", a.app_id, a.unit_id, a.node_id, exc)
                self.scheduler.transfer_failed(a.app_id, a.unit_id, now)

    async def _reply(self, conn: Connection, payload: Any) -> None:
        await conn.send("reply", payload)

    async def _error(self, conn: Connection, code: str, message: str, **extra: Any) -> None:
        await conn.send("error", {"code": code, "message": message, **extra})

    async def _on_message(self, conn: Connection, env: Envelope) -> None:
        p = env.payload if isinstance(env.payload, dict) else {}
        node_id = self._conn_node.get(id(conn))
        now = now_ms()
        kind = env.msg_type

        if kind == "register":
            desc = NodeDescriptor.from_json(p["descriptor"])
            try:
                self.registry.register(desc, now)
            except CumulusError as exc:
                await self._error(conn, "RegistrationRefused", str(exc))
                conn.close()
                return
            self.node_conns[desc.node_id] = conn
            self._conn_node[id(conn)] = desc.node_id
            self._idle_since[desc.node_id] = now
            await conn.send("register_ok", {"node_id": desc.node_id})
            logger.info("registered %s (%d cores)", desc.node_id, desc.cores)
        elif node_id is not None:
            self._on_node_message(node_id, kind, p, now)
        else:
            await self._on_client(conn, kind, p, now)

    def _on_node_message(self, node_id: str, kind: str, p: dict[str, Any], now: int) -> None:
        self.events.append((node_id, kind))
        if kind == "heartbeat":
            self.heartbeats[node_id] += 1
            try:
                self.registry.heartbeat(node_id, now)
            except UnknownNode:
                pass
        elif kind == "started":
            self.scheduler.mark_started(p["app_id"], p["unit_id"], node_id, p.get("at", now))
        elif kind == "result":
            outputs = {k: base64.b64decode(v) for k, v in (p.get("outputs") or {}).items()}
            report = CompletionReport(p["app_id"], p["unit_id"], node_id, bool(p["ok"]), p.get("exit_code"),
                                      p.get("started"), p.get("ended"), outputs, p.get("error"))
            self.scheduler.handle_completion(report, now)
            if node_id not in self.scheduler.in_flight.values():
                self._idle_since.setdefault(node_id, now)
        elif kind == "reject":
            logger.warning("%s rejected %s/%s: %s", node_id, p["app_id"], p["unit_id"], p.get("reason"))
            self.scheduler.handle_reject(p["app_id"], p["unit_id"], node_id, now)
        elif kind == "drain":
            self.scheduler.drain(node_id)
        elif kind == "deregister":
            self.registry.deregister(node_id)
            self.scheduler.handle_node_loss(node_id, now)
            self.scheduler.forget_node(node_id)
            self._idle_since.pop(node_id, None)
            logger.info("%s deregistered", node_id)

    async def _on_client(self, conn: Connection, kind: str, p: dict[str, Any], now: int) -> None:
        if kind == "submit":
            for ref, data in (p.get("blobs") or {}).items():
                self.scheduler.store[ref] = base64.b64decode(data)
            try:
                desc = ApplicationDescriptor.from_json(p["descriptor"])
                app_id = self.scheduler.submit(desc, now)
            except ValidationFailed as exc:
                await self._error(conn, "ValidationFailed", str(exc),
                                  violations=[{"code": v.code, "detail": v.detail} for v in exc.violations])
                return
            except (KeyError, ValueError) as exc:
                await self._error(conn, "ValidationFailed", f"malformed descriptor: {exc}", violations=[])
                return
            await self._reply(conn, {"app_id": app_id})
        elif kind == "status":
            try:
                status = self.scheduler.status(p.get("app_id", ""), now)
            except UnknownApplication as exc:
                await self._error(conn, "UnknownApplication", str(exc))
                return
            units = [
                {"unit_id": u.unit_id, "state": u.state.value, "node": u.assigned_node, "attempts": u.attempts,
                 "error": u.result.error if u.result else None}
                for u in self.scheduler.app_units(status.app_id)
            ]
            await self._reply(conn, {**status.to_json(), "units": units})
        elif kind == "nodes":
            free = self.scheduler.free_cores()
            rows = []
            for d in self.registry.query():
                rows.append({**d.to_json(), "free_cores": free.get(d.node_id, 0),
                             "last_heartbeat": self.registry.last_heartbeat(d.node_id)})
            await self._reply(conn, {"nodes": rows})
        elif kind == "pool":
            await self._reply(conn, {"pools": [self.pool.to_json(now)] if self.pool else []})
        elif kind == "invoice":
            period = tuple(p["period"]) if p.get("period") else None
            try:
                invoices = price_weighted_sum(self.ledger.records, self.prices, period)
            except UnpricedResource as exc:
                await self._error(conn, "UnpricedResource", str(exc))
                return
            user = p.get("user")
            if user is not None:
                invoices = {user: invoices.get(user, Invoice(user, period))}
            await self._reply(conn, {"invoices": [inv.to_json() for inv in invoices.values()]})
        elif kind == "usage":
            period = tuple(p["period"]) if p.get("period") else None
            report = usage_report(self.ledger.records, p.get("user"), p.get("app_id"), period)
            await self._reply(conn, report.to_json())
        else:
            await self._error(conn, "BadRequest", f"unexpected {kind}")

    # -- pool ---------------------------------------------------------------

    def _pool_tick(self) -> None:
        now = now_ms()
        for inst in self.pool.poll(now):
            inst.node_id = inst.instance_id
            if self._launch_nodes:
                self._spawn_node(inst.instance_id, inst.type_name, inst.boot_time)
        free = self.scheduler.free_cores()
        idle_since = {i.instance_id: self._idle_since[i.node_id] for i in self.pool.active()
                      if i.node_id in self._idle_since}
        stats = QueueStats(len(self.scheduler.ready_units()),
                           sum(c for n, c in free.items() if n not in self.scheduler.draining), idle_since)
        decision = evaluate_policy(self.pool, stats, now)
        for inst in apply_decision(self.pool, decision, stats, now):
            if inst.state is InstanceState.TERMINATED and inst.node_id in self.node_conns:
                asyncio.create_task(self.node_conns[inst.node_id].send("shutdown", {"mode": "Graceful"}))

    def _spawn_node(self, node_id: str, type_name: str, lease_start: int | None) -> None:
        cfg = ContainerConfig(master=self.address, node_id=node_id, instance_type=type_name,
                              origin=Origin.PROVISIONED, lease_start=lease_start,
                              heartbeat_interval_ms=self.config.heartbeat_interval_ms,
                              work_dir=str(Path(self._node_work_dir) / node_id))
        path = Path(self._node_work_dir) / f"{node_id}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(cfg.to_json()), encoding="utf-8")
        self._node_procs[node_id] = subprocess.Popen(
            [sys.executable, "-m", "cumulus.cli", "node", "--config", str(path)],
            stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
        )


async def run_master(config: MasterConfig) -> None:
    await Master(config).serve_forever()
