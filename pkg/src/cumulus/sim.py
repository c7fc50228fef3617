"""Whole-platform simulation on a virtual clock.

``SimCloud`` plays the master: it owns the registry, scheduler and ledger,
and exchanges envelopes with ``SimContainer`` nodes over a ``SimNetwork``.
File staging is modelled as ``file`` messages whose declared size drives
the transfer time; a unit starts once its dispatch and every input file
have reached its node.
"""

from __future__ import annotations

import json
import logging
from typing import Any, Iterable, Mapping, Sequence

from cumulus.accounting import Ledger
from cumulus.container import ContainerConfig, SimContainer, profile_node
from cumulus.core import (
    MAPREDUCE_EXEC,
    TASK_EXEC,
    ApplicationDescriptor,
    CumulusError,
    ModelKind,
    Origin,
    billed_hours,
)
from cumulus.membership import Registry, UnknownNode
from cumulus.models import SimulationReport, output_ref
from cumulus.provisioning import (
    DEFAULT_CATALOG,
    Catalog,
    InstanceState,
    Pool,
    PoolPolicy,
    ProvisionedInstance,
    QueueStats,
    SimProvider,
    apply_decision,
    evaluate_policy,
    pool_cost,
    request_instances,
)
from cumulus.scheduler import AppState, AppStatus, CompletionReport, Scheduler
from cumulus.transport import INTRA, Envelope, EventLoop, Sender, SimNetConfig, SimNetwork

logger = logging.getLogger(__name__)


class SimCloud:
    MASTER = "master"

    def __init__(self, netcfg: SimNetConfig | None = None, catalog: Catalog | None = None, *,
                 max_attempts: int = 3, heartbeat_interval_ms: int = 2000, missed_heartbeats_max: int = 3,
                 heartbeats: bool = False, ledger: Ledger | None = None):
        self.catalog = catalog or DEFAULT_CATALOG
        self.loop = EventLoop()
        self.net = SimNetwork(netcfg)
        self.registry = Registry(heartbeat_interval_ms, missed_heartbeats_max)
        self.ledger = ledger if ledger is not None else Ledger()
        self.store: dict[str, bytes] = {}
        self.scheduler = Scheduler(self.registry, self.ledger, max_attempts=max_attempts, store=self.store)
        self.containers: dict[str, SimContainer] = {}
        self.file_locations: dict[str, set[str]] = {}
        self.heartbeats = heartbeats
        self.sender = Sender(self.MASTER)
        self.dispatch_log: list[tuple[int, str, str, str]] = []
        self.transfer_ms = 0
        self.pool: Pool | None = None
        self._pool_interval = 0
        self._dispatch_scheduled = False
        self._inbound: set[tuple[str, str]] = set()
        self._idle_since: dict[str, int] = {}
        if heartbeats:
            self.loop.after(heartbeat_interval_ms, self._sweep)

    @property
    def now(self) -> int:
        return self.loop.now

    # -- messaging ----------------------------------------------------------

    def route(self, env: Envelope, src: str, dst: str, size_bytes: int = 0, link_class: str = INTRA) -> int:
        at = self.net.send(env, src, dst, self.now, size_bytes=size_bytes, link_class=link_class)
        self.loop.at(at, self._pump)
        return at

    def _pump(self) -> None:
        for env, dst in self.net.deliver(self.now):
            if dst == self.MASTER:
                self._on_master(env)
            elif dst in self.containers:
                self.containers[dst].receive(env)

    def _on_master(self, env: Envelope) -> None:
        p, node = env.payload or {}, env.sender
        kind = env.msg_type
        if kind == "started":
            self.scheduler.mark_started(p["app_id"], p["unit_id"], node, p["at"])
        elif kind == "result":
            report = CompletionReport(p["app_id"], p["unit_id"], node, p["ok"], p.get("exit_code"),
                                      p.get("started"), p.get("ended"), error=p.get("error"))
            self.scheduler.handle_completion(report, self.now)
            self._note_idle(node)
            self._kick()
        elif kind == "file":
            self.file_locations.setdefault(p["ref"], set()).add(self.MASTER)
        elif kind == "heartbeat":
            try:
                self.registry.heartbeat(node, self.now)
            except UnknownNode:
                pass
        elif kind == "drain":
            self.scheduler.drain(node)
        elif kind == "deregister":
            self.registry.deregister(node)
            if self.scheduler.handle_node_loss(node, self.now):
                self._kick()
            self.scheduler.forget_node(node)
            self._idle_since.pop(node, None)
        elif kind == "reject":
            self.scheduler.handle_reject(p["app_id"], p["unit_id"], node, self.now)
            self._note_idle(node)
            self._kick()

    def _note_idle(self, node_id: str) -> None:
        if node_id in self.registry and node_id not in self.scheduler.in_flight.values():
            self._idle_since.setdefault(node_id, self.now)

    # -- nodes --------------------------------------------------------------

    def add_node(self, node_id: str | None = None, *, instance_type: str | None = None, cores: int | None = None,
                 services: Iterable[str] = (TASK_EXEC, MAPREDUCE_EXEC), origin: Origin = Origin.PHYSICAL,
                 lease_start: int | None = None) -> str:
        node_id = node_id or f"node-{len(self.containers):04d}"
        cfg = ContainerConfig(master=self.MASTER, services=frozenset(services), node_id=node_id, address=node_id,
                              cores_override=cores, instance_type=instance_type, origin=origin,
                              lease_start=lease_start)
        if cores is None and instance_type is None:
            cfg.cores_override = 1
        desc = profile_node(cfg, self.catalog)
        self.registry.register(desc, self.now)
        container = SimContainer(desc, self)
        self.containers[node_id] = container
        self._idle_since[node_id] = self.now
        if self.heartbeats:
            self.loop.after(self.registry.heartbeat_interval_ms, container.heartbeat)
        self._kick()
        return node_id

    def stop_node(self, node_id: str, mode: str = "Graceful") -> None:
        container = self.containers[node_id]
        container.stop(mode)
        if mode != "Graceful" and not self.heartbeats:
            # Without heartbeats the dropped connection is the loss signal.
            self.node_lost(node_id)

    def node_lost(self, node_id: str) -> list[str]:
        self.registry.deregister(node_id)
        requeued = self.scheduler.handle_node_loss(node_id, self.now)
        self._idle_since.pop(node_id, None)
        self._kick()
        return requeued

    def _sweep(self) -> None:
        for node_id in self.registry.sweep(self.now):
            logger.info("sweep removed %s at %d", node_id, self.now)
            self.scheduler.handle_node_loss(node_id, self.now)
            self._idle_since.pop(node_id, None)
            self._kick()
        self.loop.after(self.registry.heartbeat_interval_ms, self._sweep)

    # -- scheduling ---------------------------------------------------------

    def submit(self, descriptor: ApplicationDescriptor, blobs: Mapping[str, bytes] | None = None) -> str:
        for ref, data in (blobs or {}).items():
            self.store[ref] = data
            self.file_locations.setdefault(ref, set()).add(self.MASTER)
        app_id = self.scheduler.submit(descriptor, self.now)
        self._kick()
        return app_id

    def _kick(self) -> None:
        if not self._dispatch_scheduled:
            self._dispatch_scheduled = True
            self.loop.at(self.now, self._dispatch)

    def _dispatch(self) -> None:
        self._dispatch_scheduled = False
        for a in self.scheduler.dispatch_cycle(self.now):
            self.dispatch_log.append((self.now, a.app_id, a.unit_id, a.node_id))
            self._idle_since.pop(a.node_id, None)
            self._send_unit(a.app_id, a.unit_id, a.node_id)

    def _holder(self, ref: str, node_id: str) -> str:
        holders = {h for h in self.file_locations.get(ref, ()) if h == self.MASTER or
                   (h in self.containers and self.containers[h].alive)}
        if not holders or self.MASTER in holders:
            return self.MASTER
        return min(holders)

    def _send_unit(self, app_id: str, unit_id: str, node_id: str) -> None:
        unit = self.scheduler.unit(app_id, unit_id)
        container = self.containers[node_id]
        refs = []
        for f in self.scheduler.stage_manifest(app_id, unit_id, node_id):
            ref = f.content_ref or f"{app_id}/{f.logical_name}"
            refs.append(ref)
            if ref in container.files or (node_id, ref) in self._inbound:
                continue
            size = f.size_bytes or len(self.store.get(ref, b""))
            src = self._holder(ref, node_id)
            self._inbound.add((node_id, ref))
            env = self.sender.envelope("file", {"ref": ref, "size": size})
            start = max(self.now, self.net._link_free.get((src, node_id), self.now))
            at = self.route(env, src, node_id, size_bytes=size)
            self.transfer_ms += at - start
        payload = {
            "unit": unit.to_json(),
            "refs": refs,
            "stage_out": not self.scheduler.has_dependents(app_id, unit_id),
        }
        self.route(self.sender.envelope("dispatch", payload), self.MASTER, node_id)

    def status(self, app_id: str) -> AppStatus:
        return self.scheduler.status(app_id, self.now)

    def wait(self, app_id: str) -> AppStatus:
        """Advance virtual time until the application is terminal."""
        self.loop.run(stop=lambda: self.scheduler.apps[app_id].finished_at is not None)
        return self.status(app_id)

    def run(self, until: int | None = None) -> None:
        self.loop.run(until=until)

    def waves(self, app_id: str) -> int:
        """Distinct virtual instants at which the app's units were dispatched."""
        return len({t for t, a, _, _ in self.dispatch_log if a == app_id})

    # -- provisioning -------------------------------------------------------

    def attach_pool(self, pool: Pool, interval_ms: int = 10_000) -> None:
        self.pool = pool
        self._pool_interval = interval_ms
        self.loop.after(0, self._pool_tick)

    def _activate(self) -> list[ProvisionedInstance]:
        ready = self.pool.poll(self.now)
        for inst in ready:
            inst.node_id = self.add_node(inst.instance_id, instance_type=inst.type_name,
                                         origin=Origin.PROVISIONED, lease_start=inst.boot_time)
        return ready

    def queue_stats(self) -> QueueStats:
        free = self.scheduler.free_cores()
        idle_cores = sum(c for n, c in free.items() if n not in self.scheduler.draining)
        idle_since = {}
        if self.pool is not None:
            for inst in self.pool.active():
                if inst.node_id in self._idle_since:
                    idle_since[inst.instance_id] = self._idle_since[inst.node_id]
        return QueueStats(len(self.scheduler.ready_units()), idle_cores, idle_since)

    def _pool_tick(self) -> None:
        self._activate()
        stats = self.queue_stats()
        decision = evaluate_policy(self.pool, stats, self.now)
        changed = apply_decision(self.pool, decision, stats, self.now)
        for inst in changed:
            if inst.state is InstanceState.TERMINATED and inst.node_id in self.containers:
                self.stop_node(inst.node_id, "Graceful")
            elif inst.state is InstanceState.BOOTING:
                self.loop.at(inst.ready_at, self._activate)
        self.loop.after(self._pool_interval, self._pool_tick)

    def provision(self, type_name: str, n: int, pool: Pool | None = None) -> list[str]:
        """Lease ``n`` instances, advance through their boot, and return their node ids."""
        if pool is None:
            if self.pool is None:
                self.pool = Pool(SimProvider(self.catalog), PoolPolicy(preferred_type=type_name, max_instances=10**6))
            pool = self.pool
        launched = request_instances(pool, type_name, n, self.now)
        ready_at = max(i.ready_at for i in launched)
        self.loop.run(until=ready_at)
        nodes = []
        for inst in pool.poll(self.now):
            inst.node_id = self.add_node(inst.instance_id, instance_type=inst.type_name,
                                         origin=Origin.PROVISIONED, lease_start=inst.boot_time)
            nodes.append(inst.node_id)
        return nodes


def parse_cluster(text: str) -> list[tuple[str, int]]:
    """``"m1.small:2,c1.medium:1"`` -> ``[("m1.small", 2), ("c1.medium", 1)]``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        name, _, count = part.partition(":")
        out.append((name, int(count or 1)))
    if not out:
        raise ValueError("cluster must list at least one type:count")
    return out


def simulate(payload: Mapping[str, Any], cluster: Sequence[tuple[str, int]], netcfg: SimNetConfig | None = None,
             catalog: Catalog | None = None, owner: str = "sim") -> SimulationReport:
    if not cluster or sum(n for _, n in cluster) < 1:
        raise ValueError("cluster must contain at least one instance")
    cloud = SimCloud(netcfg, catalog)
    pool = Pool(SimProvider(cloud.catalog), PoolPolicy(preferred_type=cluster[0][0], max_instances=10**6))
    cloud.pool = pool
    for type_name, count in cluster:
        cloud.provision(type_name, count, pool)
    app_id = cloud.submit(ApplicationDescriptor("workflow", owner, ModelKind.WORKFLOW, dict(payload)))
    status = cloud.wait(app_id)
    end = status.finished_at
    pool.terminate([i.instance_id for i in pool.live()], end)

    schedule, busy = {}, {n: 0 for n in sorted(cloud.containers)}
    for unit in cloud.scheduler.app_units(app_id):
        ts = unit.timestamps
        if ts.started is None or ts.ended is None:
            continue
        busy[unit.assigned_node] += ts.ended - ts.started
        schedule[unit.unit_id] = {
            "start": (ts.started - status.submitted_at) / 1000,
            "end": (ts.ended - status.submitted_at) / 1000,
            "node": unit.assigned_node,
        }
    hours: dict[str, int] = {}
    for inst in pool.instances.values():
        hours[inst.type_name] = hours.get(inst.type_name, 0) + billed_hours(inst.uptime_ms(end))
    return SimulationReport(
        makespan_s=status.makespan_ms / 1000,
        busy_s={n: ms / 1000 for n, ms in busy.items()},
        schedule=schedule,
        transfer_s=cloud.transfer_ms / 1000,
        instance_hours=hours,
        cost=pool_cost(pool, end),
        nodes=len(cloud.containers),
        extra={"state": status.state.value},
    )


def run_mapreduce(payload: Mapping[str, Any], blobs: Mapping[str, bytes], nodes: int = 2,
                  netcfg: SimNetConfig | None = None) -> dict[str, Any]:
    """Run a MapReduce payload on a simulated cloud and merge the reducer outputs."""
    cloud = SimCloud(netcfg)
    for i in range(nodes):
        cloud.add_node(f"node-{i:04d}", cores=1)
    app_id = cloud.submit(ApplicationDescriptor("mapreduce", "sim", ModelKind.MAPREDUCE, dict(payload)), blobs)
    status = cloud.wait(app_id)
    if status.state is not AppState.FINISHED:
        raise CumulusError(f"MapReduce run ended {status.state.value}")
    merged: dict[str, Any] = {}
    for unit in cloud.scheduler.app_units(app_id):
        if unit.unit_id.startswith("reduce-"):
            for key, value in json.loads(cloud.store[output_ref(app_id, unit.unit_id, "result")]):
                if key in merged:
                    raise CumulusError(f"key {key!r} reduced twice")
                merged[key] = value
    return merged
