"""Resource pools over a simulated hourly-billed IaaS provider."""

from __future__ import annotations

import enum
import itertools
import json
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

from cumulus.core import MS_PER_HOUR, CumulusError, billed_hours, ceil_div, to_micros

DEFAULT_BOOT_LATENCY_S = 90


class CapExceeded(CumulusError):
    pass


class ProviderRejected(CumulusError):
    pass


class UnknownInstanceType(CumulusError):
    pass


@dataclass(frozen=True)
class InstanceType:
    name: str
    cores: int
    compute_units: float
    memory_mb: int
    rate_per_hour: int  # micro-currency
    boot_latency_s: int = DEFAULT_BOOT_LATENCY_S

    def __post_init__(self):
        if self.rate_per_hour <= 0:
            raise ValueError(f"{self.name}: rate must be > 0")
        if self.cores < 1:
            raise ValueError(f"{self.name}: cores must be >= 1")

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "cores": self.cores,
            "compute_units": self.compute_units,
            "memory_mb": self.memory_mb,
            "rate_per_hour": f"{self.rate_per_hour / 1_000_000:.2f}",
            "boot_latency_s": self.boot_latency_s,
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> InstanceType:
        return cls(
            name=doc["name"],
            cores=int(doc["cores"]),
            compute_units=float(doc.get("compute_units", 0)),
            memory_mb=int(doc["memory_mb"]),
            rate_per_hour=to_micros(doc["rate_per_hour"]),
            boot_latency_s=int(doc.get("boot_latency_s", DEFAULT_BOOT_LATENCY_S)),
        )


Catalog = dict[str, InstanceType]


def load_catalog(path: str | Path | None = None) -> Catalog:
    """Read a catalog file; without a path, the bundled two-type EC2 catalog."""
    if path is None:
        text = resources.files("cumulus.data").joinpath("catalog.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return {t.name: t for t in (InstanceType.from_json(d) for d in json.loads(text))}


DEFAULT_CATALOG: Catalog = {
    "m1.small": InstanceType("m1.small", cores=1, compute_units=2.5, memory_mb=1740, rate_per_hour=100_000),
    "c1.medium": InstanceType("c1.medium", cores=2, compute_units=5.0, memory_mb=1740, rate_per_hour=200_000),
}


class InstanceState(str, enum.Enum):
    BOOTING = "Booting"
    ACTIVE = "Active"
    TERMINATED = "Terminated"


@dataclass
class ProvisionedInstance:
    instance_id: str
    type_name: str
    rate_per_hour: int
    cores: int
    requested_at: int
    ready_at: int
    state: InstanceState = InstanceState.BOOTING
    boot_time: int | None = None  # when it became Active; billing starts here
    terminate_time: int | None = None
    node_id: str | None = None

    def uptime_ms(self, now: int) -> int:
        if self.boot_time is None:
            return 0
        end = self.terminate_time if self.terminate_time is not None else now
        return max(0, end - self.boot_time)

    def to_json(self, now: int) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "type": self.type_name,
            "state": self.state.value,
            "boot_time": self.boot_time,
            "terminate_time": self.terminate_time,
            "node_id": self.node_id,
            "cost": accrued_cost(self, now),
        }


def accrued_cost(instance: ProvisionedInstance, now: int) -> int:
    """Per-started-hour charge; one full hour as soon as the instance is Active."""
    if instance.boot_time is None:
        return 0
    return billed_hours(instance.uptime_ms(now)) * instance.rate_per_hour


class SimProvider:
    """Stand-in IaaS endpoint. Rejections can be scripted or drawn at a seeded rate."""

    def __init__(self, catalog: Catalog | None = None, *, seed: int = 0, reject_rate: float = 0.0,
                 prefix: str = "i"):
        self.catalog = catalog or DEFAULT_CATALOG
        self.reject_rate = reject_rate
        self.reject_next = 0
        self._rng = random.Random(seed)
        self._ids = itertools.count(1)
        self.prefix = prefix

    def launch(self, type_name: str, n: int, now: int) -> list[ProvisionedInstance]:
        itype = self.catalog.get(type_name)
        if itype is None:
            raise UnknownInstanceType(type_name)
        if self.reject_next > 0:
            self.reject_next -= 1
            raise ProviderRejected(f"launch of {n} x {type_name} refused")
        if self.reject_rate and self._rng.random() < self.reject_rate:
            raise ProviderRejected(f"launch of {n} x {type_name} refused")
        ready = now + itype.boot_latency_s * 1000
        return [
            ProvisionedInstance(
                instance_id=f"{self.prefix}-{next(self._ids):05d}",
                type_name=type_name,
                rate_per_hour=itype.rate_per_hour,
                cores=itype.cores,
                requested_at=now,
                ready_at=ready,
            )
            for _ in range(n)
        ]


@dataclass
class PoolPolicy:
    """Grow when pending units outnumber idle cores for ``window_s``; shrink idle
    instances only when they sit within ``hour_boundary_window_s`` of a paid hour."""

    preferred_type: str = "m1.small"
    window_s: int = 0
    grow_step: int | None = None
    max_instances: int = 20
    budget_cap: int | None = None  # micro-currency
    shrink_idle_s: int = 300
    hour_boundary_window_s: int = 300

    def __post_init__(self):
        if self.max_instances < 0:
            raise ValueError("max_instances must be >= 0")

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> PoolPolicy:
        kw = dict(doc)
        if kw.get("budget_cap") is not None:
            kw["budget_cap"] = to_micros(kw["budget_cap"])
        return cls(**kw)


@dataclass
class QueueStats:
    pending_units: int
    idle_cores: int
    # instance_id -> ms since which it has been idle; busy instances are absent.
    idle_since: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class Grow:
    type_name: str
    n: int


@dataclass(frozen=True)
class Shrink:
    instance_ids: tuple[str, ...]


class Pool:
    def __init__(self, provider: SimProvider | None = None, policy: PoolPolicy | None = None, name: str = "default"):
        self.provider = provider or SimProvider()
        self.policy = policy or PoolPolicy()
        self.name = name
        self.instances: dict[str, ProvisionedInstance] = {}
        self._pressure_since: int | None = None

    @property
    def catalog(self) -> Catalog:
        return self.provider.catalog

    def live(self) -> list[ProvisionedInstance]:
        return [i for i in self.instances.values() if i.state is not InstanceState.TERMINATED]

    def active(self) -> list[ProvisionedInstance]:
        return [i for i in self.instances.values() if i.state is InstanceState.ACTIVE]

    def projected_cost(self, now: int) -> int:
        """Cost if every live instance ran at least to the end of its current paid hour."""
        total = 0
        for inst in self.instances.values():
            if inst.state is InstanceState.TERMINATED:
                total += accrued_cost(inst, now)
            else:
                total += max(accrued_cost(inst, now), inst.rate_per_hour)
        return total

    def next_ready_time(self) -> int | None:
        booting = [i.ready_at for i in self.instances.values() if i.state is InstanceState.BOOTING]
        return min(booting, default=None)

    def poll(self, now: int) -> list[ProvisionedInstance]:
        """Activate instances whose boot has finished; returns them in id order."""
        ready = []
        for inst in self.instances.values():
            if inst.state is InstanceState.BOOTING and inst.ready_at <= now:
                inst.state = InstanceState.ACTIVE
                inst.boot_time = inst.ready_at
                ready.append(inst)
        return ready

    def terminate(self, instance_ids: Iterable[str], now: int) -> list[ProvisionedInstance]:
        done = []
        for iid in instance_ids:
            inst = self.instances[iid]
            if inst.state is InstanceState.TERMINATED:
                continue
            if inst.state is InstanceState.BOOTING:
                inst.boot_time = None
            inst.state = InstanceState.TERMINATED
            inst.terminate_time = now
            done.append(inst)
        return done

    def to_json(self, now: int) -> dict[str, Any]:
        return {
            "name": self.name,
            "preferred_type": self.policy.preferred_type,
            "instances": [i.to_json(now) for i in self.instances.values()],
            "cost": pool_cost(self, now),
        }


def request_instances(pool: Pool, type_name: str, n: int, now: int) -> list[ProvisionedInstance]:
    """Lease ``n`` instances; they come up Booting and turn Active after the boot latency."""
    if n <= 0:
        return []
    itype = pool.catalog.get(type_name)
    if itype is None:
        raise UnknownInstanceType(type_name)
    policy = pool.policy
    if len(pool.live()) + n > policy.max_instances:
        raise CapExceeded(f"{len(pool.live())} live + {n} > max_instances {policy.max_instances}")
    if policy.budget_cap is not None:
        projected = pool.projected_cost(now) + n * itype.rate_per_hour
        if projected > policy.budget_cap:
            raise CapExceeded(f"projected cost {projected} exceeds budget cap {policy.budget_cap}")
    launched = pool.provider.launch(type_name, n, now)
    for inst in launched:
        pool.instances[inst.instance_id] = inst
    return launched


def remaining_paid_ms(instance: ProvisionedInstance, now: int) -> int:
    uptime = instance.uptime_ms(now)
    return billed_hours(uptime) * MS_PER_HOUR - uptime


def evaluate_policy(pool: Pool, stats: QueueStats, now: int) -> Grow | Shrink | None:
    policy = pool.policy
    if stats.pending_units > stats.idle_cores:
        if pool._pressure_since is None:
            pool._pressure_since = now
        sustained = now - pool._pressure_since >= policy.window_s * 1000
        itype = pool.catalog[policy.preferred_type]
        booting_cores = sum(i.cores for i in pool.live() if i.state is InstanceState.BOOTING)
        deficit = stats.pending_units - stats.idle_cores - booting_cores
        if sustained and deficit > 0:
            n = ceil_div(deficit, itype.cores)
            if policy.grow_step is not None:
                n = min(n, policy.grow_step)
            n = min(n, policy.max_instances - len(pool.live()))
            if policy.budget_cap is not None:
                headroom = policy.budget_cap - pool.projected_cost(now)
                n = min(n, max(0, headroom // itype.rate_per_hour))
            if n > 0:
                return Grow(policy.preferred_type, n)
    else:
        pool._pressure_since = None

    window_ms = policy.hour_boundary_window_s * 1000
    victims = []
    for inst in pool.active():
        since = stats.idle_since.get(inst.instance_id)
        if since is None or now - since < policy.shrink_idle_s * 1000:
            continue
        if remaining_paid_ms(inst, now) <= window_ms:
            victims.append(inst.instance_id)
    if victims:
        return Shrink(tuple(sorted(victims)))
    return None


def apply_decision(pool: Pool, decision: Grow | Shrink | None, stats: QueueStats,
                   now: int) -> list[ProvisionedInstance]:
    """Carry out a policy decision. Busy instances are never terminated."""
    if isinstance(decision, Grow):
        return request_instances(pool, decision.type_name, decision.n, now)
    if isinstance(decision, Shrink):
        idle = [iid for iid in decision.instance_ids if iid in stats.idle_since]
        return pool.terminate(idle, now)
    return []


def pool_cost(pool: Pool, now: int) -> int:
    return sum(accrued_cost(inst, now) for inst in pool.instances.values())


class PoolSet:
    """Several pools consulted in priority order."""

    def __init__(self, pools: Iterable[Pool]):
        self.pools = list(pools)

    def request(self, type_name: str, n: int, now: int) -> list[ProvisionedInstance]:
        last: Exception | None = None
        for pool in self.pools:
            if type_name not in pool.catalog:
                continue
            try:
                return request_instances(pool, type_name, n, now)
            except (CapExceeded, ProviderRejected) as exc:
                last = exc
        if last is not None:
            raise last
        raise UnknownInstanceType(type_name)

    def cost(self, now: int) -> int:
        return sum(pool_cost(p, now) for p in self.pools)
