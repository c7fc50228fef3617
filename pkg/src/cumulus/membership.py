"""Master-side registry of live nodes."""

from __future__ import annotations

from dataclasses import dataclass

from cumulus.core import CumulusError, NodeDescriptor

DEFAULT_HEARTBEAT_MS = 2000
DEFAULT_MISSED_MAX = 3


class DuplicateNode(CumulusError):
    pass


class UnknownNode(CumulusError):
    pass


class InvalidDescriptor(CumulusError):
    pass


@dataclass
class Entry:
    descriptor: NodeDescriptor
    last_heartbeat: int


class Registry:
    def __init__(self, heartbeat_interval_ms: int = DEFAULT_HEARTBEAT_MS,
                 missed_heartbeats_max: int = DEFAULT_MISSED_MAX):
        if heartbeat_interval_ms <= 0:
            raise ValueError("heartbeat interval must be positive")
        self.heartbeat_interval_ms = heartbeat_interval_ms
        self.missed_heartbeats_max = missed_heartbeats_max
        self._entries: dict[str, Entry] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._entries

    def register(self, descriptor: NodeDescriptor, now: int) -> None:
        problems = descriptor.problems()
        if problems:
            raise InvalidDescriptor(f"{descriptor.node_id}: {'; '.join(problems)}")
        if descriptor.node_id in self._entries:
            raise DuplicateNode(descriptor.node_id)
        if descriptor.address and any(e.descriptor.address == descriptor.address for e in self._entries.values()):
            raise DuplicateNode(f"address {descriptor.address} already registered")
        self._entries[descriptor.node_id] = Entry(descriptor, now)

    def heartbeat(self, node_id: str, now: int) -> None:
        entry = self._entries.get(node_id)
        if entry is None:
            raise UnknownNode(node_id)
        entry.last_heartbeat = max(entry.last_heartbeat, now)

    def deregister(self, node_id: str) -> bool:
        return self._entries.pop(node_id, None) is not None

    def get(self, node_id: str) -> NodeDescriptor | None:
        entry = self._entries.get(node_id)
        return entry.descriptor if entry else None

    def last_heartbeat(self, node_id: str) -> int | None:
        entry = self._entries.get(node_id)
        return entry.last_heartbeat if entry else None

    def query(self, service_tag: str | None = None, os_tag: str | None = None,
              min_cores: int | None = None) -> list[NodeDescriptor]:
        """Live nodes matching every given predicate, ordered by node_id."""
        out = []
        for node_id in sorted(self._entries):
            d = self._entries[node_id].descriptor
            if service_tag is not None and service_tag not in d.services:
                continue
            if os_tag is not None and d.os_tag != os_tag:
                continue
            if min_cores is not None and d.cores < min_cores:
                continue
            out.append(d)
        return out

    def sweep(self, now: int) -> list[str]:
        """Drop nodes whose last heartbeat is older than the miss threshold."""
        limit = self.missed_heartbeats_max * self.heartbeat_interval_ms
        stale = sorted(n for n, e in self._entries.items() if now - e.last_heartbeat > limit)
        for node_id in stale:
            del self._entries[node_id]
        return stale
