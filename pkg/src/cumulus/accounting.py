"""Usage metering and pricing.

All money is integer micro-currency. Records live in an append-only
JSON-lines ledger, one line per terminal execution unit.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from cumulus.core import CumulusError, wall_minutes

logger = logging.getLogger(__name__)

PLATFORM_ACCOUNT = "platform"
WILDCARD = "*"

Period = tuple[int, int]


class DuplicateRecord(CumulusError):
    pass


class UnpricedResource(CumulusError):
    pass


@dataclass(frozen=True)
class UsageRecord:
    user: str
    app_id: str
    unit_id: str
    node_id: str
    wall_minutes: int
    started: int
    ended: int
    instance_type: str | None = None
    state: str = "Completed"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> UsageRecord:
        return cls(**doc)


def in_period(record: UsageRecord, period: Period | None) -> bool:
    """A record belongs to the half-open period containing its end time."""
    return period is None or period[0] <= record.ended < period[1]


class Ledger:
    """Append-only usage history, optionally backed by a ``ledger.jsonl`` file."""

    def __init__(self, path: str | Path | None = None, strict: bool = False):
        self.path = Path(path) if path is not None else None
        self.strict = strict
        self._records: list[UsageRecord] = []
        self._keys: set[tuple[str, str]] = set()
        if self.path is not None and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    rec = UsageRecord.from_json(json.loads(line))
                    self._records.append(rec)
                    self._keys.add((rec.app_id, rec.unit_id))

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(list(self._records))

    @property
    def records(self) -> list[UsageRecord]:
        return list(self._records)

    def record_usage(self, *, user: str, app_id: str, unit_id: str, node_id: str, started: int, ended: int,
                     instance_type: str | None = None, state: str = "Completed") -> UsageRecord | None:
        """Meter one terminal unit. A repeat for the same unit is dropped with a warning."""
        key = (app_id, unit_id)
        if key in self._keys:
            if self.strict:
                raise DuplicateRecord(f"{app_id}/{unit_id}")
            logger.warning("duplicate usage record for %s/%s ignored", app_id, unit_id)
            return None
        rec = UsageRecord(
            user=user, app_id=app_id, unit_id=unit_id, node_id=node_id,
            wall_minutes=wall_minutes(started, ended), started=started, ended=ended,
            instance_type=instance_type, state=state,
        )
        self._records.append(rec)
        self._keys.add(key)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
        return rec


class PriceTable:
    """Per-minute prices keyed by node_id or instance type; ``*`` is an optional fallback."""

    def __init__(self, prices: Mapping[str, int] | None = None):
        self.prices = dict(prices or {})
        for k, v in self.prices.items():
            if v < 0:
                raise ValueError(f"negative price for {k}")

    def price_for(self, record: UsageRecord) -> int:
        for key in (record.node_id, record.instance_type, WILDCARD):
            if key is not None and key in self.prices:
                return self.prices[key]
        raise UnpricedResource(f"no price for node {record.node_id!r} (type {record.instance_type!r})")


@dataclass(frozen=True)
class InvoiceLine:
    app_id: str
    minutes: int
    amount: int


@dataclass
class Invoice:
    user: str
    period: Period | None
    lines: list[InvoiceLine] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(line.amount for line in self.lines)

    def to_json(self) -> dict:
        return {
            "user": self.user,
            "period": list(self.period) if self.period else None,
            "lines": [asdict(line) for line in self.lines],
            "total": self.total,
        }


def price_weighted_sum(records: Iterable[UsageRecord], table: PriceTable,
                       period: Period | None = None) -> dict[str, Invoice]:
    minutes: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    amounts: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    for rec in records:
        if not in_period(rec, period):
            continue
        minutes[rec.user][rec.app_id] += rec.wall_minutes
        amounts[rec.user][rec.app_id] += rec.wall_minutes * table.price_for(rec)
    invoices = {}
    for user in sorted(minutes):
        lines = [InvoiceLine(app, minutes[user][app], amounts[user][app]) for app in sorted(minutes[user])]
        invoices[user] = Invoice(user, period, lines)
    return invoices


def price_middleman_share(records: Iterable[UsageRecord], provider_cost: int,
                          period: Period | None = None) -> dict[str, int]:
    """Split ``provider_cost`` across users in proportion to their metered minutes.

    Largest-remainder apportionment; ties on the remainder go to the
    lexicographically smaller user. With no usage the whole cost lands on
    the platform account.
    """
    if provider_cost < 0:
        raise ValueError("provider cost must be >= 0")
    per_user: dict[str, int] = defaultdict(int)
    for rec in records:
        if in_period(rec, period):
            per_user[rec.user] += rec.wall_minutes
    total = sum(per_user.values())
    if total == 0:
        return {PLATFORM_ACCOUNT: provider_cost}
    shares, remainders = {}, []
    for user in sorted(per_user):
        q, r = divmod(provider_cost * per_user[user], total)
        shares[user] = q
        remainders.append((-r, user))
    leftover = provider_cost - sum(shares.values())
    for _, user in sorted(remainders)[:leftover]:
        shares[user] += 1
    return shares


@dataclass
class UsageReport:
    records: list[UsageRecord]
    total_minutes: int
    per_app_minutes: dict[str, int]

    def to_json(self) -> dict:
        return {
            "records": [r.to_json() for r in self.records],
            "total_minutes": self.total_minutes,
            "per_app_minutes": dict(sorted(self.per_app_minutes.items())),
        }


def usage_report(records: Iterable[UsageRecord], user: str | None = None, app_id: str | None = None,
                 period: Period | None = None) -> UsageReport:
    picked = [
        r for r in records
        if (user is None or r.user == user) and (app_id is None or r.app_id == app_id) and in_period(r, period)
    ]
    picked.sort(key=lambda r: (r.node_id, r.unit_id, r.app_id))
    per_app: dict[str, int] = defaultdict(int)
    for r in picked:
        per_app[r.app_id] += r.wall_minutes
    return UsageReport(picked, sum(per_app.values()), dict(per_app))
