"""Wire framing, socket helpers, and a deterministic simulated network.

Frames are a 4-byte big-endian unsigned length followed by that many bytes
of UTF-8 JSON holding the envelope object ``{"t", "s", "q", "p"}``.
"""

from __future__ import annotations

import asyncio
import heapq
import itertools
import json
import random
import struct
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator

from cumulus.core import CumulusError

MAX_FRAME = 2**31 - 1
HEADER = struct.Struct("!I")

# Message catalog. Anything else on the wire is a malformed frame.
MESSAGE_TYPES = {
    # container <-> master
    "register", "register_ok", "heartbeat", "deregister", "drain",
    "dispatch", "started", "result", "reject", "shutdown",
    # client <-> master
    "submit", "status", "nodes", "pool", "invoice", "usage", "reply", "error",
    # simulation-only payload carrier
    "file",
}


class TransportError(CumulusError):
    pass


class MalformedFrame(TransportError):
    pass


class PayloadTooLarge(MalformedFrame):
    pass


def register_message_type(name: str) -> None:
    MESSAGE_TYPES.add(name)


@dataclass(frozen=True)
class Envelope:
    msg_type: str
    sender: str
    seq: int
    payload: Any = None


def frame_bytes(body: bytes) -> bytes:
    """Prefix ``body`` with its 4-byte big-endian length."""
    if len(body) > MAX_FRAME:
        raise PayloadTooLarge(f"{len(body)} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(len(body)) + body


def encode(envelope: Envelope) -> bytes:
    doc = {"t": envelope.msg_type, "s": envelope.sender, "q": envelope.seq, "p": envelope.payload}
    try:
        body = json.dumps(doc, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise TransportError(f"payload not serializable: {exc}") from exc
    return frame_bytes(body)


def _envelope_from_body(body: bytes) -> Envelope:
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFrame(f"bad JSON body: {exc}") from exc
    if not isinstance(doc, dict) or not {"t", "s", "q"} <= doc.keys():
        raise MalformedFrame("envelope missing keys")
    if doc["t"] not in MESSAGE_TYPES:
        raise MalformedFrame(f"unknown msg_type {doc['t']!r}")
    if not isinstance(doc["q"], int) or isinstance(doc["q"], bool):
        raise MalformedFrame("seq must be an integer")
    return Envelope(doc["t"], str(doc["s"]), doc["q"], doc.get("p"))


class FrameDecoder:
    """Incremental decoder; feed it arbitrary chunks, get whole envelopes back."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Envelope]:
        self._buf += data
        out = []
        while len(self._buf) >= HEADER.size:
            (n,) = HEADER.unpack_from(self._buf)
            if n > MAX_FRAME:
                raise PayloadTooLarge(f"length prefix {n} exceeds {MAX_FRAME}")
            if len(self._buf) < HEADER.size + n:
                break
            body = bytes(self._buf[HEADER.size:HEADER.size + n])
            del self._buf[:HEADER.size + n]
            out.append(_envelope_from_body(body))
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)

    def close(self) -> None:
        """Signal end of stream; a partial frame left over is an error."""
        if self._buf:
            raise MalformedFrame(f"stream closed with {len(self._buf)} bytes of an incomplete frame")


def decode(data: bytes) -> list[Envelope]:
    """Decode a complete byte string holding zero or more whole frames."""
    dec = FrameDecoder()
    out = dec.feed(data)
    dec.close()
    return out


class Sender:
    """Stamps outgoing envelopes with a per-connection increasing seq."""

    def __init__(self, sender_id: str):
        self.sender_id = sender_id
        self._seq = itertools.count(1)

    def envelope(self, msg_type: str, payload: Any = None) -> Envelope:
        return Envelope(msg_type, self.sender_id, next(self._seq), payload)


class Connection:
    """Asyncio stream wrapper: one reader and one writer context."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, sender_id: str):
        self.reader = reader
        self.writer = writer
        self.stamp = Sender(sender_id)
        self._decoder = FrameDecoder()
        self._ready: list[Envelope] = []
        self._write_lock = asyncio.Lock()

    @classmethod
    async def open(cls, host: str, port: int, sender_id: str) -> Connection:
        reader, writer = await asyncio.open_connection(host, port)
        return cls(reader, writer, sender_id)

    async def send(self, msg_type: str, payload: Any = None) -> None:
        frame = encode(self.stamp.envelope(msg_type, payload))
        async with self._write_lock:
            self.writer.write(frame)
            await self.writer.drain()

    async def recv(self) -> Envelope | None:
        """Next envelope, or None at a clean end of stream."""
        while not self._ready:
            chunk = await self.reader.read(65536)
            if not chunk:
                self._decoder.close()
                return None
            self._ready.extend(self._decoder.feed(chunk))
        return self._ready.pop(0)

    def close(self) -> None:
        try:
            self.writer.close()
        except Exception:
            pass

    def abort(self) -> None:
        transport = self.writer.transport
        if transport is not None:
            transport.abort()


def request(address: str, msg_type: str, payload: Any = None, sender: str = "client", timeout: float = 10.0) -> Envelope:
    """Blocking request/response round trip used by the CLI client."""
    import socket

    host, port = split_address(address)
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.sendall(encode(Envelope(msg_type, sender, 1, payload)))
        dec = FrameDecoder()
        while True:
            chunk = sock.recv(65536)
            if not chunk:
                dec.close()
                raise TransportError("connection closed before reply")
            got = dec.feed(chunk)
            if got:
                return got[0]


def split_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"bad endpoint {address!r}; expected host:port")
    return host or "127.0.0.1", int(port)


# --------------------------------------------------------------------------
# Virtual time.


class VirtualClock:
    def __init__(self, start: int = 0):
        self._now = start

    @property
    def now(self) -> int:
        return self._now

    def advance_to(self, t: int) -> None:
        if t < self._now:
            raise ValueError(f"cannot move clock back from {self._now} to {t}")
        self._now = t


class EventLoop:
    """Single-threaded discrete-event loop ordered by (time, insertion)."""

    def __init__(self, clock: VirtualClock | None = None):
        self.clock = clock or VirtualClock()
        self._heap: list[tuple[int, int, Callable[[], None]]] = []
        self._counter = itertools.count()

    @property
    def now(self) -> int:
        return self.clock.now

    def at(self, t: int, fn: Callable[[], None]) -> None:
        heapq.heappush(self._heap, (max(t, self.clock.now), next(self._counter), fn))

    def after(self, delay: int, fn: Callable[[], None]) -> None:
        self.at(self.clock.now + delay, fn)

    def next_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def step(self) -> bool:
        if not self._heap:
            return False
        t, _, fn = heapq.heappop(self._heap)
        self.clock.advance_to(t)
        fn()
        return True

    def run(self, until: int | None = None, stop: Callable[[], bool] | None = None) -> None:
        while self._heap:
            if until is not None and self._heap[0][0] > until:
                self.clock.advance_to(until)
                return
            self.step()
            if stop is not None and stop():
                return
        if until is not None and until > self.clock.now:
            self.clock.advance_to(until)


# --------------------------------------------------------------------------
# Simulated network.

INTRA = "intra-cloud"
CLIENT = "client-to-cloud"


@dataclass
class SimNetConfig:
    """Per-link-class latency range (ms) and bandwidth (bytes/s, None = unbounded)."""

    seed: int = 0
    latency_ms: dict[str, tuple[int, int]] = field(default_factory=lambda: {INTRA: (0, 0), CLIENT: (0, 0)})
    bandwidth_bytes_per_s: dict[str, int | None] = field(default_factory=lambda: {INTRA: None, CLIENT: None})
    clock_mode: str = "Virtual"

    def __post_init__(self):
        for cls_name, (lo, hi) in self.latency_ms.items():
            if lo > hi or lo < 0:
                raise ValueError(f"latency range for {cls_name} must satisfy 0 <= min <= max")
        for cls_name, bw in self.bandwidth_bytes_per_s.items():
            if bw is not None and bw <= 0:
                raise ValueError(f"bandwidth for {cls_name} must be > 0")
        if self.clock_mode not in ("Real", "Virtual"):
            raise ValueError("clock_mode must be Real or Virtual")

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> SimNetConfig:
        lat = {k: tuple(v) for k, v in doc.get("latency_ms", {}).items()}
        bw = dict(doc.get("bandwidth_bytes_per_s", {}))
        cfg = cls()
        cfg_lat = {**cfg.latency_ms, **lat}
        cfg_bw = {**cfg.bandwidth_bytes_per_s, **bw}
        return cls(seed=int(doc.get("seed", 0)), latency_ms=cfg_lat, bandwidth_bytes_per_s=cfg_bw,
                   clock_mode=doc.get("clock_mode", "Virtual"))

    def to_json(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "latency_ms": {k: list(v) for k, v in sorted(self.latency_ms.items())},
            "bandwidth_bytes_per_s": dict(sorted(self.bandwidth_bytes_per_s.items())),
            "clock_mode": self.clock_mode,
        }


@dataclass(order=True)
class _InFlight:
    deliver_at: int
    order: int
    envelope: Envelope = field(compare=False)
    src: str = field(compare=False)
    dst: str = field(compare=False)


class SimNetwork:
    """Seeded point-to-point network over virtual time.

    Transfer time is latency + size/bandwidth. Each directed link delivers
    in send order, so a message never overtakes an earlier one on the same
    link; a message queued behind another on the same link starts after it.
    """

    def __init__(self, config: SimNetConfig | None = None):
        if config is not None and config.clock_mode != "Virtual":
            raise ValueError("simulated network requires clock_mode=Virtual")
        self.config = config or SimNetConfig()
        self._rng = random.Random(self.config.seed)
        self._queue: list[_InFlight] = []
        self._order = itertools.count()
        self._link_free: dict[tuple[str, str], int] = {}
        self.trace: list[tuple[int, int, str, str, str, int]] = []

    def transfer_ms(self, size_bytes: int, link_class: str = INTRA) -> int:
        lo, hi = self.config.latency_ms.get(link_class, (0, 0))
        latency = lo if lo == hi else self._rng.randint(lo, hi)
        bw = self.config.bandwidth_bytes_per_s.get(link_class)
        wire = 0 if bw is None or size_bytes == 0 else -(-size_bytes * 1000 // bw)
        return latency + wire

    def send(self, envelope: Envelope, src: str, dst: str, now: int, *, size_bytes: int = 0,
             link_class: str = INTRA) -> int:
        """Queue ``envelope`` and return its delivery time."""
        start = max(now, self._link_free.get((src, dst), now))
        deliver_at = start + self.transfer_ms(size_bytes, link_class)
        self._link_free[(src, dst)] = deliver_at
        heapq.heappush(self._queue, _InFlight(deliver_at, next(self._order), envelope, src, dst))
        self.trace.append((now, deliver_at, src, dst, envelope.msg_type, size_bytes))
        return deliver_at

    def next_delivery(self) -> int | None:
        return self._queue[0].deliver_at if self._queue else None

    def deliver(self, now: int) -> list[tuple[Envelope, str]]:
        return sim_deliver(self, now)

    def __len__(self) -> int:
        return len(self._queue)

    def _pop_due(self, now: int) -> Iterator[_InFlight]:
        while self._queue and self._queue[0].deliver_at <= now:
            yield heapq.heappop(self._queue)


def sim_deliver(net: SimNetwork, now: int) -> list[tuple[Envelope, str]]:
    """Envelopes due at or before ``now`` with their recipients, in delivery order."""
    return [(m.envelope, m.dst) for m in net._pop_due(now)]
