from __future__ import annotations

import asyncio
import json
import socket
import struct
import sys

import pytest

from cumulus.master import Master, MasterConfig
from cumulus.scheduler import AppState
from cumulus.transport import TransportError, request

PY = sys.executable


def run(coro, timeout=30):
    return asyncio.run(asyncio.wait_for(coro, timeout))


async def ask(address, msg_type, payload=None):
    return await asyncio.to_thread(request, address, msg_type, payload)


async def started_master(**kw):
    master = Master(MasterConfig(listen="127.0.0.1:0", ledger_path=None, prices={"*": "0.01"}, **kw))
    return master, await master.start()


def test_node_message_from_unregistered_peer_is_bad_request():
    async def scenario():
        master, address = await started_master()
        reply = await ask(address, "heartbeat", {})
        await master.stop()
        return reply

    reply = run(scenario())
    assert reply.msg_type == "error" and reply.payload["code"] == "BadRequest"


def test_unknown_message_type_drops_the_connection():
    async def scenario():
        master, address = await started_master()
        with pytest.raises(TransportError):
            await ask(address, "frobnicate", {})
        reply = await ask(address, "nodes", {})
        await master.stop()
        return reply

    assert run(scenario()).payload == {"nodes": []}


def test_malformed_frame_drops_only_that_connection():
    async def scenario():
        master, address = await started_master()
        host, port = address.rsplit(":", 1)

        def garbage():
            with socket.create_connection((host, int(port))) as s:
                body = b"not json at all"
                s.sendall(struct.pack(">I", len(body)) + body)
                s.settimeout(5)
                return s.recv(10)

        closed = await asyncio.to_thread(garbage)
        reply = await ask(address, "nodes", {})
        await master.stop()
        return closed, reply

    closed, reply = run(scenario())
    assert closed == b""
    assert reply.msg_type == "reply" and reply.payload == {"nodes": []}


def test_status_of_unknown_application():
    async def scenario():
        master, address = await started_master()
        reply = await ask(address, "status", {"app_id": "ghost"})
        await master.stop()
        return reply

    reply = run(scenario())
    assert reply.payload["code"] == "UnknownApplication"


def test_invalid_submission_lists_violations():
    async def scenario():
        master, address = await started_master()
        desc = {"app_id": "bad", "owner": "u", "model": "Task", "payload": {"tasks": []}}
        reply = await ask(address, "submit", {"descriptor": desc, "blobs": {}})
        await master.stop()
        return reply, master.scheduler.apps

    reply, apps = run(scenario())
    assert reply.payload["code"] == "ValidationFailed"
    assert any(v["code"] == "EmptyApplication" for v in reply.payload["violations"])
    assert apps == {}


def test_node_with_no_cores_is_refused():
    async def scenario():
        master, address = await started_master()
        desc = {"node_id": "n", "address": "n", "cores": 0, "memory_mb": 1, "os": "linux", "services": ["task-exec"]}
        reply = await ask(address, "register", {"descriptor": desc})
        await master.stop()
        return reply, len(master.registry)

    reply, registered = run(scenario())
    assert reply.payload["code"] == "RegistrationRefused"
    assert registered == 0


def test_elastic_pool_launches_real_node_processes(tmp_path):
    catalog = tmp_path / "catalog.json"
    catalog.write_text(json.dumps([{"name": "fast", "cores": 1, "compute_units": 1, "memory_mb": 512,
                                    "rate_per_hour": "0.10", "boot_latency_s": 0}]))
    pool = {"interval_ms": 200, "launch_nodes": True, "node_work_dir": str(tmp_path / "nodes"),
            "policy": {"preferred_type": "fast", "max_instances": 2}}

    async def scenario():
        master, address = await started_master(catalog_path=str(catalog), pool=pool, heartbeat_interval_ms=200)
        tasks = [{"program": PY, "args": ["-c", "print('hi')"]} for _ in range(3)]
        desc = {"app_id": "grow", "owner": "u", "model": "Task", "payload": {"tasks": tasks}}
        await ask(address, "submit", {"descriptor": desc, "blobs": {}})
        try:
            deadline = asyncio.get_running_loop().time() + 20
            while master.scheduler.apps["grow"].finished_at is None:
                assert asyncio.get_running_loop().time() < deadline, "pool never finished the work"
                await asyncio.sleep(0.05)
            return master.scheduler.status("grow", 0).state, len(master.pool.instances), {u.assigned_node for u in master.scheduler.app_units("grow")}, set(master.pool.instances)
        finally:
            await master.stop()

    state, launched, ran_on, pool_ids = run(scenario())
    assert state is AppState.FINISHED
    assert launched == 2
    assert ran_on <= pool_ids
