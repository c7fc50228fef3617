from __future__ import annotations

import pytest

from cumulus.accounting import Ledger
from cumulus.core import TASK_EXEC, ApplicationDescriptor, ModelKind, NodeDescriptor, UnitState
from cumulus.membership import Registry
from cumulus.scheduler import (
    AppState,
    CompletionReport,
    MissingInput,
    Scheduler,
    UnknownApplication,
    ValidationFailed,
)
from cumulus.sim import SimCloud
from cumulus.transport import CLIENT, INTRA, SimNetConfig

MB = 1_000_000


def cloud_of(*cores: int) -> Scheduler:
    reg = Registry()
    for i, c in enumerate(cores):
        reg.register(NodeDescriptor(f"n{i}", f"n{i}:1", c, 1740, "linux", frozenset({TASK_EXEC})), 0)
    return Scheduler(reg, Ledger())


def bag(app_id: str, n: int, owner: str = "alice", **extra) -> ApplicationDescriptor:
    return ApplicationDescriptor(app_id, owner, ModelKind.TASK,
                                 {"tasks": [{"program": "echo", "args": [str(i)], **extra} for i in range(n)]})


def run_all(s: Scheduler, now: int, ok: bool = True):
    """Dispatch one cycle and complete everything dispatched."""
    out = s.dispatch_cycle(now)
    for a in out:
        s.mark_started(a.app_id, a.unit_id, a.node_id, now)
        s.handle_completion(CompletionReport(a.app_id, a.unit_id, a.node_id, ok, 0 if ok else 1, now, now + 1000),
                            now + 1000)
    return out


class TestSubmit:
    def test_task_app_expands_to_pending_units(self):
        s = cloud_of(1)
        s.submit(bag("a", 8), 0)
        assert len(s.queue) == 8
        assert all(u.state is UnitState.PENDING for u in s.app_units("a"))

    def test_psm_twenty_partitions(self):
        s = cloud_of(1)
        s.submit(ApplicationDescriptor("p", "bob", ModelKind.PSM, {
            "template": {"program": "coxcs", "args": ["--partition", "{partition}"]},
            "parameters": [{"name": "partition", "values": list(range(20))}]}), 0)
        assert len(s.app_units("p")) == 20

    def test_cyclic_workflow_rejected(self):
        s = cloud_of(1)
        with pytest.raises(ValidationFailed) as err:
            s.submit(ApplicationDescriptor("w", "c", ModelKind.WORKFLOW, {
                "tasks": {"A": {"program": "a"}, "B": {"program": "b"}}, "edges": [["A", "B"], ["B", "A"]]}), 0)
        assert "CycleDetected" in [v.code for v in err.value.violations]
        assert "w" not in s.apps

    def test_duplicate_app_id(self):
        s = cloud_of(1)
        s.submit(bag("a", 1), 0)
        with pytest.raises(ValidationFailed):
            s.submit(bag("a", 1), 0)


class TestDispatch:
    def test_two_core_node_takes_two(self):
        s = cloud_of(2)
        s.submit(bag("a", 4), 0)
        out = s.dispatch_cycle(0)
        assert [a.node_id for a in out] == ["n0", "n0"]
        assert len(s.queue) == 2

    def test_nothing_pending(self):
        assert cloud_of(2).dispatch_cycle(0) == []

    def test_mixed_cores(self):
        s = cloud_of(1, 2)
        s.submit(bag("a", 5), 0)
        out = s.dispatch_cycle(0)
        assert len(out) == 3 and len(s.queue) == 2
        assert sorted(a.node_id for a in out) == ["n0", "n1", "n1"]

    def test_fifo_order(self):
        s = cloud_of(1)
        s.submit(bag("a", 2), 0)
        s.submit(bag("b", 2), 1)
        assert [a.key for a in s.dispatch_cycle(2)] == [("a", "task-0000")]

    def test_draining_node_gets_nothing(self):
        s = cloud_of(1, 1)
        s.drain("n0")
        s.submit(bag("a", 3), 0)
        assert [a.node_id for a in s.dispatch_cycle(0)] == ["n1"]


class TestCompletion:
    def test_last_unit_finishes_app(self):
        s = cloud_of(4)
        s.submit(bag("a", 3), 0)
        run_all(s, 0)
        st = s.status("a", 5000)
        assert st.state is AppState.FINISHED and st.counts == {"Completed": 3}
        assert len(s.ledger.records) == 3

    def test_failed_unit_gives_finished_with_failures(self):
        s = cloud_of(2)
        s.submit(bag("a", 2), 0)
        a, b = s.dispatch_cycle(0)
        s.handle_completion(CompletionReport("a", a.unit_id, a.node_id, True, 0, 0, 10), 10)
        assert s.status("a", 10).state is AppState.RUNNING
        s.handle_completion(CompletionReport("a", b.unit_id, b.node_id, False, 1, 0, 20, error="exit 1"), 20)
        st = s.status("a", 20)
        assert st.state is AppState.FINISHED_WITH_FAILURES and st.failed == 1
        assert s.unit("a", b.unit_id).result.exit_status == 1

    def test_duplicate_report_ignored(self):
        s = cloud_of(1)
        s.submit(bag("a", 1), 0)
        (a,) = s.dispatch_cycle(0)
        rep = CompletionReport("a", a.unit_id, a.node_id, True, 0, 0, 10)
        assert s.handle_completion(rep, 10) is True
        assert s.handle_completion(rep, 11) is False
        assert len(s.ledger.records) == 1


class TestNodeLoss:
    def test_two_running_units_requeued(self):
        s = cloud_of(2)
        s.submit(bag("a", 2), 0)
        for a in s.dispatch_cycle(0):
            s.mark_started(a.app_id, a.unit_id, a.node_id, 1)
        requeued = s.handle_node_loss("n0", 5)
        assert len(requeued) == 2
        assert all(u.state is UnitState.PENDING and u.attempts == 2 for u in s.app_units("a"))
        assert s.in_flight == {}

    def test_idle_node_lost(self):
        assert cloud_of(1).handle_node_loss("n0", 0) == []

    def test_three_losses_fail_the_unit(self):
        s = cloud_of(1)
        s.submit(bag("a", 1), 0)
        for t in range(3):
            assert len(s.dispatch_cycle(t * 10)) == 1
            s.handle_node_loss("n0", t * 10 + 5)
        u = s.unit("a", "task-0000")
        assert u.state is UnitState.FAILED and u.result.error == "AttemptsExceeded"
        assert s.queue == [] and s.status("a", 100).state is AppState.FINISHED_WITH_FAILURES

    def test_stale_report_from_lost_node_ignored(self):
        s = cloud_of(1, 1)
        s.submit(bag("a", 1), 0)
        (a,) = s.dispatch_cycle(0)
        s.handle_node_loss(a.node_id, 1)
        s.registry.deregister(a.node_id)
        (b,) = s.dispatch_cycle(2)
        assert b.node_id != a.node_id
        assert s.handle_completion(CompletionReport("a", a.unit_id, a.node_id, True, 0, 0, 3), 3) is False
        assert s.handle_completion(CompletionReport("a", b.unit_id, b.node_id, True, 0, 2, 4), 4) is True


class TestStaging:
    def test_real_mode_missing_input(self):
        s = cloud_of(1)
        s.submit(bag("a", 1, inputs=[{"name": "x.dat", "size_bytes": 3, "content_ref": "blob/x"}]), 0)
        (a,) = s.dispatch_cycle(0)
        with pytest.raises(MissingInput):
            s.stage_files("a", a.unit_id, "In", node_id=a.node_id)
        s.store["blob/x"] = b"abc"
        assert s.stage_files("a", a.unit_id, "In", node_id=a.node_id) == {"x.dat": b"abc"}

    def test_empty_manifest(self):
        s = cloud_of(1)
        s.submit(bag("a", 1), 0)
        (a,) = s.dispatch_cycle(0)
        assert s.stage_files("a", a.unit_id, "In", node_id=a.node_id) == {}

    def test_640_megabytes_at_10_megabytes_per_second(self):
        cfg = SimNetConfig(bandwidth_bytes_per_s={INTRA: 10 * MB, CLIENT: None})
        cloud = SimCloud(cfg)
        cloud.add_node("n0", cores=1)
        tasks = [{"program": "register", "sim_duration_s": 0, "inputs": [
            {"name": f"img_{i}.img", "size_bytes": 16 * MB, "content_ref": f"in/img_{i}.img"},
            {"name": f"img_{i}.hdr", "size_bytes": 16 * MB, "content_ref": f"in/img_{i}.hdr"}]} for i in range(20)]
        app = cloud.submit(ApplicationDescriptor("ir", "eve", ModelKind.TASK, {"tasks": tasks}))
        st = cloud.wait(app)
        assert st.state is AppState.FINISHED
        assert cloud.transfer_ms == 64_000
        assert st.makespan_ms == 64_000


class TestStatus:
    def test_makespan_of_finished_app(self):
        s = cloud_of(1)
        s.submit(bag("a", 1), 0)
        (a,) = s.dispatch_cycle(0)
        s.handle_completion(CompletionReport("a", a.unit_id, a.node_id, True, 0, 0, 6_420_000), 6_420_000)
        st = s.status("a", 9_999_999)
        assert st.makespan_ms == 6_420_000 and st.makespan_ms // 60_000 == 107

    def test_makespan_so_far(self):
        s = cloud_of(1)
        s.submit(bag("a", 1), 1000)
        assert s.status("a", 4000).makespan_ms == 3000

    def test_unknown_application(self):
        with pytest.raises(UnknownApplication):
            cloud_of(1).status("nope", 0)


def test_workflow_failure_cascades_to_dependents():
    s = cloud_of(4)
    s.submit(ApplicationDescriptor("w", "c", ModelKind.WORKFLOW, {
        "tasks": {"A": {"program": "a"}, "B": {"program": "b"}, "C": {"program": "c"}},
        "edges": [["A", "B"], ["B", "C"]]}), 0)
    (a,) = s.dispatch_cycle(0)
    s.handle_completion(CompletionReport("w", a.unit_id, a.node_id, False, 1, 0, 10), 10)
    assert s.status("w", 10).state is AppState.FINISHED_WITH_FAILURES
    assert [u.result.error for u in s.app_units("w")][1:] == ["UpstreamFailed", "UpstreamFailed"]
    assert len(s.ledger.records) == 1
    s.check_invariants()
