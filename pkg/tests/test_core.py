from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cumulus.core import (
    TRANSITIONS,
    ApplicationDescriptor,
    CommandSpec,
    Event,
    ExecutionUnit,
    FileSpec,
    IllegalTransition,
    ModelKind,
    Timestamps,
    UnitResult,
    UnitState,
    billed_hours,
    ceil_div,
    format_money,
    to_micros,
    transition,
    validate_application,
    wall_minutes,
)


def fresh(**kw) -> ExecutionUnit:
    return ExecutionUnit("u", "app", CommandSpec("echo", ("hi",)), timestamps=Timestamps(submitted=0), **kw)


def running(attempts: int = 1) -> ExecutionUnit:
    u = transition(fresh(), Event.STAGE, 1)
    u = transition(u, Event.DISPATCH, 2, node_id="n1")
    u = transition(u, Event.START, 3)
    if attempts != u.attempts:
        from dataclasses import replace
        u = replace(u, attempts=attempts)
    return u


def codes(violations):
    return sorted(v.code for v in violations)


class TestTransition:
    def test_dispatch_without_stage_is_illegal(self):
        with pytest.raises(IllegalTransition):
            transition(fresh(), Event.DISPATCH, 1, node_id="n1")

    def test_complete_sets_ended(self):
        u = transition(running(), Event.COMPLETE, 10)
        assert u.state is UnitState.COMPLETED
        assert u.timestamps.ended == 10
        assert u.result.exit_status == 0

    def test_node_lost_requeues_and_counts_attempt(self):
        u = transition(running(attempts=1), Event.NODE_LOST, 5, max_attempts=3)
        assert u.state is UnitState.PENDING
        assert u.attempts == 2
        assert u.assigned_node is None
        assert u.timestamps.dispatched is None and u.timestamps.submitted == 0

    def test_node_lost_past_max_attempts_fails(self):
        u = transition(running(attempts=3), Event.NODE_LOST, 5, max_attempts=3)
        assert u.state is UnitState.FAILED
        assert u.result.error == "AttemptsExceeded"

    def test_dispatch_records_node_and_first_attempt(self):
        u = transition(transition(fresh(), Event.STAGE, 1), Event.DISPATCH, 2, node_id="n7")
        assert (u.state, u.assigned_node, u.attempts, u.timestamps.dispatched) == (UnitState.DISPATCHED, "n7", 1, 2)

    def test_illegal_transition_leaves_input_untouched(self):
        u = fresh()
        before = u.history
        with pytest.raises(IllegalTransition):
            transition(u, Event.COMPLETE, 4)
        assert u.state is UnitState.PENDING and u.history == before

    def test_terminal_states_accept_nothing(self):
        done = transition(running(), Event.FAIL, 9, result=UnitResult(exit_status=2))
        for ev in Event:
            with pytest.raises(IllegalTransition):
                transition(done, ev, 10, node_id="n1")

    def test_unit_json_round_trip(self):
        u = transition(running(), Event.COMPLETE, 10)
        back = ExecutionUnit.from_json(u.to_json())
        assert back.to_json() == u.to_json()
        assert back.result == u.result and back.timestamps == u.timestamps


events = st.lists(st.tuples(st.sampled_from(list(Event)), st.integers(0, 50)), max_size=40)


@settings(max_examples=300, deadline=None)
@given(events, st.integers(1, 4))
def test_random_event_sequences_follow_the_table(seq, max_attempts):
    """Only listed transitions happen, terminal states absorb, timestamps stay ordered."""
    u = fresh()
    now = 0
    for ev, dt in seq:
        now += dt
        before = u
        try:
            u = transition(u, ev, now, node_id="n1", max_attempts=max_attempts)
        except IllegalTransition:
            assert (before.state, ev) not in TRANSITIONS
            assert before.state.terminal or (before.state, ev) not in TRANSITIONS
            continue
        assert not before.state.terminal
        expected = TRANSITIONS[(before.state, ev)]
        if ev is Event.NODE_LOST and before.attempts + 1 > max_attempts:
            expected = UnitState.FAILED
        assert u.state is expected
        assert u.timestamps.ordered()
        assert u.attempts <= max_attempts
        assert u.history[-1] is u.state


class TestValidate:
    def test_well_formed_task_app(self):
        desc = ApplicationDescriptor("a", "alice", ModelKind.TASK,
                                     {"tasks": [{"program": "echo", "args": [str(i)]} for i in range(3)]})
        assert validate_application(desc) == []

    def test_cycle_detected(self):
        desc = ApplicationDescriptor("a", "alice", ModelKind.WORKFLOW, {
            "tasks": {"A": {"program": "x"}, "B": {"program": "y"}},
            "edges": [["A", "B"], ["B", "A"]],
        })
        assert "CycleDetected" in codes(validate_application(desc))

    def test_empty_template(self):
        desc = ApplicationDescriptor("a", "alice", ModelKind.PSM, {
            "template": {"program": ""}, "parameters": [{"name": "p", "values": [1]}]})
        assert "EmptyTemplate" in codes(validate_application(desc))

    def test_missing_owner_and_duplicate_shared_file(self):
        desc = ApplicationDescriptor("a", "", ModelKind.TASK, {"tasks": [{"program": "echo"}]},
                                     shared_files=(FileSpec("x"), FileSpec("x")))
        assert codes(validate_application(desc)) == ["DuplicateFileName", "EmptyOwner"]

    def test_descriptor_json_round_trip(self):
        desc = ApplicationDescriptor("a", "alice", ModelKind.TASK, {"tasks": [{"program": "echo"}]},
                                     shared_files=(FileSpec("lib.so", 10, "lib.so"),))
        assert ApplicationDescriptor.from_json(desc.to_json()) == desc


class TestArithmetic:
    @pytest.mark.parametrize("text,micros", [("0.10", 100_000), ("$1.40", 1_400_000), ("0.000001", 1), (2, 2_000_000)])
    def test_to_micros(self, text, micros):
        assert to_micros(text) == micros

    @pytest.mark.parametrize("micros,text", [(0, "$0.00"), (1_400_000, "$1.40"), (714_000, "$0.714"), (-50_000, "-$0.05")])
    def test_format_money(self, micros, text):
        assert format_money(micros) == text

    def test_wall_minutes(self):
        assert wall_minutes(0, 59_000) == 1
        assert wall_minutes(0, 61_000) == 2
        assert wall_minutes(5, 5) == 1

    def test_billed_hours(self):
        assert billed_hours(60_000) == 1
        assert billed_hours(61 * 60_000) == 2
        assert billed_hours(120 * 60_000) == 2

    @given(st.integers(-10**6, 10**6), st.integers(1, 10**4))
    def test_ceil_div_matches_float_free_definition(self, a, b):
        q = ceil_div(a, b)
        assert (q - 1) * b < a <= q * b
