from __future__ import annotations

import itertools
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cumulus.core import ApplicationDescriptor, FileSpec, ModelKind, OperatorRef
from cumulus.models import (
    IR_STEPS_S,
    EmptyApplication,
    MissingDuration,
    StageFailed,
    StopStages,
    UnknownPlaceholder,
    build_ir_workflow,
    critical_path_ms,
    execute_operator,
    expand_psm,
    expand_task,
    expand_workflow,
    fnv1a64,
    partition_for,
    plan_mapreduce,
    ready_set,
    run_stage_driver,
    simulate_workflow,
    topological_order,
)
from cumulus.sim import SimCloud, run_mapreduce
from tests.conftest import load_payload


class TestTaskModel:
    def test_eight_commands(self):
        units = expand_task({"tasks": [{"program": "echo", "args": [str(i)]} for i in range(8)]}, "a")
        assert [u.unit_id for u in units] == [f"task-{i:04d}" for i in range(8)]

    def test_one_command(self):
        assert len(expand_task({"tasks": [{"program": "true"}]})) == 1

    def test_no_commands(self):
        with pytest.raises(EmptyApplication):
            expand_task({"tasks": []})


class TestPsm:
    def test_cartesian_product(self):
        units = expand_psm({"template": {"program": "run", "args": ["{a}", "{b}"]},
                            "parameters": [{"name": "a", "values": [1, 2]}, {"name": "b", "values": ["x", "y"]}]})
        assert [u.command.args for u in units] == [("1", "x"), ("1", "y"), ("2", "x"), ("2", "y")]

    def test_twenty_partitions(self):
        units = expand_psm({"template": {"program": "coxcs", "args": ["--part", "{partition}"]},
                            "parameters": [{"name": "partition", "values": list(range(20))}]})
        assert len(units) == 20 and units[19].command.args == ("--part", "19")

    def test_unknown_placeholder(self):
        with pytest.raises(UnknownPlaceholder):
            expand_psm({"template": {"program": "run", "args": ["{c}"]},
                        "parameters": [{"name": "a", "values": [1]}]})

    def test_substitutes_file_names(self):
        (u,) = expand_psm({"template": {"program": "run", "outputs": [{"name": "out_{a}.txt"}]},
                           "parameters": [{"name": "a", "values": [7]}]})
        assert u.command.outputs[0].logical_name == "out_7.txt"


class TestPartitioner:
    def test_fnv_vectors(self):
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8

    @given(st.text(max_size=30), st.integers(1, 9))
    def test_partition_in_range_and_stable(self, key, r):
        p = partition_for(key, r)
        assert 0 <= p < r and p == partition_for(key, r)


class TestMapReduce:
    def test_plan_shape(self):
        plan = plan_mapreduce({"mapper": "word-count", "reducer": "word-count", "reducers": 2,
                               "input": [{"name": f"p{i}"} for i in range(3)]}, "wc")
        assert len(plan.map_units) == 3 and len(plan.reduce_units) == 2
        assert all(r.depends_on == ("map-0000", "map-0001", "map-0002") for r in plan.reduce_units)

    def test_single_reducer_gets_every_key(self):
        op = OperatorRef("word-count", "map", 0, 1, inputs=(FileSpec("t"),))
        out = execute_operator(op, {"t": b"b a b c"})
        assert list(out) == ["part-0"]

    def test_word_count_matches_sequential_reference(self, payloads_dir):
        texts = {f"corpus/{n}": (payloads_dir / "corpus" / n).read_bytes() for n in ("a.txt", "b.txt")}
        reference = Counter(w for t in texts.values() for w in t.decode().split())
        payload = load_payload("wordcount.json")["payload"]
        assert run_mapreduce(payload, texts) == dict(reference)

    def test_grep_and_sum_operators(self):
        grep = {"mapper": "token-grep-count", "reducer": "token-grep-count", "reducers": 3,
                "args": {"pattern": "ab"}, "input": [{"name": "x", "content_ref": "x"}]}
        assert run_mapreduce(grep, {"x": b"ab cab abc zz ab"}) == {"ab": 2, "cab": 1, "abc": 1}
        total = {"mapper": "integer-sum", "reducer": "integer-sum", "reducers": 1,
                 "input": [{"name": "x", "content_ref": "x"}, {"name": "y", "content_ref": "y"}]}
        assert run_mapreduce(total, {"x": b"1\n2\n", "y": b"39\n"}) == {"sum": 42}


DIAMOND = {"tasks": {t: {"program": t.lower(), "sim_duration_s": d} for t, d in
                     (("A", 100), ("B", 300), ("C", 200), ("D", 100))},
           "edges": [["A", "B"], ["A", "C"], ["B", "D"], ["C", "D"]]}


class TestWorkflow:
    def test_ready_set_diamond(self):
        assert ready_set(DIAMOND, []) == {"A"}
        assert ready_set(DIAMOND, ["A"]) == {"B", "C"}
        assert ready_set(DIAMOND, ["A", "B", "C"]) == {"D"}
        assert ready_set(DIAMOND, ["A"], running=["B"]) == {"C"}

    def test_topological_order_declaration_tiebreak(self):
        assert topological_order(DIAMOND) == ["A", "B", "C", "D"]

    def test_child_inputs_point_at_parent_outputs(self):
        payload = load_payload("chain3.json")["payload"]
        units = {u.unit_id: u for u in expand_workflow(payload, "w")}
        assert units["b"].command.inputs[0].content_ref == "w/a/a.out"
        assert units["c"].depends_on == ("b",)

    def test_critical_path_of_diamond(self):
        assert critical_path_ms(DIAMOND) == 500_000

    def test_chain_makespan(self):
        report = simulate_workflow(load_payload("chain3.json")["payload"], [("m1.small", 1)])
        assert report.makespan_s == 1800.0

    def test_two_waves_on_ten_nodes(self):
        cloud = SimCloud()
        for i in range(10):
            cloud.add_node(f"n{i}", cores=1)
        app = cloud.submit(ApplicationDescriptor("bag", "x", ModelKind.TASK,
                                                 {"tasks": [{"program": "t", "sim_duration_s": 600}] * 20}))
        st_ = cloud.wait(app)
        assert st_.makespan_ms == 1_200_000 and cloud.waves(app) == 2

    def test_missing_duration(self):
        with pytest.raises(MissingDuration):
            simulate_workflow({"tasks": {"a": {"program": "x"}}, "edges": []}, [("m1.small", 1)])

    def test_ir_workflow_calibration(self):
        one = build_ir_workflow(1)
        serial = sum(t["sim_duration_s"] for t in one["tasks"].values())
        assert serial == 69 * 60 == sum(IR_STEPS_S.values()) + 2 * (IR_STEPS_S["slicer"] + IR_STEPS_S["convert"])
        report = simulate_workflow(one, [("m1.small", 1)])
        assert report.makespan_s == 69 * 60
        twenty = build_ir_workflow(20)
        inputs = sum(f["size_bytes"] for t in twenty["tasks"].values() for f in t["inputs"] if "content_ref" in f)
        assert inputs == 640_000_000


def _dag(draw_edges, n, durations):
    tasks = {f"t{i}": {"program": "x", "sim_duration_s": durations[i]} for i in range(n)}
    return {"tasks": tasks, "edges": [[f"t{a}", f"t{b}"] for a, b in draw_edges]}


def longest_path_by_enumeration(payload) -> int:
    """Enumerate every source-to-sink path; independent of the topological pass."""
    children: dict[str, list[str]] = {t: [] for t in payload["tasks"]}
    has_parent = set()
    for a, b in payload["edges"]:
        children[a].append(b)
        has_parent.add(b)
    dur = {t: int(d["sim_duration_s"] * 1000) for t, d in payload["tasks"].items()}
    best = 0
    stack = [(t, dur[t]) for t in payload["tasks"] if t not in has_parent]
    while stack:
        t, total = stack.pop()
        best = max(best, total)
        stack.extend((c, total + dur[c]) for c in children[t])
    return best


@st.composite
def dags(draw, max_tasks=12):
    n = draw(st.integers(1, max_tasks))
    pairs = [(a, b) for a, b in itertools.combinations(range(n), 2)]
    edges = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=2 * n)) if pairs else []
    durations = draw(st.lists(st.integers(0, 900), min_size=n, max_size=n))
    return _dag(edges, n, durations)


@settings(max_examples=60, deadline=None)
@given(dags())
def test_critical_path_matches_enumeration(payload):
    assert critical_path_ms(payload) == longest_path_by_enumeration(payload)


class TestStageDriver:
    @staticmethod
    def bag(n, secs=60):
        return lambda k: [{"program": "coxcs", "args": [str(k), str(i)], "sim_duration_s": secs} for i in range(n)]

    def test_five_stages_of_twenty(self):
        cloud = SimCloud()
        cloud.provision("m1.small", 10)
        results = run_stage_driver(cloud, 5, self.bag(20))
        assert [r.status.counts for r in results] == [{"Completed": 20}] * 5
        assert len(cloud.ledger.records) == 100
        for prev, nxt in zip(results, results[1:]):
            first = min(t for t, a, _, _ in cloud.dispatch_log if a == nxt.app_id)
            assert first >= prev.status.finished_at

    def test_single_stage_is_a_plain_bag(self):
        cloud = SimCloud()
        cloud.add_node("n", cores=4)
        (r,) = run_stage_driver(cloud, 1, self.bag(3))
        assert r.status.counts == {"Completed": 3}

    def test_hook_abort_stops_later_stages(self):
        cloud = SimCloud()
        cloud.add_node("n", cores=4)

        def hook(k, result):
            if k == 1:
                raise StopStages

        results = run_stage_driver(cloud, 5, self.bag(2), hook)
        assert len(results) == 2 and set(cloud.scheduler.apps) == {"stages-0", "stages-1"}

    def test_failing_stage_aborts(self):
        cloud = SimCloud()
        cloud.add_node("n", cores=4)
        bad = lambda k: [{"program": "x", "sim_duration_s": 1, "sim_exit_code": 1}]  # noqa: E731
        with pytest.raises(StageFailed):
            run_stage_driver(cloud, 3, bad)
        assert set(cloud.scheduler.apps) == {"stages-0"}
