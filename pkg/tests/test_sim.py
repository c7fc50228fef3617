from __future__ import annotations

from cumulus.core import MS_PER_HOUR, ApplicationDescriptor, ModelKind
from cumulus.provisioning import InstanceState, Pool, PoolPolicy, SimProvider, pool_cost
from cumulus.scheduler import AppState
from cumulus.sim import SimCloud, parse_cluster, simulate


def bag(app_id: str, n: int, seconds: int) -> ApplicationDescriptor:
    return ApplicationDescriptor(app_id, "u", ModelKind.TASK,
                                 {"tasks": [{"program": "t", "sim_duration_s": seconds}] * n})


def test_elastic_pool_grows_for_backlog_then_shrinks_near_hour_boundary():
    cloud = SimCloud()
    pool = Pool(SimProvider(), PoolPolicy(preferred_type="m1.small", max_instances=4,
                                          shrink_idle_s=60, hour_boundary_window_s=300))
    cloud.attach_pool(pool, interval_ms=10_000)
    app = cloud.submit(bag("elastic", 8, 600))
    status = cloud.wait(app)
    assert status.state is AppState.FINISHED
    assert len(pool.instances) == 4  # capped by max_instances
    # Nothing runs before the first instance finishes booting.
    first_dispatch = min(t for t, *_ in cloud.dispatch_log)
    assert first_dispatch >= 90_000
    cloud.run(until=2 * MS_PER_HOUR)
    assert all(i.state is InstanceState.TERMINATED for i in pool.instances.values())
    # Each instance was released inside its first paid hour, so one hour each.
    assert pool_cost(pool, cloud.now) == 4 * 100_000


def test_pool_respects_zero_cap():
    cloud = SimCloud()
    pool = Pool(SimProvider(), PoolPolicy(max_instances=0))
    cloud.attach_pool(pool)
    app = cloud.submit(bag("none", 2, 60))
    cloud.run(until=MS_PER_HOUR)
    assert cloud.status(app).state is not AppState.FINISHED
    assert not pool.live()


def test_heartbeat_sweep_reschedules_units_of_a_silent_node():
    cloud = SimCloud(heartbeats=True, heartbeat_interval_ms=2000, missed_heartbeats_max=3)
    a = cloud.add_node("a", cores=1)
    b = cloud.add_node("b", cores=1)
    app = cloud.submit(bag("hb", 2, 60))
    cloud.run(until=cloud.now)
    spare = cloud.add_node("spare", cores=1)
    cloud.run(until=5_000)
    cloud.stop_node(b, "Abrupt")
    status = cloud.wait(app)
    assert status.state is AppState.FINISHED
    assert b not in cloud.registry
    assert a in cloud.registry and spare in cloud.registry
    lost = [u for u in cloud.scheduler.app_units(app) if u.attempts > 1]
    assert len(lost) == 1
    # Detection needs missed_heartbeats_max intervals of silence.
    assert cloud.status(app).finished_at >= 5_000 + 3 * 2000 + 60_000


def test_abrupt_loss_without_heartbeats_is_immediate():
    cloud = SimCloud()
    cloud.add_node("a", cores=1)
    cloud.add_node("b", cores=1)
    app = cloud.submit(bag("drop", 2, 60))
    cloud.run(until=cloud.now)
    cloud.add_node("spare", cores=1)
    cloud.run(until=5_000)
    cloud.stop_node("b", "Abrupt")
    assert cloud.wait(app).state is AppState.FINISHED
    assert cloud.status(app).finished_at < 5_000 + 60_000 + 1_000


def test_three_losses_fail_the_unit():
    cloud = SimCloud(max_attempts=3)
    app = cloud.submit(bag("doomed", 1, 600))
    for i in range(3):
        node = cloud.add_node(f"n{i}", cores=1)
        cloud.run(until=cloud.now + 1_000)
        cloud.stop_node(node, "Abrupt")
    status = cloud.wait(app)
    assert status.state is AppState.FINISHED_WITH_FAILURES


def test_parse_cluster_and_simulate_bag():
    assert parse_cluster("m1.small:2, c1.medium") == [("m1.small", 2), ("c1.medium", 1)]
    payload = {"tasks": {f"t{i}": {"program": "t", "sim_duration_s": 60} for i in range(4)}, "edges": []}
    report = simulate(payload, [("m1.small", 2)])
    assert report.extra["state"] == "Finished"
    assert report.makespan_s == 120
    assert report.instance_hours == {"m1.small": 2}
    assert report.cost == 200_000
