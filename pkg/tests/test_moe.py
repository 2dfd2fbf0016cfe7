import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import lane_trajectory
from uavmoe.errors import ConfigError, ConsistencyError, DomainError
from uavmoe.geo import assign_lanes
from uavmoe.ingest import Dataset, VehicleType
from uavmoe.moe import (
    CrashCoefficientTable,
    CrashType,
    TimeCard,
    aggregate_moes,
    crash_rates,
    delay_from_speeds,
    free_flow_speed,
    link_count_series,
    partial_stops_from_speeds,
    travel_time,
)


def test_travel_time():
    assert travel_time(TimeCard(1, 1, 10.0, 30.0)) == 20.0
    assert travel_time(TimeCard(1, 1, 5.0, 5.0)) == 0.0
    with pytest.raises(ConsistencyError):
        travel_time(TimeCard(1, 1, 30.0, 10.0))


def test_link_count_single_card():
    s = link_count_series([TimeCard(1, 1, 0.0, 10.0)], 1.0)
    on = (s.t >= 1) & (s.t <= 10)
    assert np.all(s.n[on] == 1)
    assert np.all(s.n[s.t > 10] == 0) and s.n[0] == 0


def test_link_count_overlap_and_empty():
    s = link_count_series([TimeCard(1, 1, 0.0, 10.0), TimeCard(2, 1, 5.0, 15.0)], 1.0)
    assert s.n[list(s.t).index(8.0)] == 2
    assert s.n[-1] == 0
    empty = link_count_series([], 1.0)
    assert np.all(empty.n == 0)


def test_link_count_negative_names_track():
    with pytest.raises(ConsistencyError, match="7"):
        link_count_series([TimeCard(7, 1, 10.0, 2.0)], 1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 50)), min_size=1, max_size=20))
def test_link_count_conservation(spans):
    cards = [TimeCard(i, 1, a, a + d) for i, (a, d) in enumerate(spans)]
    s = link_count_series(cards, 0.5)
    assert s.n.min() >= 0
    assert s.n[-1] == 0
    assert int(s.u.sum()) == 0


def test_stops_examples():
    assert partial_stops_from_speeds(np.linspace(15, 0, 11), 15) == pytest.approx(1.0)
    assert partial_stops_from_speeds([8, 8, 8, 8], 15) == 0.0
    assert partial_stops_from_speeds([15, 7.5, 15, 0], 15) == pytest.approx(1.5)
    with pytest.raises(DomainError):
        partial_stops_from_speeds([1, 0], 0.0)


def test_delay_examples():
    assert delay_from_speeds(np.zeros(10), 15.0, 1.0) == pytest.approx(10.0)
    assert delay_from_speeds(np.full(10, 15.0), 15.0, 1.0) == 0.0
    assert delay_from_speeds([7.5], 15.0, 0.1) == pytest.approx(0.05)
    assert delay_from_speeds([20.0, 30.0], 15.0, 1.0) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 40), min_size=1, max_size=50), st.floats(1, 30), st.sampled_from([0.04, 0.1, 1.0]))
def test_delay_bounds(speeds, u_f, dt):
    d = delay_from_speeds(speeds, u_f, dt)
    assert -1e-12 <= d <= len(speeds) * dt + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 40), min_size=2, max_size=50), st.floats(1, 30))
def test_stops_nonnegative_and_bounded(speeds, u_f):
    s = partial_stops_from_speeds(speeds, u_f)
    assert s >= 0
    assert s <= sum(max(a - b, 0) for a, b in zip(speeds, speeds[1:])) / u_f + 1e-9


def test_crash_examples():
    table = CrashCoefficientTable.from_records(
        [{"type": t.value, "a1": 0.0, "a2": math.log(0.00597) if t is CrashType.SAME_DIR_REAR_END else 0.0} for t in CrashType]
    )
    rates = crash_rates(55.0, table)
    assert rates.per_type[CrashType.SAME_DIR_REAR_END] == pytest.approx(0.00597, rel=1e-12)
    assert rates.per_type[CrashType.BACKING] == 1.0
    assert crash_rates(0.0, table).per_type[CrashType.OTHER] == 1.0

    table2 = CrashCoefficientTable.from_records([{"type": t.value, "a1": 0.001, "a2": -5.0} for t in CrashType])
    assert crash_rates(55.0, table2).per_type[CrashType.OTHER] == pytest.approx(math.exp(-4.945), rel=1e-12)
    assert crash_rates(55.0, table2).per_type[CrashType.OTHER] == pytest.approx(0.00711891, abs=5e-9)
    with pytest.raises(DomainError):
        crash_rates(-1.0, table2)


def test_crash_table_validation():
    rows = [{"type": t.value, "a1": 0, "a2": 0} for t in CrashType]
    with pytest.raises(ConfigError):
        CrashCoefficientTable.from_records(rows[:-1])
    with pytest.raises(ConfigError):
        CrashCoefficientTable.from_records(rows + rows[:1])
    en_dash = [dict(r, type=r["type"].replace("Vehicle Turning - ", "Vehicle Turning \u2013 ")) for r in rows]
    assert len(CrashCoefficientTable.from_records(en_dash).rows) == 14


def test_bundled_table_loads():
    table = CrashCoefficientTable.load()
    assert len(table.rows) == 14 and all(r.a1 == 0 for r in table.rows)


def _run(approach, trajs, dt=1.0):
    s, area = approach
    ds = Dataset.from_trajectories(trajs, dt)
    asg = assign_lanes(ds, area)
    return ds, asg, aggregate_moes(ds, asg, 15.0, area.lane_ids, {"Left": (1,), "Right": (2, 3)}, dt)


def test_one_vehicle_aggregate(approach):
    s, _ = approach
    tr = lane_trajectory(s, 1, 2, [50, 60, 60, 60, 75], [15, 5, 0, 0, 15])
    _, _, agg = _run(approach, [tr])
    (vm,) = agg.vehicles
    stat = agg.lane_stat(2)
    assert stat.count == 1
    assert stat.mean("delay") == pytest.approx(vm.delay)
    assert vm.travel_time == 4.0
    assert vm.stops == pytest.approx(1.0)
    assert vm.delay == pytest.approx(2 / 3 + 1 + 1)
    assert agg.lane_stat(2, VehicleType.LIGHT_MEDIUM_DUTY).count == 1
    assert agg.lane_stat(1).count == 0 and agg.lane_stat(1).mean("delay") is None


def test_group_mean_and_movement_pooling(approach):
    s, _ = approach
    # stationary vehicles: 5 s and 7 s of delay in lane 2, 3 s in lane 3
    a = lane_trajectory(s, 1, 2, np.full(5, 100.0), 0.0)
    b = lane_trajectory(s, 2, 2, np.full(7, 100.0), 0.0, vtype="Bus")
    c = lane_trajectory(s, 3, 3, np.full(3, 100.0), 0.0)
    _, _, agg = _run(approach, [a, b, c])
    assert agg.lane_stat(2).mean("delay") == pytest.approx(6.0)  # (5 + 7) / 2
    pooled = agg.movement_stat("Right")
    assert pooled.count == 3
    assert pooled.mean("delay") == pytest.approx((5 + 7 + 3) / 3)
    assert agg.movement_stat("Right", VehicleType.BUS).mean("delay") == pytest.approx(7.0)


def test_free_flow_speed_sources(approach):
    s, _ = approach
    tr = lane_trajectory(s, 1, 2, np.linspace(10, 200, 20), np.linspace(0, 19, 20))
    ds, asg, _ = _run(approach, [tr])
    assert free_flow_speed(ds, asg, "speed-limit", 15.0) == 15.0
    assert free_flow_speed(ds, asg, "p95", 15.0) == pytest.approx(np.percentile(np.arange(20.0), 95))
    with pytest.raises(ConfigError):
        free_flow_speed(ds, asg, "median")
