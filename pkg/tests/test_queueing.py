import numpy as np
import pytest

from conftest import lane_trajectory
from uavmoe.geo import assign_lanes, assign_trajectory
from uavmoe.ingest import Dataset
from uavmoe.pipeline.synth import SynthScenario, synth_generate
from uavmoe.queueing import (
    QueueInterval,
    detect_spillbacks,
    extract_queue_intervals,
    infer_signal_phases,
    is_queued,
    lane_profiles,
    lane_queue_profile,
    max_queue_length,
)


def _intervals(s, area, tr, **kw):
    return extract_queue_intervals(tr, assign_trajectory(tr, area), area, **kw)


def _standing(track_id, lane, x, t0, t1, at_entry=False):
    t = np.arange(t0, t1)
    return QueueInterval(
        track_id, lane, float(t0), float(t1), x, x, t.astype(float), np.full(len(t), x),
        np.full(len(t), 37.99), np.full(len(t), 23.73), at_entry,
    )


def test_is_queued_threshold():
    assert is_queued(0.0)
    assert is_queued(1.2)
    assert not is_queued(1.21)


def test_single_run(approach):
    s, area = approach
    tr = lane_trajectory(s, 1, 2, [100, 105, 105, 115], [10, 0.5, 0.5, 10])
    ivs = _intervals(s, area, tr)
    assert len(ivs) == 1
    assert ivs[0].duration == pytest.approx(2.0)
    assert ivs[0].lane_id == 2
    assert ivs[0].x_enter == pytest.approx(105.0, abs=1e-6)


def test_no_queue_when_moving(approach):
    s, area = approach
    tr = lane_trajectory(s, 1, 2, np.linspace(10, 60, 6), 10.0)
    assert _intervals(s, area, tr) == []


def test_short_run_dropped(approach):
    s, area = approach
    tr = lane_trajectory(s, 1, 2, [100, 110, 111, 121, 121, 131], [10, 0.5, 10, 0.5, 0.5, 10])
    ivs = _intervals(s, area, tr, min_queue_dwell=2)
    assert len(ivs) == 1 and ivs[0].t_enter == 3.0


def test_run_reaching_last_sample(approach):
    s, area = approach
    tr = lane_trajectory(s, 1, 2, [100, 105, 105], [10, 0.5, 0.5])
    (iv,) = _intervals(s, area, tr, dt=1.0)
    assert iv.t_exit == 3.0


def test_extent_single_and_min_rule(approach):
    _, area = approach
    prof = lane_queue_profile([_standing(1, 2, 197.3, 0, 5)], area)
    assert prof.extent.max() == pytest.approx(102.7)
    prof = lane_queue_profile([_standing(1, 2, 250.0, 0, 5), _standing(2, 2, 280.0, 0, 5)], area)
    assert prof.extent.max() == pytest.approx(50.0)
    assert prof.n_queued.max() == 2


def test_empty_profile(approach):
    _, area = approach
    prof = lane_queue_profile([], area, lane_id=1)
    assert len(prof) == 0 and max_queue_length(prof) is None


def test_max_queue_earliest_tie(approach):
    _, area = approach
    ivs = [_standing(1, 1, 250.0, 0, 5), _standing(2, 1, 250.0, 20, 25), _standing(3, 1, 260.0, 40, 45)]
    qm = max_queue_length(lane_queue_profile(ivs, area))
    assert qm.length == pytest.approx(50.0) and qm.timestamp == 0.0


def test_planted_forty_metre_queue():
    # red at 20 s, 6 s arrivals from t=0: the 5 vehicles crossing in [20, 50) stop; jam spacing 8 m
    s = SynthScenario(n_lanes=1, horizon=43, red_offset=20, arrival_headway=6.0, jam_spacing=8.0)
    ds, area, truth = synth_generate(s)
    assert len(truth.stopped) == 5
    length, t_planted = truth.max_queue[1]
    assert length == pytest.approx(40.0)
    asg = assign_lanes(ds, area)
    ivs = [iv for a in asg for iv in extract_queue_intervals(ds[a.track_id], a, area, dt=s.dt)]
    qm = max_queue_length(lane_profiles(ivs, area)[1])
    assert abs(qm.length - 40.0) < 0.5
    assert abs(qm.timestamp - t_planted) <= s.dt + 1e-9


def test_spillback_rules(approach):
    _, area = approach
    assert detect_spillbacks([_standing(1, 1, 200.0, 0, 5)], area, 5.0) == []
    ev = detect_spillbacks([_standing(1, 1, 50.0, 7, 12, at_entry=True)], area, 5.0)
    assert [(e.lane_id, e.t) for e in ev] == [(1, 7.0)]
    near = [_standing(1, 2, 3.0, 0, 5), _standing(2, 2, 2.0, 4, 9), _standing(3, 2, 1.0, 15, 20)]
    assert [e.t for e in detect_spillbacks(near, area, 5.0, dedup_s=10.0)] == [0.0, 15.0]
    with pytest.raises(ValueError):
        detect_spillbacks([], area, 0.0)


def test_vehicle_entering_queued(approach):
    s, area = approach
    tr = lane_trajectory(s, 1, 1, [-3.0, 40.0, 40.0, 40.0, 50.0], [10, 0.5, 0.0, 0.0, 8.0], t=[0, 1, 2, 3, 4])
    (ev,) = detect_spillbacks(_intervals(s, area, tr), area, 5.0)
    assert ev.t == 1.0


def test_phases_empty(approach):
    _, area = approach
    assert infer_signal_phases([lane_queue_profile([], area, lane_id=1)]).red_onsets == []


def test_synchronised_lanes_merge(approach):
    _, area = approach
    lane1 = [_standing(1, 1, 290.0, 10, 30), _standing(2, 1, 280.0, 12, 32)]
    lane2 = [_standing(3, 2, 290.0, 10, 30), _standing(4, 2, 270.0, 13, 33)]
    est = infer_signal_phases(lane_profiles(lane1 + lane2, area).values())
    assert est.red_onsets == [10.0]
    assert est.green_onsets == [30.0]


def test_fixed_cycle_phases():
    s = SynthScenario(cycle=60, red=30, dt=1.0, arrival_headway=(6.0, 7.0), horizon=300)
    ds, area, truth = synth_generate(s, seed=2)
    asg = assign_lanes(ds, area)
    ivs = [iv for a in asg for iv in extract_queue_intervals(ds[a.track_id], a, area, dt=s.dt)]
    est = infer_signal_phases(lane_profiles(ivs, area).values())
    assert len(est.green_onsets) >= 4
    for g in est.green_onsets:
        assert min(abs(g - p) for p in truth.green_onsets) <= 2 * s.dt
    # red estimates trail the planted onset by the first stopper's approach and braking
    lag_bound = max(s.headways()) + s.free_speed / (2 * s.decel) + 2 * s.dt
    for r in est.red_onsets:
        lag = min(r - p for p in truth.red_onsets if p <= r)
        assert 0 <= lag <= lag_bound
        assert min(abs(r - q) for q in truth.queue_onsets) <= 2 * s.dt
