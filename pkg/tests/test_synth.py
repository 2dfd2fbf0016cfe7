import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uavmoe.geo import assign_lanes
from uavmoe.moe import aggregate_moes
from uavmoe.pipeline.synth import Kinematics, Segment, SynthScenario, synth_generate
from uavmoe.queueing import detect_spillbacks, extract_queue_intervals


def _intervals(ds, area, dt):
    asg = assign_lanes(ds, area)
    return [iv for a in asg for iv in extract_queue_intervals(ds[a.track_id], a, area, dt=dt)]


def test_five_stopped_make_thirty_five_metres():
    s = SynthScenario(n_lanes=1, horizon=43, red_offset=20, arrival_headway=6.0)
    _, _, truth = synth_generate(s)
    assert len(truth.stopped) == 5
    assert truth.max_queue[1][0] == pytest.approx(35.0)
    assert sorted(sv.slot for sv in truth.stopped) == [0, 1, 2, 3, 4]


def test_no_arrivals_gives_empty_dataset():
    ds, area, truth = synth_generate(SynthScenario(horizon=0))
    assert len(ds) == 0
    assert truth.max_queue == {} and truth.stopped == []
    assert area.n_lanes == 2


def test_seed_determinism():
    s = SynthScenario(arrival_jitter=2.0, type_mix=(("Car", 0.7), ("Bus", 0.3)))
    a, _, ta = synth_generate(s, seed=11)
    b, _, tb = synth_generate(s, seed=11)
    c, _, _ = synth_generate(s, seed=12)
    assert a.same_as(b) and ta.to_dict() == tb.to_dict()
    assert not a.same_as(c)


def test_oversaturated_spillback_time():
    # red 40 s of 60, one arrival every 3 s: the first red fills the whole approach
    s = SynthScenario(n_lanes=1, cycle=60, red=40, arrival_headway=3.0, horizon=120, red_offset=20)
    assert s.oversaturated == (True,)
    ds, area, truth = synth_generate(s)

    # cumulative count oracle: with nobody leaving during red, the n-th stopper
    # rests n jam spacings back; the queue spills once that point is within eps
    v, b, L, sp = s.free_speed, s.decel, s.approach_length, s.jam_spacing
    first = math.ceil((s.red_offset - L / v) / 3.0) * 3.0
    n_spill = math.ceil((L - s.spill_eps) / sp)
    pos = L - n_spill * sp
    t_stop = first + (n_spill - 1) * 3.0 + pos / v + v / (2 * b)
    t_oracle = math.ceil(t_stop / s.dt - 1e-9) * s.dt - 1.2 / b
    assert t_oracle < s.red_offset + s.red
    assert truth.spillbacks[1][0] == pytest.approx(t_oracle, abs=1e-9)

    events = detect_spillbacks(_intervals(ds, area, s.dt), area, s.spill_eps)
    assert abs(events[0].t - t_oracle) <= 2 * s.dt


def test_truth_delay_matches_measured():
    s = SynthScenario(n_lanes=2, horizon=150)
    ds, area, truth = synth_generate(s)
    asg = assign_lanes(ds, area)
    agg = aggregate_moes(ds, asg, s.free_speed, area.lane_ids, dt=s.dt)
    measured = {vm.track_id: vm.delay for vm in agg.vehicles}
    assert truth.delay
    for tid, d in truth.delay.items():
        assert measured[tid] == pytest.approx(d, abs=3 * s.dt)


def test_undersaturated_queues_clear_each_cycle():
    s = SynthScenario(n_lanes=1, arrival_headway=8.0, horizon=600)
    _, _, truth = synth_generate(s)
    assert s.oversaturated == (False,)
    assert max(sv.slot for sv in truth.stopped) < 6
    assert truth.spillbacks == {}


def test_kinematics_continuity():
    kin = Kinematics([Segment(0.0, 0.0, 10.0, 0.0), Segment(2.0, 20.0, 10.0, -2.5), Segment(6.0, 40.0, 0.0, 0.0)])
    x, v, _ = kin.sample(np.array([0.0, 2.0, 4.0, 6.0, 9.0]))
    assert x.tolist() == pytest.approx([0.0, 20.0, 35.0, 40.0, 40.0])
    assert v.tolist() == pytest.approx([10.0, 10.0, 5.0, 0.0, 0.0])
    assert kin.time_at(35.0) == pytest.approx(4.0)


@settings(max_examples=25, deadline=None)
@given(st.floats(3.0, 12.0), st.floats(10.0, 40.0), st.integers(0, 1000))
def test_vehicles_never_reverse(headway, red, seed):
    s = SynthScenario(n_lanes=1, red=red, arrival_headway=headway, horizon=150, arrival_jitter=1.0, dt=0.5)
    ds, _, truth = synth_generate(s, seed=seed)
    for tr in ds.trajectories.values():
        assert np.all(tr.speed >= 0)
    for sv in truth.stopped:
        assert sv.t_depart >= sv.t_stop and not s.red_at(sv.t_depart)
