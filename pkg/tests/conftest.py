import numpy as np
import pytest

from uavmoe.ingest import Dataset, Trajectory, VehicleType
from uavmoe.pipeline.synth import SynthScenario, build_area, place_on_lane


def lane_trajectory(scenario, track_id, lane, x, speed, t=None, dt=1.0, vtype="Car", lateral=0.0, lon_acc=None):
    """Trajectory along the centre of ``lane`` of ``scenario``'s straight approach."""
    x = np.asarray(x, dtype=float)
    speed = np.broadcast_to(np.asarray(speed, dtype=float), x.shape).copy()
    t = np.arange(len(x)) * dt if t is None else np.asarray(t, dtype=float)
    lat, lon = place_on_lane(scenario, lane, x, lateral)
    acc = np.zeros_like(x) if lon_acc is None else np.asarray(lon_acc, dtype=float)
    return Trajectory(
        track_id, VehicleType.from_label(vtype), 0.0, float(speed.mean()) if len(speed) else 0.0,
        t, lat, lon, speed, acc, np.zeros_like(x), raw_type=vtype,
    )


@pytest.fixture
def approach():
    """Three-lane, 300 m straight approach heading north-east."""
    s = SynthScenario(n_lanes=3, approach_length=300.0, heading_deg=30.0)
    return s, build_area(s)


@pytest.fixture
def make_dataset():
    def make(trajs, dt=1.0):
        return Dataset.from_trajectories(trajs, sample_interval=dt)

    return make


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
