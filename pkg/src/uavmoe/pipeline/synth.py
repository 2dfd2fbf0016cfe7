"""Synthetic signalised-approach trajectories with analytic ground truth.

Each lane is a straight approach of length ``approach_length`` ending at the
stop line (the downstream edge). Vehicles arrive at the upstream edge at a
fixed headway (plus optional seeded jitter) at free speed. A vehicle stops if
its free-flow stop-line crossing falls in red, or if it would come to rest
behind the queue tail before that tail has had one saturation headway to move
off. Vehicles already discharging do not constrain followers, so a free vehicle
may close on (and pass through) one that is still accelerating away. Braking is at a constant rate to a slot one jam spacing behind the
vehicle ahead. Queued vehicles discharge at the saturation headway from green
start and accelerate at a constant rate back to free speed. Stopped vehicles
do not creep forward.

Positions refer to the vehicle's rear bumper: the head of the queue rests one
jam spacing behind the stop line. A queue of ``n`` stopped vehicles therefore
spans exactly ``n * jam_spacing`` from the downstream edge.

When the queue tail would rest within ``spill_eps`` of the upstream edge (or
beyond it), that vehicle is the spillback vehicle. Its rest position is kept
at least ``edge_margin`` inside the area, and the vehicles behind it queue
outside the area.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..geo import LanePolygon, StudyArea, unproject_arrays
from ..ingest import Dataset, Trajectory, VehicleType

QUEUE_SPEED = 1.2


@dataclass(frozen=True)
class SynthScenario:
    n_lanes: int = 2
    cycle: float = 60.0
    red: float = 30.0
    arrival_headway: float | tuple[float, ...] = 6.0  # s, scalar or one per lane
    saturation_headway: float = 2.0
    jam_spacing: float = 7.0
    approach_length: float = 100.0
    horizon: float = 240.0  # arrivals are generated on [0, horizon)
    red_offset: float = 20.0  # first red onset
    free_speed: float = 15.0  # m/s
    decel: float = 2.5  # m/s^2
    accel: float = 1.8  # m/s^2
    dt: float = 0.1
    arrival_jitter: float = 0.0  # s, uniform [0, jitter) added per arrival
    lane_offsets: tuple[float, ...] | None = None  # s, first arrival per lane
    lane_width: float = 3.5
    heading_deg: float = 20.0  # direction of travel, clockwise from north
    origin: tuple[float, float] = (37.9920, 23.7310)
    spill_eps: float = 5.0
    edge_margin: float = 0.5
    upstream_margin: float = 40.0
    downstream_margin: float = 30.0
    type_mix: tuple[tuple[str, float], ...] = (("Car", 1.0),)

    def __post_init__(self):
        if not 0 <= self.red < self.cycle:
            raise ValueError(f"need 0 <= red < cycle, got red={self.red}, cycle={self.cycle}")
        heads = self.headways()
        if any(h <= 0 for h in heads) or self.saturation_headway <= 0:
            raise ValueError("headways must be > 0")
        if self.n_lanes < 1 or self.approach_length <= 0 or self.jam_spacing <= 0:
            raise ValueError("need n_lanes >= 1, approach_length > 0 and jam_spacing > 0")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")

    def headways(self) -> tuple[float, ...]:
        h = self.arrival_headway
        if isinstance(h, (int, float)):
            return (float(h),) * self.n_lanes
        if len(h) != self.n_lanes:
            raise ValueError("arrival_headway needs one value per lane")
        return tuple(float(x) for x in h)

    @property
    def oversaturated(self) -> tuple[bool, ...]:
        """Per lane: arrival rate above the discharge capacity of the green."""
        green = self.cycle - self.red
        cap = green / self.saturation_headway / self.cycle
        return tuple(1.0 / h > cap for h in self.headways())

    def red_at(self, t: float) -> bool:
        if t < self.red_offset:
            return False
        # the tolerance keeps the exact start of green out of red
        return (t - self.red_offset) % self.cycle < self.red - 1e-9

    def green_start_after(self, t: float) -> float:
        """End of the red interval containing ``t`` (``t`` must be in red)."""
        k = math.floor((t - self.red_offset) / self.cycle)
        return self.red_offset + k * self.cycle + self.red

    def red_onsets(self, until: float) -> list[float]:
        out = []
        t = self.red_offset
        while t < until:
            out.append(t)
            t += self.cycle
        return out

    def slot_position(self, slot: int) -> float:
        """Rest position (distance from the upstream edge) of queue slot ``slot``."""
        L, s = self.approach_length, self.jam_spacing
        spill = self.spill_slot
        if slot < spill:
            return L - (slot + 1) * s
        return max(L - (spill + 1) * s, self.edge_margin) - (slot - spill) * s

    @property
    def spill_slot(self) -> int:
        """First slot whose rest position is within ``spill_eps`` of the upstream edge."""
        return max(0, math.ceil((self.approach_length - self.spill_eps) / self.jam_spacing - 1))


@dataclass(frozen=True)
class Segment:
    t0: float
    x0: float
    v0: float
    a: float

    def x(self, t):
        tau = t - self.t0
        return self.x0 + self.v0 * tau + 0.5 * self.a * tau**2

    def v(self, t):
        return self.v0 + self.a * (t - self.t0)


@dataclass
class Kinematics:
    """Piecewise constant-acceleration motion; segment i covers [t0_i, t0_{i+1})."""

    segments: list[Segment]

    def _index(self, t: np.ndarray) -> np.ndarray:
        starts = np.array([s.t0 for s in self.segments])
        return np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(starts) - 1)

    def sample(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = self._index(t)
        x = np.empty_like(t)
        v = np.empty_like(t)
        a = np.empty_like(t)
        for i, seg in enumerate(self.segments):
            m = idx == i
            x[m] = seg.x(t[m])
            v[m] = seg.v(t[m])
            a[m] = seg.a
        return x, np.clip(v, 0.0, None), a

    def time_at(self, pos: float) -> float:
        """First time the vehicle reaches ``pos`` (motion is monotone)."""
        for i, seg in enumerate(self.segments):
            end = self.segments[i + 1].t0 if i + 1 < len(self.segments) else math.inf
            x_end = seg.x(end) if math.isfinite(end) else math.inf
            if pos <= x_end + 1e-12:
                if seg.a == 0:
                    if seg.v0 == 0:
                        return seg.t0
                    return seg.t0 + (pos - seg.x0) / seg.v0
                disc = seg.v0**2 + 2 * seg.a * (pos - seg.x0)
                return seg.t0 + (-seg.v0 + math.sqrt(max(disc, 0.0))) / seg.a
        raise ValueError(f"position {pos} never reached")


@dataclass(frozen=True)
class StoppedVehicle:
    track_id: int
    lane: int
    slot: int
    position: float  # rest position, m from upstream edge
    t_stop: float
    t_depart: float
    t_queued: float  # instant the speed falls to the queue threshold


@dataclass
class GroundTruth:
    """Analytic truth; ``max_queue[lane] = (length_m, t)`` for queues observed in the area."""

    max_queue: dict[int, tuple[float, float]] = field(default_factory=dict)
    spillbacks: dict[int, list[float]] = field(default_factory=dict)
    red_onsets: list[float] = field(default_factory=list)
    green_onsets: list[float] = field(default_factory=list)
    queue_onsets: list[float] = field(default_factory=list)
    delay: dict[int, float] = field(default_factory=dict)  # in-area delay per vehicle, s
    stopped: list[StoppedVehicle] = field(default_factory=list)
    oversaturated: tuple[bool, ...] = ()

    def to_dict(self) -> dict:
        return {
            "max_queue": {str(k): list(v) for k, v in sorted(self.max_queue.items())},
            "spillbacks": {str(k): v for k, v in sorted(self.spillbacks.items())},
            "red_onsets": self.red_onsets,
            "green_onsets": self.green_onsets,
            "queue_onsets": self.queue_onsets,
            "delay": {str(k): v for k, v in sorted(self.delay.items())},
            "stopped": [asdict(s) for s in self.stopped],
            "oversaturated": list(self.oversaturated),
        }


def build_area(s: SynthScenario) -> StudyArea:
    theta = math.radians(s.heading_deg)
    e = np.array([math.sin(theta), math.cos(theta)])  # travel direction
    n = np.array([math.cos(theta), -math.sin(theta)])  # to the right of travel
    half = s.n_lanes * s.lane_width / 2
    lanes = []
    for lane in range(1, s.n_lanes + 1):
        left = -half + (lane - 1) * s.lane_width
        right = left + s.lane_width
        ring = [left * n, left * n + s.approach_length * e, right * n + s.approach_length * e, right * n]
        lanes.append(LanePolygon(lane, np.array(ring)))
    return StudyArea(
        name="synthetic approach",
        lanes=tuple(lanes),
        upstream_edge=np.array([-half * n, half * n]),
        downstream_edge=np.array([-half * n + s.approach_length * e, half * n + s.approach_length * e]),
        origin=s.origin,
        length=s.approach_length,
    )


def _lane_center(s: SynthScenario, lane: int) -> float:
    return -s.n_lanes * s.lane_width / 2 + (lane - 0.5) * s.lane_width


def place_on_lane(s: SynthScenario, lane: int, x, lateral=0.0) -> tuple[np.ndarray, np.ndarray]:
    """WGS84 coordinates of points ``x`` metres along ``lane`` (``lateral`` to the right of its centre)."""
    theta = math.radians(s.heading_deg)
    x = np.asarray(x, dtype=float)
    c = _lane_center(s, lane) + np.asarray(lateral, dtype=float)
    px = x * math.sin(theta) + c * math.cos(theta)
    py = x * math.cos(theta) - c * math.sin(theta)
    return unproject_arrays(px, py, s.origin)


def _snap_up(t: float, dt: float) -> float:
    return math.ceil(t / dt - 1e-9) * dt


def synth_generate(s: SynthScenario, seed: int = 0) -> tuple[Dataset, StudyArea, GroundTruth]:
    rng = np.random.default_rng(seed)
    area = build_area(s)
    L, v, b, acc, dt = s.approach_length, s.free_speed, s.decel, s.accel, s.dt
    truth = GroundTruth(oversaturated=s.oversaturated)
    labels, weights = zip(*s.type_mix)
    weights = np.array(weights, dtype=float) / sum(weights)
    offsets = s.lane_offsets or tuple(0.37 * (i) * h for i, h in enumerate(s.headways()))

    trajectories = []
    track_id = 0
    for lane, (h, off) in enumerate(zip(s.headways(), offsets), start=1):
        arrivals = np.arange(off, s.horizon, h)
        if s.arrival_jitter > 0:
            arrivals = arrivals + rng.uniform(0, s.arrival_jitter, size=arrivals.size)
        prev: StoppedVehicle | None = None
        prev_arrival = -math.inf
        for a_j in np.sort(arrivals):
            track_id += 1
            a_j = float(max(a_j, prev_arrival + 1e-3))
            prev_arrival = a_j
            stop: tuple[int, float] | None = None  # (slot, green-constrained departure)
            if prev is not None:
                slot = prev.slot + 1
                x_behind = s.slot_position(slot)
                if a_j + x_behind / v + v / (2 * b) < prev.t_depart + s.saturation_headway:
                    stop = (slot, prev.t_depart + s.saturation_headway)
            if stop is None and s.red_at(a_j + L / v):
                stop = (0, s.green_start_after(a_j + L / v))

            if stop is None:
                kin = Kinematics([Segment(a_j, 0.0, v, 0.0)])
                x_brake = 0.0
            else:
                slot, release = stop
                pos = s.slot_position(slot)
                t_stop = _snap_up(a_j + pos / v + v / (2 * b), dt)
                a_j = t_stop - pos / v - v / (2 * b)
                if s.red_at(release):
                    release = s.green_start_after(release)
                t_dep = max(release, t_stop)
                x_brake = pos - v * v / (2 * b)
                t_brake = t_stop - v / b
                kin = Kinematics(
                    [
                        Segment(a_j, 0.0, v, 0.0),
                        Segment(t_brake, x_brake, v, -b),
                        Segment(t_stop, pos, 0.0, 0.0),
                        Segment(t_dep, pos, 0.0, acc),
                        Segment(t_dep + v / acc, pos + v * v / (2 * acc), v, 0.0),
                    ]
                )
                sv = StoppedVehicle(track_id, lane, slot, pos, t_stop, t_dep, t_stop - QUEUE_SPEED / b)
                truth.stopped.append(sv)
                prev = sv

            x_start = min(-s.upstream_margin, x_brake - 5.0)
            t_start = _snap_up(kin.time_at(0.0) + x_start / v, dt)
            t_end = kin.time_at(L + s.downstream_margin)
            k0 = round(t_start / dt)
            k1 = math.floor(t_end / dt + 1e-9)
            t = np.round(np.arange(k0, k1 + 1) * dt, 9)
            t = t[t >= 0]
            if t.size == 0:
                continue
            x, speed, accel = kin.sample(t)
            lat, lon = place_on_lane(s, lane, x)
            label = labels[int(rng.choice(len(labels), p=weights))]
            trajectories.append(
                Trajectory(
                    track_id, VehicleType.from_label(label), 0.0, float(speed.mean()),
                    t, lat, lon, speed, accel, np.zeros_like(t), raw_type=label,
                )
            )
            t_in, t_out = kin.time_at(0.0), kin.time_at(L)
            if t_in >= t[0] and t_out <= t[-1]:
                truth.delay[track_id] = (t_out - t_in) - L / v

    _fill_queue_truth(s, truth, area)
    dataset = Dataset.from_trajectories(trajectories, sample_interval=dt)
    return dataset, area, truth


def _fill_queue_truth(s: SynthScenario, truth: GroundTruth, area: StudyArea) -> None:
    L = s.approach_length
    for lane in range(1, s.n_lanes + 1):
        inside = [sv for sv in truth.stopped if sv.lane == lane and sv.position >= 0]
        if inside:
            peak = max(L - sv.position for sv in inside)
            first = min((sv for sv in inside if L - sv.position >= peak - 1e-6), key=lambda sv: sv.t_queued)
            truth.max_queue[lane] = (peak, first.t_queued)
        events: list[float] = []
        for sv in sorted(inside, key=lambda sv: sv.t_queued):
            if sv.position <= s.spill_eps and (not events or sv.t_queued - events[-1] >= 10.0):
                events.append(sv.t_queued)
        if events:
            truth.spillbacks[lane] = events
    last_t = max((sv.t_depart for sv in truth.stopped), default=0.0)
    truth.red_onsets = s.red_onsets(max(s.horizon, last_t))
    truth.green_onsets = [r + s.red for r in truth.red_onsets]
    onsets = []
    for sv in sorted(truth.stopped, key=lambda sv: sv.t_queued):
        if sv.slot == 0:
            onsets.append(sv.t_queued)
    truth.queue_onsets = sorted(set(onsets))
