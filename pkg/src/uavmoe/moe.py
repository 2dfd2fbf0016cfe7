"""Travel time, link counts, stops, delay and crash rates."""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, ConsistencyError, DomainError
from .geo import LaneAssignment
from .ingest import REPORT_CATEGORIES, Dataset, Trajectory, VehicleType

DEFAULT_MOVEMENTS: dict[str, tuple[int, ...]] = {"LeftTurn": (1, 2), "Through": (3, 4, 5)}


@dataclass(frozen=True)
class TimeCard:
    track_id: int
    group: int | str  # lane id or movement name
    t_entry: float
    t_exit: float


def travel_time(card: TimeCard) -> float:
    if card.t_exit < card.t_entry:
        raise ConsistencyError(f"track {card.track_id}: exit {card.t_exit} before entry {card.t_entry}")
    return card.t_exit - card.t_entry


def time_card(traj: Trajectory, assignment: LaneAssignment, group: int | str = 0) -> TimeCard:
    """Card stamped at the first and last in-area record."""
    return TimeCard(
        traj.track_id, group, float(traj.t[assignment.entry_index]), float(traj.t[assignment.exit_index])
    )


@dataclass(frozen=True, eq=False)
class LinkCountSeries:
    """``n[k] = n[k-1] + u[k]`` on the grid ``t[k] = k * dt``.

    ``u[k]`` counts entries minus exits stamped in ``[t[k] - dt, t[k])``.
    """

    t: np.ndarray
    n: np.ndarray
    u: np.ndarray
    dt: float


def link_count_series(cards: Sequence[TimeCard], dt: float) -> LinkCountSeries:
    if not dt > 0:
        raise DomainError(f"dt must be > 0, got {dt}")
    if not cards:
        return LinkCountSeries(np.zeros(1), np.zeros(1, dtype=int), np.zeros(1, dtype=int), dt)
    last = max(max(c.t_entry, c.t_exit) for c in cards)
    first = min(min(c.t_entry, c.t_exit) for c in cards)
    if first < 0:
        raise DomainError("time cards must have non-negative timestamps")
    k_max = int(math.floor(last / dt + 1e-9)) + 2
    t = np.arange(k_max + 1) * dt
    u = np.zeros(k_max + 1, dtype=int)
    entries_by_bin: dict[int, list[int]] = {}
    exits_by_bin: dict[int, list[int]] = {}
    for c in cards:
        k_in = int(math.floor(c.t_entry / dt + 1e-9)) + 1
        k_out = int(math.floor(c.t_exit / dt + 1e-9)) + 1
        u[k_in] += 1
        u[k_out] -= 1
        entries_by_bin.setdefault(k_in, []).append(c.track_id)
        exits_by_bin.setdefault(k_out, []).append(c.track_id)
    n = np.cumsum(u)
    if np.any(n < 0):
        k = int(np.flatnonzero(n < 0)[0])
        culprits = [c.track_id for c in cards if c.t_exit < c.t_entry] or exits_by_bin.get(k, [])
        raise ConsistencyError(f"negative vehicle count at t={t[k]:.3f}: exit without entry for track(s) {culprits}")
    bad = [c.track_id for c in cards if c.t_exit < c.t_entry]
    if bad:
        raise ConsistencyError(f"exit before entry for track(s) {bad}")
    return LinkCountSeries(t, n, u, dt)


def partial_stops_from_speeds(speeds, u_f: float) -> float:
    """Sum of speed drops divided by ``u_f``; accelerations contribute nothing."""
    if not u_f > 0:
        raise DomainError(f"free-flow speed must be > 0, got {u_f}")
    u = np.asarray(speeds, dtype=float)
    if u.size < 2:
        return 0.0
    drops = u[:-1] - u[1:]
    return float(np.sum(drops[drops > 0]) / u_f)


def partial_stops(traj: Trajectory, u_f: float, mask: np.ndarray | None = None) -> float:
    speeds = traj.speed if mask is None else traj.speed[mask]
    return partial_stops_from_speeds(speeds, u_f)


def delay_from_speeds(speeds, u_f: float, dt: float) -> float:
    """Sum of ``dt * (1 - u / u_f)`` with each term floored at zero."""
    if not u_f > 0:
        raise DomainError(f"free-flow speed must be > 0, got {u_f}")
    if not dt > 0:
        raise DomainError(f"dt must be > 0, got {dt}")
    u = np.asarray(speeds, dtype=float)
    return float(np.sum(dt * np.maximum(0.0, 1.0 - u / u_f)))


def total_delay(traj: Trajectory, u_f: float, dt: float, mask: np.ndarray | None = None) -> float:
    speeds = traj.speed if mask is None else traj.speed[mask]
    return delay_from_speeds(speeds, u_f, dt)


# --- crash rates ------------------------------------------------------------------


class CrashType(str, Enum):
    SINGLE_RIGHT_ROADSIDE = "Single Driver - Right Roadside Departure"
    SINGLE_LEFT_ROADSIDE = "Single Driver - Left Roadside Departure"
    SINGLE_FORWARD_IMPACT = "Single Driver - Forward Impact"
    SAME_DIR_REAR_END = "Same Traffic Way and Same Direction - Rear-End"
    SAME_DIR_FORWARD_IMPACT = "Same Traffic Way and Same Direction - Forward Impact"
    SAME_DIR_SIDESWIPE = "Same Traffic Way and Same Direction - Sideswipe/Angle"
    OPP_DIR_HEAD_ON = "Same Traffic Way and Opposite Direction - Head-On"
    OPP_DIR_FORWARD_IMPACT = "Same Traffic Way and Opposite Direction - Forward Impact"
    OPP_DIR_SIDESWIPE = "Same Traffic Way and Opposite Direction - Sideswipe/Angle"
    TURN_ACROSS_PATH = "Change Traffic Way and Vehicle Turning - Turn Across Path"
    TURN_INTO_PATH = "Change Traffic Way and Vehicle Turning - Turn Input Path"
    PERPENDICULAR = "Intersecting Paths - Perpendicular Crash"
    BACKING = "Backing Vehicle"
    OTHER = "Other or Unknown"


@dataclass(frozen=True)
class CrashCoefficient:
    crash_type: CrashType
    a1: float  # h/km
    a2: float


@dataclass(frozen=True)
class CrashCoefficientTable:
    rows: tuple[CrashCoefficient, ...]

    def __post_init__(self):
        types = [r.crash_type for r in self.rows]
        missing = [t.value for t in CrashType if t not in types]
        if missing:
            raise ConfigError(f"crash coefficient table is missing: {missing}")
        if len(types) != len(set(types)) or len(types) != len(CrashType):
            raise ConfigError("crash coefficient table needs exactly one row per crash type")
        order = list(CrashType)
        object.__setattr__(self, "rows", tuple(sorted(self.rows, key=lambda r: order.index(r.crash_type))))

    @classmethod
    def from_records(cls, records: Iterable[Mapping]) -> CrashCoefficientTable:
        rows = []
        for rec in records:
            try:
                ctype = CrashType(_normalise_dash(rec["type"]))
                rows.append(CrashCoefficient(ctype, float(rec["a1"]), float(rec["a2"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise ConfigError(f"bad crash coefficient record {rec!r}: {exc}") from None
        return cls(tuple(rows))

    @classmethod
    def load(cls, path: str | Path | None = None) -> CrashCoefficientTable:
        """Read a JSON array of ``{type, a1, a2}``; None loads the bundled sample."""
        try:
            if path is None:
                text = resources.files("uavmoe.data").joinpath("crash_coefficients.json").read_text("utf-8")
            else:
                text = Path(path).read_text(encoding="utf-8")
            records = json.loads(text)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load crash coefficients from {path}: {exc}") from None
        return cls.from_records(records)


def _normalise_dash(text: str) -> str:
    return text.replace("\u2013", "-").replace("\u2014", "-")


@dataclass(frozen=True)
class CrashRates:
    per_type: dict[CrashType, float]
    total: float
    u_f: float  # km/h

    def time_based(self) -> dict[CrashType, float]:
        """Distance-based rate scaled by the facility free speed."""
        return {k: v * self.u_f for k, v in self.per_type.items()}


def crash_rates(u_f: float, coeffs: CrashCoefficientTable) -> CrashRates:
    """``rate_i = exp(a1_i * u_f + a2_i)`` per crash type; ``u_f`` in km/h."""
    if u_f < 0:
        raise DomainError(f"u_f must be >= 0, got {u_f}")
    per_type = {r.crash_type: math.exp(r.a1 * u_f + r.a2) for r in coeffs.rows}
    return CrashRates(per_type, math.fsum(per_type.values()), u_f)


# --- aggregation ------------------------------------------------------------------


@dataclass(frozen=True)
class VehicleMoe:
    track_id: int
    category: VehicleType
    lanes: tuple[int, ...]
    travel_time: float
    stops: float
    delay: float


def vehicle_moe(traj: Trajectory, assignment: LaneAssignment, u_f: float, dt: float) -> VehicleMoe:
    """Whole-trip MOEs over the in-area samples between entry and exit."""
    mask = np.zeros(len(traj), dtype=bool)
    mask[assignment.entry_index : assignment.exit_index + 1] = True
    mask &= assignment.labels > 0
    return VehicleMoe(
        track_id=traj.track_id,
        category=traj.category,
        lanes=tuple(assignment.visited_lanes()),
        travel_time=travel_time(time_card(traj, assignment)),
        stops=partial_stops(traj, u_f, mask),
        delay=total_delay(traj, u_f, dt, mask),
    )


@dataclass
class GroupStats:
    count: int = 0
    travel_time_sum: float = 0.0
    stops_sum: float = 0.0
    delay_sum: float = 0.0

    def add(self, m: VehicleMoe) -> None:
        self.count += 1
        self.travel_time_sum += m.travel_time
        self.stops_sum += m.stops
        self.delay_sum += m.delay

    def merge(self, other: GroupStats) -> None:
        self.count += other.count
        self.travel_time_sum += other.travel_time_sum
        self.stops_sum += other.stops_sum
        self.delay_sum += other.delay_sum

    def mean(self, metric: str) -> float | None:
        if self.count == 0:
            return None
        return getattr(self, f"{metric}_sum") / self.count


@dataclass
class MoeAggregate:
    """Per (lane | movement) x vehicle category statistics.

    A vehicle contributes its whole-trip values once to every lane it visited.
    A movement pools the lane entries of its lanes, so movement means equal the
    count-weighted lane means. Category ``None`` is the all-vehicle total.
    """

    lanes: dict[int, dict[VehicleType | None, GroupStats]] = field(default_factory=dict)
    movements: dict[str, dict[VehicleType | None, GroupStats]] = field(default_factory=dict)
    vehicles: list[VehicleMoe] = field(default_factory=list)

    def lane_stat(self, lane: int, category: VehicleType | None = None) -> GroupStats:
        return self.lanes.get(lane, {}).get(category, GroupStats())

    def movement_stat(self, movement: str, category: VehicleType | None = None) -> GroupStats:
        return self.movements.get(movement, {}).get(category, GroupStats())


def aggregate_moes(
    dataset: Dataset,
    assignments: Iterable[LaneAssignment],
    u_f: float,
    lane_ids: Sequence[int] | None = None,
    movements: Mapping[str, Sequence[int]] | None = None,
    dt: float | None = None,
) -> MoeAggregate:
    movements = DEFAULT_MOVEMENTS if movements is None else movements
    dt = dataset.sample_interval if dt is None else dt
    agg = MoeAggregate()
    cats: list[VehicleType | None] = [*REPORT_CATEGORIES, None]
    for lane in lane_ids or []:
        agg.lanes[lane] = {c: GroupStats() for c in cats}
    for a in assignments:
        m = vehicle_moe(dataset[a.track_id], a, u_f, dt)
        agg.vehicles.append(m)
        for lane in m.lanes:
            bucket = agg.lanes.setdefault(lane, {c: GroupStats() for c in cats})
            bucket[m.category].add(m)
            bucket[None].add(m)
    for name, lanes in movements.items():
        bucket = {c: GroupStats() for c in cats}
        for lane in lanes:
            for c, stats in agg.lanes.get(lane, {}).items():
                bucket[c].merge(stats)
        agg.movements[name] = bucket
    return agg


def free_flow_speed(
    dataset: Dataset,
    assignments: Iterable[LaneAssignment],
    source: str = "speed-limit",
    speed_limit: float = 55.0 / 3.6,
    percentile: float = 95.0,
) -> float:
    """Reference speed in m/s: the posted limit or a percentile of in-area speeds."""
    if source == "speed-limit":
        return speed_limit
    if source != "p95":
        raise ConfigError(f"unknown free-speed source {source!r}")
    speeds = [dataset[a.track_id].speed[a.labels > 0] for a in assignments]
    speeds = [s for s in speeds if s.size]
    if not speeds:
        return speed_limit
    value = float(np.percentile(np.concatenate(speeds), percentile))
    return value if value > 0 else speed_limit
