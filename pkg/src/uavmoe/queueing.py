"""Per-vehicle queued states, per-lane queue profiles, spillbacks and signal phases.

A vehicle is queued while its speed is at or below the pedestrian walking
speed (1.2 m/s).  The queue extent at an instant is measured back from the
downstream end of the area: ``length - min(distance of queued vehicles)``.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .geo import LaneAssignment, StudyArea
from .ingest import Trajectory

logger = logging.getLogger(__name__)

QUEUE_SPEED = 1.2
_TIME_DECIMALS = 6


def is_queued(speed: float, threshold: float = QUEUE_SPEED) -> bool:
    return speed <= threshold


@dataclass(frozen=True, eq=False)
class QueueInterval:
    """One maximal run of queued in-area samples of a single vehicle.

    ``t``/``x``/``lat``/``lon`` are the queued samples themselves; ``t_exit`` is
    the time of the first sample after the run.  ``at_entry`` is set when the
    run starts on the vehicle's first in-area sample.
    """

    track_id: int
    lane_id: int
    t_enter: float
    t_exit: float
    x_enter: float
    x_exit: float
    t: np.ndarray
    x: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    at_entry: bool = False

    @property
    def duration(self) -> float:
        return self.t_exit - self.t_enter


def extract_queue_intervals(
    traj: Trajectory,
    assignment: LaneAssignment,
    area: StudyArea,
    threshold: float = QUEUE_SPEED,
    min_queue_dwell: int = 2,
    dt: float | None = None,
) -> list[QueueInterval]:
    """Queued runs between the vehicle's area entry and exit records.

    Runs shorter than ``min_queue_dwell`` samples are dropped.  When a run lasts
    until the last sample, ``t_exit`` is one sample interval past it.
    """
    labels = assignment.labels
    lo, hi = assignment.entry_index, assignment.exit_index + 1
    queued = np.zeros(len(traj), dtype=bool)
    queued[lo:hi] = (labels[lo:hi] > 0) & (traj.speed[lo:hi] <= threshold)
    if dt is None:
        steps = np.diff(traj.t)
        dt = float(np.median(steps)) if steps.size else 1.0
    out = []
    edges = np.diff(np.concatenate([[0], queued.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    for start, stop in zip(starts, stops):
        if stop - start < min_queue_dwell:
            continue
        if stop < len(traj):
            t_exit = float(traj.t[stop])
            x_exit = float(assignment.distance[stop])
        else:
            t_exit = float(traj.t[stop - 1] + dt)
            x_exit = float(assignment.distance[stop - 1])
        sl = slice(start, stop)
        out.append(
            QueueInterval(
                track_id=traj.track_id,
                lane_id=int(labels[start]),
                t_enter=float(traj.t[start]),
                t_exit=t_exit,
                x_enter=float(assignment.distance[start]),
                x_exit=x_exit,
                t=np.array(traj.t[sl]),
                x=np.array(assignment.distance[sl]),
                lat=np.array(traj.lat[sl]),
                lon=np.array(traj.lon[sl]),
                at_entry=bool(start == assignment.entry_index),
            )
        )
    return out


@dataclass(frozen=True)
class Release:
    """A vehicle leaving the queued state."""

    t: float
    track_id: int
    head: bool  # it was the downstream-most queued vehicle just before leaving
    sustained: bool  # it did not re-enter a queue within the sustain window


@dataclass(frozen=True, eq=False)
class LaneQueueProfile:
    """Queue extent of one lane sampled at every queue-relevant instant.

    ``tail_*`` is the furthest-upstream queued vehicle, ``head_*`` the
    downstream-most one; both are NaN where nothing is queued.
    """

    lane_id: int
    t: np.ndarray
    extent: np.ndarray
    n_queued: np.ndarray
    tail_lat: np.ndarray
    tail_lon: np.ndarray
    head_lat: np.ndarray
    head_lon: np.ndarray
    releases: tuple[Release, ...] = ()
    head_gap: np.ndarray | None = None  # downstream-most queued vehicle to the stop line, m

    def __len__(self) -> int:
        return len(self.t)


def lane_queue_profile(
    intervals: Sequence[QueueInterval],
    area: StudyArea,
    lane_id: int | None = None,
    sustain_s: float = 5.0,
) -> LaneQueueProfile:
    """Merge one lane's queue intervals into an extent time series.

    The series is evaluated at every queued sample time and every ``t_exit``.
    A vehicle counts as queued on ``[t_enter, t_exit)`` and its position is held
    from its latest queued sample.
    """
    intervals = list(intervals)
    if lane_id is None:
        lanes = {iv.lane_id for iv in intervals}
        if len(lanes) > 1:
            raise ValueError(f"intervals span several lanes: {sorted(lanes)}")
        lane_id = lanes.pop() if lanes else 0
    if not intervals:
        empty = np.zeros(0)
        return LaneQueueProfile(
            lane_id, empty, empty, np.zeros(0, dtype=int), empty, empty, empty, empty, (), empty
        )

    times = np.unique(
        np.round(np.concatenate([iv.t for iv in intervals] + [[iv.t_exit for iv in intervals]]), _TIME_DECIMALS)
    )
    n = len(times)
    tail_x = np.full(n, np.inf)
    head_x = np.full(n, -np.inf)
    tail_idx = np.full((n, 2), -1)
    head_idx = np.full((n, 2), -1)
    count = np.zeros(n, dtype=int)
    for k, iv in enumerate(intervals):
        t_rounded = np.round(iv.t, _TIME_DECIMALS)
        a = np.searchsorted(times, round(iv.t_enter, _TIME_DECIMALS), side="left")
        b = np.searchsorted(times, round(iv.t_exit, _TIME_DECIMALS), side="left")
        if b <= a:
            continue
        window = times[a:b]
        j = np.searchsorted(t_rounded, window, side="right") - 1
        pos = iv.x[j]
        count[a:b] += 1
        better = pos < tail_x[a:b]
        tail_x[a:b][better] = pos[better]
        tail_idx[a:b][better] = np.column_stack([np.full(better.sum(), k), j[better]])
        ahead = pos > head_x[a:b]
        head_x[a:b][ahead] = pos[ahead]
        head_idx[a:b][ahead] = np.column_stack([np.full(ahead.sum(), k), j[ahead]])

    extent = np.where(count > 0, area.length - np.where(np.isfinite(tail_x), tail_x, area.length), 0.0)
    extent = np.clip(extent, 0.0, area.length)

    def coords(idx):
        lat = np.full(n, np.nan)
        lon = np.full(n, np.nan)
        for i in np.flatnonzero(idx[:, 0] >= 0):
            iv = intervals[idx[i, 0]]
            lat[i] = iv.lat[idx[i, 1]]
            lon[i] = iv.lon[idx[i, 1]]
        return lat, lon

    tail_lat, tail_lon = coords(tail_idx)
    head_lat, head_lon = coords(head_idx)

    releases = []
    by_track: dict[int, list[QueueInterval]] = {}
    for iv in intervals:
        by_track.setdefault(iv.track_id, []).append(iv)
    for k, iv in enumerate(intervals):
        i_last = np.searchsorted(times, round(iv.t_exit, _TIME_DECIMALS), side="left") - 1
        was_head = i_last >= 0 and head_idx[i_last, 0] == k
        again = any(
            other is not iv and iv.t_exit <= other.t_enter < iv.t_exit + sustain_s
            for other in by_track[iv.track_id]
        )
        releases.append(Release(iv.t_exit, iv.track_id, bool(was_head), not again))
    releases.sort(key=lambda r: (r.t, r.track_id))
    return LaneQueueProfile(
        lane_id, times, extent, count, tail_lat, tail_lon, head_lat, head_lon, tuple(releases),
        np.where(count > 0, area.length - head_x, np.nan),
    )


def lane_profiles(intervals: Iterable[QueueInterval], area: StudyArea) -> dict[int, LaneQueueProfile]:
    """Group intervals by lane and build one profile per lane of ``area``."""
    grouped: dict[int, list[QueueInterval]] = {lane: [] for lane in area.lane_ids}
    for iv in intervals:
        grouped.setdefault(iv.lane_id, []).append(iv)
    return {lane: lane_queue_profile(ivs, area, lane) for lane, ivs in sorted(grouped.items())}


@dataclass(frozen=True)
class QueueMax:
    lane_id: int
    length: float
    timestamp: float
    start_lat: float
    start_lon: float
    end_lat: float
    end_lon: float


def max_queue_length(profile: LaneQueueProfile, tie_tol: float = 1e-6) -> QueueMax | None:
    """Largest extent in ``profile``; extents within ``tie_tol`` metres of the
    maximum are ties and the earliest one is reported.  None when no queue.

    Start is the furthest-upstream queued vehicle, end the downstream-most one.
    """
    if len(profile) == 0 or not np.any(profile.extent > 0):
        return None
    peak = float(profile.extent.max())
    i = int(np.flatnonzero(profile.extent >= peak - tie_tol)[0])
    return QueueMax(
        lane_id=profile.lane_id,
        length=float(profile.extent[i]),
        timestamp=float(profile.t[i]),
        start_lat=float(profile.tail_lat[i]),
        start_lon=float(profile.tail_lon[i]),
        end_lat=float(profile.head_lat[i]),
        end_lon=float(profile.head_lon[i]),
    )


@dataclass(frozen=True)
class SpillbackEvent:
    lane_id: int
    t: float
    lat: float
    lon: float


def detect_spillbacks(
    intervals: Iterable[QueueInterval],
    area: StudyArea,
    spillback_eps: float = 5.0,
    dedup_s: float = 10.0,
) -> list[SpillbackEvent]:
    """Queue entries within ``spillback_eps`` metres of the upstream edge, or
    vehicles already queued on their first in-area sample.

    Within a lane, a candidate less than ``dedup_s`` after the last reported
    event is suppressed.
    """
    if spillback_eps <= 0:
        raise ValueError("spillback_eps must be > 0")
    candidates = sorted(
        (iv for iv in intervals if iv.x_enter <= spillback_eps or iv.at_entry),
        key=lambda iv: (iv.t_enter, iv.lane_id, iv.track_id),
    )
    last: dict[int, float] = {}
    events = []
    for iv in candidates:
        prev = last.get(iv.lane_id)
        if prev is not None and iv.t_enter - prev < dedup_s:
            continue
        last[iv.lane_id] = iv.t_enter
        events.append(SpillbackEvent(iv.lane_id, iv.t_enter, float(iv.lat[0]), float(iv.lon[0])))
    events.sort(key=lambda e: (e.lane_id, e.t))
    return events


@dataclass(frozen=True)
class SignalPhaseEstimate:
    red_onsets: list[float] = field(default_factory=list)
    green_onsets: list[float] = field(default_factory=list)
    confidence: str = ""


def infer_signal_phases(
    profiles: Iterable[LaneQueueProfile], threshold: float = 10.0, head_zone: float = 15.0
) -> SignalPhaseEstimate:
    """Estimate red and green onsets from queue build-up and release.

    Only queues anchored at the stop line count: the downstream-most queued
    vehicle must be within ``head_zone`` metres of it. Brief stops further
    upstream during discharge are ignored. Lanes are combined by taking the
    maximum anchored extent at each instant. An episode is a stretch where that
    aggregate is positive, and it counts only if it reaches ``threshold``
    metres. The red estimate is the episode's first queued instant. It lags the
    true onset by the approach and braking time of the first stopping vehicle.
    The green estimate is the first sustained release of a head-of-queue
    vehicle inside the episode.
    """
    profiles = [p for p in profiles if len(p)]
    if not profiles:
        return SignalPhaseEstimate(confidence="no queued vehicles")
    grid = np.unique(np.concatenate([p.t for p in profiles]))
    agg = np.zeros(len(grid))
    for p in profiles:
        extent = p.extent
        if p.head_gap is not None:
            extent = np.where(p.head_gap <= head_zone, extent, 0.0)
        j = np.searchsorted(p.t, grid, side="right") - 1
        vals = np.where(j >= 0, extent[np.clip(j, 0, None)], 0.0)
        agg = np.maximum(agg, vals)
    releases = sorted((r for p in profiles for r in p.releases if r.head and r.sustained), key=lambda r: r.t)

    reds: list[float] = []
    greens: list[float] = []
    positive = np.concatenate([[False], agg > 0, [False]])
    starts = np.flatnonzero(~positive[:-1] & positive[1:])
    stops = np.flatnonzero(positive[:-1] & ~positive[1:])
    n_unpaired = 0
    for a, b in zip(starts, stops):
        if agg[a:b].max() < threshold:
            continue
        t0 = float(grid[a])
        t_end = float(grid[b]) if b < len(grid) else float(grid[-1])
        if greens and t0 <= greens[-1]:
            continue
        green = next((r.t for r in releases if t0 < r.t <= t_end), None)
        if green is None:
            n_unpaired += 1
            continue
        reds.append(t0)
        greens.append(green)
    notes = [f"{len(reds)} cycles from {len(profiles)} lane profile(s)"]
    notes.append("red onsets lag the true onset by the first stopper's approach time")
    if n_unpaired:
        notes.append(f"{n_unpaired} queue episode(s) without a head release were dropped")
    if len(reds) < 2:
        notes.append("low confidence: fewer than two cycles observed")
    return SignalPhaseEstimate(reds, greens, "; ".join(notes))
