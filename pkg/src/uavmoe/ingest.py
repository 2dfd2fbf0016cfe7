"""Trajectory ingestion: pNEUMA wide files and a long-format CSV.

Everything is converted to SI on the way in (speeds km/h -> m/s), so the rest
of the package never sees km/h unless a formula asks for it explicitly.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TextIO

import numpy as np

from .errors import ParseError, ValidationError

logger = logging.getLogger(__name__)

KMH_PER_MS = 3.6
HEADER_FIELDS = 4
GROUP_FIELDS = 6
LONG_HEADER = ["track_id", "type", "t", "lat", "lon", "speed_kmh", "lon_acc", "lat_acc"]


class VehicleType(str, Enum):
    LIGHT_MEDIUM_DUTY = "LightMediumDuty"
    MOTORCYCLE = "Motorcycle"
    HEAVY_DUTY = "HeavyDuty"
    BUS = "Bus"
    TAXI = "Taxi"

    @property
    def category(self) -> VehicleType:
        """Reporting class; taxis are reported with light/medium-duty vehicles."""
        if self is VehicleType.TAXI:
            return VehicleType.LIGHT_MEDIUM_DUTY
        return self

    @classmethod
    def from_label(cls, label: str) -> VehicleType:
        key = " ".join(label.strip().lower().split())
        try:
            return _TYPE_ALIASES[key]
        except KeyError:
            raise ValueError(f"unknown vehicle type {label!r}") from None


REPORT_CATEGORIES = (
    VehicleType.LIGHT_MEDIUM_DUTY,
    VehicleType.MOTORCYCLE,
    VehicleType.HEAVY_DUTY,
    VehicleType.BUS,
)

_TYPE_ALIASES = {
    "car": VehicleType.LIGHT_MEDIUM_DUTY,
    "medium vehicle": VehicleType.LIGHT_MEDIUM_DUTY,
    "lightmediumduty": VehicleType.LIGHT_MEDIUM_DUTY,
    "light vehicle": VehicleType.LIGHT_MEDIUM_DUTY,
    "taxi": VehicleType.TAXI,
    "motorcycle": VehicleType.MOTORCYCLE,
    "heavy vehicle": VehicleType.HEAVY_DUTY,
    "heavyduty": VehicleType.HEAVY_DUTY,
    "bus": VehicleType.BUS,
}


@dataclass(frozen=True)
class TrajectoryPoint:
    t: float
    lat: float
    lon: float
    speed: float
    lon_acc: float
    lat_acc: float


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One vehicle's record, stored column-wise.

    ``raw_type`` keeps the label found in the source file so that a dataset
    can be written back unchanged; ``vehicle_type`` is the parsed enum.
    Timestamps are expected to be strictly increasing but this is not
    enforced here; :func:`validate_dataset` reports violations.
    """

    track_id: int
    vehicle_type: VehicleType
    traveled_d: float
    avg_speed: float
    t: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    speed: np.ndarray
    lon_acc: np.ndarray
    lat_acc: np.ndarray
    raw_type: str = ""

    def __post_init__(self):
        for name in ("t", "lat", "lon", "speed", "lon_acc", "lat_acc"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        n = len(self.t)
        if n == 0:
            raise ValidationError(f"trajectory {self.track_id} has no points")
        if any(len(getattr(self, k)) != n for k in ("lat", "lon", "speed", "lon_acc", "lat_acc")):
            raise ValidationError(f"trajectory {self.track_id} has ragged columns")
        if not self.raw_type:
            object.__setattr__(self, "raw_type", self.vehicle_type.value)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def category(self) -> VehicleType:
        return self.vehicle_type.category

    @property
    def points(self) -> list[TrajectoryPoint]:
        return [
            TrajectoryPoint(*map(float, row))
            for row in zip(self.t, self.lat, self.lon, self.speed, self.lon_acc, self.lat_acc)
        ]

    def same_as(self, other: Trajectory, tol: float = 1e-9) -> bool:
        if (self.track_id, self.vehicle_type, self.raw_type, len(self)) != (
            other.track_id,
            other.vehicle_type,
            other.raw_type,
            len(other),
        ):
            return False
        pairs = [(self.traveled_d, other.traveled_d), (self.avg_speed, other.avg_speed)]
        if any(abs(a - b) > tol for a, b in pairs):
            return False
        return all(
            np.allclose(getattr(self, k), getattr(other, k), rtol=0, atol=tol)
            for k in ("t", "lat", "lon", "speed", "lon_acc", "lat_acc")
        )


@dataclass(frozen=True)
class Extent:
    min_lat: float
    min_lon: float
    max_lat: float
    max_lon: float


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: Mapping[int, Trajectory]
    sample_interval: float
    extent: Extent | None = None

    def __post_init__(self):
        if not self.sample_interval > 0:
            raise ValidationError(f"sample_interval must be > 0, got {self.sample_interval}")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories.values())

    def __getitem__(self, track_id: int) -> Trajectory:
        return self.trajectories[track_id]

    @classmethod
    def from_trajectories(
        cls, trajectories: Iterable[Trajectory], sample_interval: float | None = None
    ) -> Dataset:
        by_id: dict[int, Trajectory] = {}
        for traj in trajectories:
            if traj.track_id in by_id:
                raise ValidationError(f"duplicate track_id {traj.track_id}")
            by_id[traj.track_id] = traj
        if sample_interval is None:
            sample_interval = infer_sample_interval(by_id.values())
        return cls(by_id, sample_interval, _extent(by_id.values()))

    def same_as(self, other: Dataset, tol: float = 1e-9) -> bool:
        if list(self.trajectories) != list(other.trajectories):
            return False
        if abs(self.sample_interval - other.sample_interval) > tol:
            return False
        return all(a.same_as(other[k], tol) for k, a in self.trajectories.items())


def infer_sample_interval(trajectories: Iterable[Trajectory], default: float = 1.0) -> float:
    """Modal positive time step across all trajectories (smallest mode wins ties).

    Falls back to ``default`` when no trajectory has two points.
    """
    diffs = [np.diff(tr.t) for tr in trajectories if len(tr) > 1]
    if not diffs:
        return default
    d = np.concatenate(diffs)
    d = d[np.isfinite(d) & (d > 0)]
    if d.size == 0:
        return default
    values, counts = np.unique(np.round(d, 6), return_counts=True)
    return float(values[np.argmax(counts)])


def _extent(trajectories: Iterable[Trajectory]) -> Extent | None:
    trajs = list(trajectories)
    if not trajs:
        return None
    lats = np.concatenate([tr.lat for tr in trajs])
    lons = np.concatenate([tr.lon for tr in trajs])
    return Extent(float(lats.min()), float(lons.min()), float(lats.max()), float(lons.max()))


def _number(text: str, line: int, what: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"non-numeric {what}: {text!r}", line) from None
    return value


def _check_point(t, lat, lon, speed, line: int) -> None:
    if not (math.isfinite(t) and t >= 0):
        raise ParseError(f"time must be finite and >= 0, got {t}", line)
    if not (math.isfinite(speed) and speed >= 0):
        raise ParseError(f"speed must be finite and >= 0, got {speed}", line)
    if not (abs(lat) <= 90 and abs(lon) <= 180):
        raise ParseError(f"coordinates out of range: ({lat}, {lon})", line)


def _parse_track_id(text: str, line: int) -> int:
    try:
        return int(text)
    except ValueError:
        value = _number(text, line, "track_id")
        if not value.is_integer():
            raise ParseError(f"track_id must be an integer, got {text!r}", line) from None
        return int(value)


def _vehicle_type(label: str, line: int) -> VehicleType:
    try:
        return VehicleType.from_label(label)
    except ValueError as exc:
        raise ParseError(str(exc), line) from None


def parse_pneuma_wide(stream: TextIO | Iterable[str]) -> Dataset:
    """Parse a semicolon-delimited pNEUMA file.

    Each data row is ``track_id; type; traveled_d; avg_speed;`` followed by
    repeating ``lat; lon; speed; lon_acc; lat_acc; time;`` groups.  Speeds
    (including ``avg_speed``) are km/h in the file.  A header row whose first
    field is not an integer is skipped.
    """
    trajectories: dict[int, Trajectory] = {}
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(";")]
        while fields and fields[-1] == "":
            fields.pop()
        if lineno == 1 and fields and fields[0].lower() == "track_id":
            continue
        if len(fields) < HEADER_FIELDS + GROUP_FIELDS:
            raise ParseError(f"row has {len(fields)} fields, needs at least one point group", lineno)
        if (len(fields) - HEADER_FIELDS) % GROUP_FIELDS:
            raise ParseError(
                f"row has {len(fields)} fields; expected 4 + 6k "
                f"({(len(fields) - HEADER_FIELDS) % GROUP_FIELDS} trailing fields)",
                lineno,
            )
        track_id = _parse_track_id(fields[0], lineno)
        vtype = _vehicle_type(fields[1], lineno)
        traveled_d = _number(fields[2], lineno, "traveled_d")
        avg_speed = _number(fields[3], lineno, "avg_speed") / KMH_PER_MS
        values = np.array(
            [_number(f, lineno, "point field") for f in fields[HEADER_FIELDS:]], dtype=float
        ).reshape(-1, GROUP_FIELDS)
        lat, lon, speed_kmh, lon_acc, lat_acc, t = values.T
        speed = speed_kmh / KMH_PER_MS
        for i in range(len(t)):
            _check_point(t[i], lat[i], lon[i], speed[i], lineno)
        if track_id in trajectories:
            raise ValidationError(f"line {lineno}: duplicate track_id {track_id}")
        trajectories[track_id] = Trajectory(
            track_id, vtype, traveled_d, avg_speed, t, lat, lon, speed, lon_acc, lat_acc,
            raw_type=fields[1],
        )
    logger.debug("parsed %d trajectories", len(trajectories))
    return Dataset.from_trajectories(trajectories.values())


def parse_long_csv(stream: TextIO | Iterable[str]) -> Dataset:
    """Parse the one-point-per-row CSV (header ``track_id,type,t,lat,lon,speed_kmh,lon_acc,lat_acc``).

    ``traveled_d`` is not carried by this format and is set to 0; ``avg_speed``
    is the mean point speed.
    """
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None:
        return Dataset({}, 1.0)
    if [h.strip() for h in header] != LONG_HEADER:
        raise ParseError(f"unexpected header {header}", 1)
    rows: dict[int, list] = {}
    types: dict[int, str] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(LONG_HEADER):
            raise ParseError(f"expected {len(LONG_HEADER)} fields, got {len(row)}", lineno)
        track_id = _parse_track_id(row[0], lineno)
        label = row[1].strip()
        _vehicle_type(label, lineno)
        if types.setdefault(track_id, label) != label:
            raise ValidationError(f"line {lineno}: track {track_id} changes type")
        t, lat, lon, speed_kmh, lon_acc, lat_acc = (
            _number(v, lineno, name) for v, name in zip(row[2:], LONG_HEADER[2:])
        )
        _check_point(t, lat, lon, speed_kmh / KMH_PER_MS, lineno)
        rows.setdefault(track_id, []).append((t, lat, lon, speed_kmh / KMH_PER_MS, lon_acc, lat_acc))
    trajectories = []
    for track_id, pts in rows.items():
        t, lat, lon, speed, lon_acc, lat_acc = np.array(pts, dtype=float).T
        trajectories.append(
            Trajectory(
                track_id, VehicleType.from_label(types[track_id]), 0.0, float(speed.mean()),
                t, lat, lon, speed, lon_acc, lat_acc, raw_type=types[track_id],
            )
        )
    return Dataset.from_trajectories(trajectories)


def write_pneuma_wide(dataset: Dataset, stream: TextIO) -> None:
    """Inverse of :func:`parse_pneuma_wide`; floats are written with ``repr``."""
    stream.write("track_id; type; traveled_d; avg_speed; lat; lon; speed; lon_acc; lat_acc; time\n")
    for tr in dataset:
        parts = [str(tr.track_id), tr.raw_type, repr(float(tr.traveled_d)), repr(float(tr.avg_speed * KMH_PER_MS))]
        for i in range(len(tr)):
            parts.extend(
                repr(float(v))
                for v in (tr.lat[i], tr.lon[i], tr.speed[i] * KMH_PER_MS, tr.lon_acc[i], tr.lat_acc[i], tr.t[i])
            )
        stream.write("; ".join(parts) + ";\n")


def write_long_csv(dataset: Dataset, stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(LONG_HEADER)
    for tr in dataset:
        for i in range(len(tr)):
            writer.writerow(
                [tr.track_id, tr.raw_type]
                + [repr(float(v)) for v in (tr.t[i], tr.lat[i], tr.lon[i], tr.speed[i] * KMH_PER_MS, tr.lon_acc[i], tr.lat_acc[i])]
            )


def read_dataset(path: str | Path) -> Dataset:
    """Open ``path`` and dispatch on its first line: long CSV header or pNEUMA wide."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        fh.seek(0)
        if first.strip().replace(" ", "").startswith(",".join(LONG_HEADER[:3])):
            return parse_long_csv(fh)
        return parse_pneuma_wide(fh)


def loads(text: str) -> Dataset:
    return parse_pneuma_wide(io.StringIO(text))


# --- validation -----------------------------------------------------------------


@dataclass(frozen=True)
class Finding:
    track_id: int
    kind: str  # "non_monotone_time" | "speed_ceiling" | "gap"
    index: int
    detail: str


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.findings)

    def __bool__(self) -> bool:
        return bool(self.findings)

    def of_kind(self, kind: str) -> list[Finding]:
        return [f for f in self.findings if f.kind == kind]


def validate_dataset(
    dataset: Dataset, speed_ceiling: float = 60.0, gap_factor: float = 3.0
) -> ValidationReport:
    """Report non-monotone timestamps, speeds above ``speed_ceiling`` (m/s) and
    gaps longer than ``gap_factor`` sample intervals. Never mutates ``dataset``."""
    report = ValidationReport()
    max_gap = gap_factor * dataset.sample_interval
    for tr in dataset:
        dt = np.diff(tr.t)
        for i in np.flatnonzero(dt <= 0):
            report.findings.append(
                Finding(tr.track_id, "non_monotone_time", int(i + 1), f"t[{i + 1}]={tr.t[i + 1]} <= t[{i}]={tr.t[i]}")
            )
        for i in np.flatnonzero(dt > max_gap):
            report.findings.append(Finding(tr.track_id, "gap", int(i + 1), f"gap of {dt[i]:.3f} s"))
        for i in np.flatnonzero(tr.speed > speed_ceiling):
            report.findings.append(
                Finding(tr.track_id, "speed_ceiling", int(i), f"speed {tr.speed[i]:.2f} m/s > {speed_ceiling}")
            )
    return report
