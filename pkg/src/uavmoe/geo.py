"""Local projection, lane polygons and per-point lane assignment."""

from __future__ import annotations

import json
import math
import re
import xml.etree.ElementTree as ET
from collections import Counter
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from typing import NamedTuple, TextIO

import numpy as np

from .errors import ConfigError, DomainError, GeometryError
from .ingest import Dataset, Trajectory, VehicleType

EARTH_RADIUS_M = 6_371_000.0
MAX_OFFSET_DEG = 0.1
DEFAULT_SPEED_LIMIT = 55.0 / 3.6
_EDGE_TOL = 1e-9


class LocalPoint(NamedTuple):
    x: float
    y: float


def project(lat: float, lon: float, origin: tuple[float, float]) -> LocalPoint:
    """Equirectangular projection around ``origin`` (lat, lon); x east, y north, metres."""
    x, y = project_arrays(np.asarray([lat]), np.asarray([lon]), origin)
    return LocalPoint(float(x[0]), float(y[0]))


def project_arrays(lat, lon, origin: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    dlat = lat - origin[0]
    dlon = lon - origin[1]
    if lat.size and (
        not np.all(np.isfinite(dlat) & np.isfinite(dlon))
        or np.max(np.abs(dlat)) >= MAX_OFFSET_DEG
        or np.max(np.abs(dlon)) >= MAX_OFFSET_DEG
    ):
        raise DomainError(f"coordinates farther than {MAX_OFFSET_DEG} deg from projection origin {origin}")
    x = EARTH_RADIUS_M * math.cos(math.radians(origin[0])) * np.radians(dlon)
    y = EARTH_RADIUS_M * np.radians(dlat)
    return x, y


def unproject_arrays(x, y, origin: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lat = origin[0] + np.degrees(y / EARTH_RADIUS_M)
    lon = origin[1] + np.degrees(x / (EARTH_RADIUS_M * math.cos(math.radians(origin[0]))))
    return lat, lon


def unproject(p: LocalPoint, origin: tuple[float, float]) -> tuple[float, float]:
    lat, lon = unproject_arrays([p[0]], [p[1]], origin)
    return float(lat[0]), float(lon[0])


# --- polygons ---------------------------------------------------------------------


def _signed_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return d1 * d2 < 0 and d3 * d4 < 0


def _self_intersects(ring: np.ndarray) -> bool:
    n = len(ring)
    for i in range(n):
        a, b = ring[i], ring[(i + 1) % n]
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(a, b, ring[j], ring[(j + 1) % n]):
                return True
    return False


@dataclass(frozen=True, eq=False)
class LanePolygon:
    """A lane sub-polygon in local metres; lane 1 is the leftmost lane."""

    lane_id: int
    ring: np.ndarray

    def __post_init__(self):
        ring = np.asarray(self.ring, dtype=float).reshape(-1, 2)
        if len(ring) > 1 and np.allclose(ring[0], ring[-1]):
            ring = ring[:-1]
        distinct = {tuple(np.round(v, 9)) for v in ring}
        if len(distinct) < 3:
            raise GeometryError(f"lane {self.lane_id}: ring needs >= 3 distinct vertices, got {len(distinct)}")
        if abs(_signed_area(ring)) <= 1e-12:
            raise GeometryError(f"lane {self.lane_id}: ring has zero area")
        if _self_intersects(ring):
            raise GeometryError(f"lane {self.lane_id}: ring is self-intersecting")
        if self.lane_id < 1:
            raise GeometryError(f"lane ids start at 1, got {self.lane_id}")
        ring.setflags(write=False)
        object.__setattr__(self, "ring", ring)

    def contains(self, x, y) -> np.ndarray:
        return points_in_ring(x, y, self.ring)


def points_in_ring(x, y, ring: np.ndarray) -> np.ndarray:
    """Vectorised even-odd ray casting; points on an edge count as inside."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    inside = np.zeros(x.shape, dtype=bool)
    on_edge = np.zeros(x.shape, dtype=bool)
    n = len(ring)
    for i in range(n):
        x1, y1 = ring[i]
        x2, y2 = ring[(i + 1) % n]
        cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
        seg_len = math.hypot(x2 - x1, y2 - y1)
        within = (
            (np.minimum(x1, x2) - _EDGE_TOL <= x)
            & (x <= np.maximum(x1, x2) + _EDGE_TOL)
            & (np.minimum(y1, y2) - _EDGE_TOL <= y)
            & (y <= np.maximum(y1, y2) + _EDGE_TOL)
        )
        on_edge |= within & (np.abs(cross) <= _EDGE_TOL * max(seg_len, 1.0))
        straddles = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddles & (x < x_cross)
    return inside | on_edge


def point_in_polygon(p: Sequence[float], poly: LanePolygon) -> bool:
    return bool(points_in_ring([p[0]], [p[1]], poly.ring)[0])


@dataclass(frozen=True, eq=False)
class StudyArea:
    """One signalised approach: lane polygons plus upstream/downstream edges.

    ``origin`` is the projection anchor (lat, lon); all geometry is in local
    metres relative to it.
    """

    name: str
    lanes: tuple[LanePolygon, ...]
    upstream_edge: np.ndarray
    downstream_edge: np.ndarray
    origin: tuple[float, float]
    speed_limit: float = DEFAULT_SPEED_LIMIT
    length: float | None = None

    def __post_init__(self):
        lanes = tuple(sorted(self.lanes, key=lambda lane: lane.lane_id))
        ids = [lane.lane_id for lane in lanes]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate lane ids in {self.name!r}: {ids}")
        object.__setattr__(self, "lanes", lanes)
        for name in ("upstream_edge", "downstream_edge"):
            edge = np.asarray(getattr(self, name), dtype=float).reshape(2, 2)
            if np.allclose(edge[0], edge[1]):
                raise GeometryError(f"{name} is a single point")
            edge.setflags(write=False)
            object.__setattr__(self, name, edge)
        axis = self.downstream_mid - self.upstream_mid
        axis_len = float(np.hypot(*axis))
        if axis_len <= 0:
            raise GeometryError("upstream and downstream edges share a midpoint")
        if self.length is None:
            object.__setattr__(self, "length", axis_len)
        if not self.length > 0:
            raise GeometryError(f"area length must be > 0, got {self.length}")

    @property
    def upstream_mid(self) -> np.ndarray:
        return self.upstream_edge.mean(axis=0)

    @property
    def downstream_mid(self) -> np.ndarray:
        return self.downstream_edge.mean(axis=0)

    @property
    def axis(self) -> np.ndarray:
        v = self.downstream_mid - self.upstream_mid
        return v / np.hypot(*v)

    @property
    def n_lanes(self) -> int:
        return len(self.lanes)

    @property
    def lane_ids(self) -> list[int]:
        return [lane.lane_id for lane in self.lanes]

    def to_local(self, lat, lon) -> tuple[np.ndarray, np.ndarray]:
        return project_arrays(lat, lon, self.origin)

    def to_wgs84(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        return unproject_arrays(x, y, self.origin)

    def distances(self, x, y) -> np.ndarray:
        rel_x = np.asarray(x, dtype=float) - self.upstream_mid[0]
        rel_y = np.asarray(y, dtype=float) - self.upstream_mid[1]
        s = rel_x * self.axis[0] + rel_y * self.axis[1]
        return np.clip(s, 0.0, self.length)

    def label_points(self, x, y) -> np.ndarray:
        """Lane id per point, 0 outside; the lowest lane id wins on overlap."""
        x = np.asarray(x, dtype=float)
        labels = np.zeros(x.shape, dtype=int)
        for lane in self.lanes:
            hit = (labels == 0) & lane.contains(x, y)
            labels[hit] = lane.lane_id
        return labels


def distance_from_upstream(p: Sequence[float], area: StudyArea) -> float:
    """Projection of ``p`` on the upstream->downstream axis, clamped to [0, length]."""
    return float(area.distances([p[0]], [p[1]])[0])


# --- area file formats ------------------------------------------------------------


def _parse_coordinates(text: str) -> list[tuple[float, float]]:
    """``lon,lat[,alt]`` tuples -> (lat, lon)."""
    out = []
    for token in (text or "").split():
        parts = token.split(",")
        if len(parts) < 2:
            raise ConfigError(f"bad KML coordinate tuple {token!r}")
        try:
            lon, lat = float(parts[0]), float(parts[1])
        except ValueError:
            raise ConfigError(f"bad KML coordinate tuple {token!r}") from None
        out.append((lat, lon))
    return out


def _lane_number(name: str) -> int | None:
    m = re.search(r"(\d+)", name or "")
    return int(m.group(1)) if m else None


def _build_area(
    name: str,
    lanes_ll: list[tuple[str, list[tuple[float, float]]]],
    edges_ll: dict[str, list[tuple[float, float]]],
    speed_limit: float,
    length: float | None,
) -> StudyArea:
    for edge in ("upstream", "downstream"):
        if edge not in edges_ll:
            raise ConfigError(f"area {name!r} has no {edge!r} edge placemark")
        if len(edges_ll[edge]) < 2:
            raise GeometryError(f"{edge} edge needs two points")
    if not lanes_ll:
        raise ConfigError(f"area {name!r} has no lane polygons")
    up = edges_ll["upstream"][:2]
    origin = (0.5 * (up[0][0] + up[1][0]), 0.5 * (up[0][1] + up[1][1]))

    def local(pts):
        lat, lon = zip(*pts)
        x, y = project_arrays(lat, lon, origin)
        return np.column_stack([x, y])

    numbers = [_lane_number(n) for n, _ in lanes_ll]
    use_names = all(n is not None for n in numbers) and len(set(numbers)) == len(numbers)
    lanes = []
    for i, (lane_name, pts) in enumerate(lanes_ll, start=1):
        if len(pts) < 3:
            raise GeometryError(f"lane {lane_name!r}: ring has {len(pts)} vertices")
        lane_id = numbers[i - 1] if use_names else i
        lanes.append(LanePolygon(lane_id, local(pts)))
    return StudyArea(
        name=name,
        lanes=tuple(lanes),
        upstream_edge=local(edges_ll["upstream"][:2]),
        downstream_edge=local(edges_ll["downstream"][:2]),
        origin=origin,
        speed_limit=speed_limit,
        length=length,
    )


def parse_kml_polygons(
    stream: TextIO | str, speed_limit: float = DEFAULT_SPEED_LIMIT, length: float | None = None
) -> StudyArea:
    """Read lane Placemarks (Polygons) and the ``upstream``/``downstream`` edge Placemarks.

    Lane ids come from the integer in each Placemark name when every name has a
    distinct one, otherwise from document order.
    """
    text = stream if isinstance(stream, str) else stream.read()
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise ConfigError(f"invalid KML: {exc}") from None

    def local_name(tag: str) -> str:
        return tag.rsplit("}", 1)[-1]

    doc_name = "area"
    lanes_ll: list[tuple[str, list[tuple[float, float]]]] = []
    edges_ll: dict[str, list[tuple[float, float]]] = {}
    for el in root.iter():
        if local_name(el.tag) == "Document":
            for child in el:
                if local_name(child.tag) == "name" and child.text:
                    doc_name = child.text.strip()
                    break
        if local_name(el.tag) != "Placemark":
            continue
        pm_name = ""
        coords_text = None
        for child in el.iter():
            tag = local_name(child.tag)
            if tag == "name" and not pm_name:
                pm_name = (child.text or "").strip()
            elif tag == "coordinates" and coords_text is None:
                coords_text = child.text
        pts = _parse_coordinates(coords_text or "")
        key = pm_name.lower()
        if key in ("upstream", "downstream"):
            edges_ll[key] = pts
        else:
            lanes_ll.append((pm_name, pts))
    return _build_area(doc_name, lanes_ll, edges_ll, speed_limit, length)


def parse_geojson_area(
    stream: TextIO | str, speed_limit: float = DEFAULT_SPEED_LIMIT, length: float | None = None
) -> StudyArea:
    """GeoJSON FeatureCollection: Polygon features carry ``lane_id``; LineString
    features named ``upstream``/``downstream`` (``name`` property) are the edges."""
    text = stream if isinstance(stream, str) else stream.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid GeoJSON: {exc}") from None
    lanes_ll = []
    edges_ll = {}
    for feat in doc.get("features", []):
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        if geom.get("type") == "Polygon":
            ring = [(c[1], c[0]) for c in geom["coordinates"][0]]
            if "lane_id" not in props:
                raise ConfigError("GeoJSON lane polygon without lane_id property")
            lanes_ll.append((str(props["lane_id"]), ring))
        elif geom.get("type") == "LineString":
            key = str(props.get("name", "")).lower()
            if key in ("upstream", "downstream"):
                edges_ll[key] = [(c[1], c[0]) for c in geom["coordinates"]]
    return _build_area(doc.get("name", "area"), lanes_ll, edges_ll, speed_limit, length)


def read_area(path, speed_limit: float = DEFAULT_SPEED_LIMIT, length: float | None = None) -> StudyArea:
    path = str(path)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read area file {path}: {exc}") from None
    if path.lower().endswith((".geojson", ".json")):
        return parse_geojson_area(text, speed_limit, length)
    return parse_kml_polygons(text, speed_limit, length)


def area_to_kml(area: StudyArea) -> str:
    def coords(ring: np.ndarray, close: bool) -> str:
        lat, lon = area.to_wgs84(ring[:, 0], ring[:, 1])
        pairs = [f"{float(lo)!r},{float(la)!r},0" for la, lo in zip(lat, lon)]
        if close:
            pairs.append(pairs[0])
        return " ".join(pairs)

    marks = []
    for lane in area.lanes:
        marks.append(
            f"<Placemark><name>Lane {lane.lane_id}</name><Polygon><outerBoundaryIs><LinearRing>"
            f"<coordinates>{coords(lane.ring, True)}</coordinates>"
            f"</LinearRing></outerBoundaryIs></Polygon></Placemark>"
        )
    for name, edge in (("upstream", area.upstream_edge), ("downstream", area.downstream_edge)):
        marks.append(
            f"<Placemark><name>{name}</name><LineString><coordinates>{coords(edge, False)}"
            f"</coordinates></LineString></Placemark>"
        )
    body = "\n".join(marks)
    return (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        '<kml xmlns="http://www.opengis.net/kml/2.2"><Document>'
        f"<name>{area.name}</name>\n{body}\n</Document></kml>\n"
    )


# --- lane assignment --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LaneAssignment:
    """Per-point lane labels (0 = outside) for one trajectory, after smoothing.

    ``distance`` holds each point's distance from the upstream edge (clamped).
    """

    track_id: int
    vehicle_type: VehicleType
    labels: np.ndarray
    distance: np.ndarray
    entry_index: int
    exit_index: int
    origin_lane: int
    destination_lane: int

    @property
    def in_area(self) -> np.ndarray:
        return self.labels > 0

    def lane_sequence(self) -> list[int]:
        """Nonzero labels with consecutive repeats collapsed."""
        seq: list[int] = []
        for lab in self.labels[self.labels > 0]:
            if not seq or seq[-1] != lab:
                seq.append(int(lab))
        return seq

    def visited_lanes(self) -> list[int]:
        """Distinct lanes in order of first visit."""
        return list(dict.fromkeys(self.lane_sequence()))

    @property
    def lane_changes(self) -> int:
        return max(len(self.lane_sequence()) - 1, 0)


@dataclass
class AssignmentResult:
    assignments: list[LaneAssignment]
    excluded: list[int] = field(default_factory=list)

    def __iter__(self) -> Iterator[LaneAssignment]:
        return iter(self.assignments)

    def __len__(self) -> int:
        return len(self.assignments)

    def __getitem__(self, i):
        return self.assignments[i]

    def by_track(self) -> dict[int, LaneAssignment]:
        return {a.track_id: a for a in self.assignments}


def _runs(labels: np.ndarray) -> list[list[int]]:
    """[start, stop, label] for each maximal run."""
    runs: list[list[int]] = []
    for i, lab in enumerate(labels):
        if runs and runs[-1][2] == lab:
            runs[-1][1] = i + 1
        else:
            runs.append([i, i + 1, int(lab)])
    return runs


def smooth_labels(labels: np.ndarray, t: np.ndarray, min_dwell: float, dt: float) -> np.ndarray:
    """Merge runs shorter than ``min_dwell`` seconds into a neighbouring run.

    Only the span between the first and last in-area point is touched. A run's
    duration is its sample count times ``dt``. Short runs are resolved left to
    right and take the label of the preceding run (the following one for the
    first run). Interior zero runs are gaps in digitised polygons and are merged
    the same way.
    """
    labels = np.asarray(labels, dtype=int).copy()
    nz = np.flatnonzero(labels)
    if nz.size == 0 or min_dwell <= 0:
        return labels
    lo, hi = nz[0], nz[-1] + 1
    span = labels[lo:hi]
    runs = _runs(span)
    if len(runs) == 1:
        return labels
    merged = True
    while merged and len(runs) > 1:
        merged = False
        for k, (start, stop, lab) in enumerate(runs):
            if (stop - start) * dt + 1e-9 >= min_dwell:
                continue
            neighbour = runs[k - 1] if k > 0 else runs[k + 1]
            span[start:stop] = neighbour[2]
            runs = _runs(span)
            merged = True
            break
    labels[lo:hi] = span
    return labels


def assign_trajectory(
    traj: Trajectory, area: StudyArea, min_lane_dwell: float = 1.0, dt: float | None = None
) -> LaneAssignment | None:
    x, y = area.to_local(traj.lat, traj.lon)
    raw = area.label_points(x, y)
    if not raw.any():
        return None
    if dt is None:
        steps = np.diff(traj.t)
        dt = float(np.median(steps)) if steps.size else 1.0
    labels = smooth_labels(raw, traj.t, min_lane_dwell, dt)
    nz = np.flatnonzero(labels)
    labels.setflags(write=False)
    distance = area.distances(x, y)
    distance.setflags(write=False)
    return LaneAssignment(
        track_id=traj.track_id,
        vehicle_type=traj.category,
        labels=labels,
        distance=distance,
        entry_index=int(nz[0]),
        exit_index=int(nz[-1]),
        origin_lane=int(labels[nz[0]]),
        destination_lane=int(labels[nz[-1]]),
    )


def assign_lanes(dataset: Dataset, area: StudyArea, min_lane_dwell: float = 1.0) -> AssignmentResult:
    """Label every point with its lane; trajectories that never touch a lane are
    listed in ``excluded``."""
    result = AssignmentResult([])
    for traj in dataset:
        a = assign_trajectory(traj, area, min_lane_dwell, dataset.sample_interval)
        if a is None:
            result.excluded.append(traj.track_id)
        else:
            result.assignments.append(a)
    return result


def detect_lane_changes(assignments: Iterable[LaneAssignment]) -> dict[VehicleType, int]:
    counts: Counter = Counter()
    for a in assignments:
        counts[a.vehicle_type] += a.lane_changes
    return dict(counts)


@dataclass(frozen=True, eq=False)
class ODMatrix:
    """``counts[i, j]`` = vehicles entering in lane i and leaving in lane j (row/col 0 unused)."""

    counts: np.ndarray

    def __getitem__(self, key):
        return int(self.counts[key])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def origin_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def destination_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def od_matrix(assignments: Iterable[LaneAssignment], n_lanes: int | None = None) -> ODMatrix:
    pairs = [(a.origin_lane, a.destination_lane) for a in assignments]
    size = max([n_lanes or 0] + [max(p) for p in pairs]) + 1
    m = np.zeros((size, size), dtype=int)
    for o, d in pairs:
        m[o, d] += 1
    return ODMatrix(m)
