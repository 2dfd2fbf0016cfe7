"""End-to-end run: ingest, lane assignment, queues, MOEs, fuel, fundamental diagram.

Configuration is validated and every configuration file is loaded before any
trajectory file is parsed. A failing stage aborts the run with a
``PipelineError`` naming the stage; nothing is written in that case.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..energy import EnergyConfig, FuelRecord, trip_fuel_and_co2
from ..errors import ConfigError, InsufficientDataError, UavMoeError
from ..fd import (
    CoverageWarning,
    FitResult,
    fd_arrays,
    fit_from_observations,
    observations_from_lanes,
)
from ..geo import AssignmentResult, StudyArea, assign_lanes, detect_lane_changes, od_matrix, read_area
from ..ingest import REPORT_CATEGORIES, Dataset, VehicleType, read_dataset, validate_dataset
from ..moe import (
    DEFAULT_MOVEMENTS,
    CrashCoefficientTable,
    MoeAggregate,
    aggregate_moes,
    crash_rates,
    free_flow_speed,
)
from ..queueing import (
    QueueInterval,
    detect_spillbacks,
    extract_queue_intervals,
    infer_signal_phases,
    lane_profiles,
    max_queue_length,
)
from .report import FD_CURVE_COLUMNS, QUEUE_COLUMNS, SPILLBACK_COLUMNS, MoeReport, Table

log = logging.getLogger(__name__)

STAGES = ("ingest", "assign", "queueing", "moe", "energy", "fd")


class PipelineError(UavMoeError):
    """A stage failed; ``cause`` is the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunConfig:
    inputs: tuple[Path, ...] = ()
    area: Path | None = None
    out: Path | None = None
    fmt: str = "csv"
    uf_source: str = "speed-limit"
    speed_limit_kmh: float = 55.0
    area_length: float | None = None
    queue_speed: float = 1.2
    min_lane_dwell: float = 1.0
    min_queue_dwell: int = 2
    spillback_eps: float = 5.0
    spillback_dedup_s: float = 10.0
    phase_threshold: float = 10.0
    movements: Mapping[str, Sequence[int]] = field(default_factory=lambda: dict(DEFAULT_MOVEMENTS))
    crash_coefficients: Path | None = None
    vehicle_params: Path | None = None
    fd_window_s: float = 30.0
    fd_curve_points: int = 100

    def __post_init__(self):
        self.inputs = tuple(Path(p) for p in self.inputs)
        for name in ("area", "out", "crash_coefficients", "vehicle_params"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, Path(value))

    @classmethod
    def from_dict(cls, doc: Mapping, base_dir: Path | None = None) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        values = dict(doc)
        if base_dir is not None:
            for name in ("area", "out", "crash_coefficients", "vehicle_params"):
                if values.get(name) is not None:
                    values[name] = base_dir / values[name]
            if "inputs" in values:
                values["inputs"] = [base_dir / p for p in values["inputs"]]
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(doc, base_dir=path.parent)

    def with_overrides(self, **kw) -> RunConfig:
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def validate(self, need_area: bool = True) -> None:
        if self.fmt not in ("csv", "json"):
            raise ConfigError(f"format must be csv or json, got {self.fmt!r}")
        if self.uf_source not in ("speed-limit", "p95"):
            raise ConfigError(f"--uf must be speed-limit or p95, got {self.uf_source!r}")
        for name in ("speed_limit_kmh", "queue_speed", "spillback_eps", "fd_window_s"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.min_queue_dwell < 1:
            raise ConfigError("min_queue_dwell must be >= 1")
        if need_area and self.area is None:
            raise ConfigError("an area file (--area) is required")
        for path in [self.area, self.crash_coefficients, self.vehicle_params, *self.inputs]:
            if path is not None and not path.is_file():
                raise ConfigError(f"no such file: {path}")
        for name, lanes in self.movements.items():
            if not lanes or any(int(x) < 1 for x in lanes):
                raise ConfigError(f"movement {name!r} needs positive lane ids")


@dataclass
class RunResult:
    report: MoeReport
    dataset: Dataset
    area: StudyArea
    assignments: AssignmentResult | None = None
    intervals: list[QueueInterval] = field(default_factory=list)
    aggregate: MoeAggregate | None = None
    fuel: list[FuelRecord] = field(default_factory=list)
    fit: FitResult | None = None
    u_f: float = 0.0  # m/s
    timings: dict[str, float] = field(default_factory=dict)


class _Stage:
    def __init__(self, name: str, timings: dict[str, float]):
        self.name = name
        self.timings = timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.name] = time.perf_counter() - self.t0
        log.debug("stage %s took %.3f s", self.name, self.timings[self.name])
        if exc is None or isinstance(exc, PipelineError):
            return False
        if isinstance(exc, (UavMoeError, ValueError, OSError)):
            raise PipelineError(self.name, exc) from exc
        return False


def _category_rows(table: Table, value_of, include_total: bool = True) -> Table:
    for cat in REPORT_CATEGORIES:
        table.append([cat.value, *value_of(cat)])
    if include_total:
        table.append(["Total", *value_of(None)])
    return table


def run_pipeline(
    cfg: RunConfig,
    stages: Sequence[str] = STAGES,
    dataset: Dataset | None = None,
    area: StudyArea | None = None,
) -> RunResult:
    """Run the selected stages and assemble the report (nothing is written here).

    ``dataset`` and ``area`` may be given directly, in which case the
    corresponding files in ``cfg`` are not read.
    """
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ConfigError(f"unknown stage(s): {sorted(unknown)}")
    cfg.validate(need_area=area is None)
    speed_limit = cfg.speed_limit_kmh / 3.6
    if area is None:
        area = read_area(cfg.area, speed_limit=speed_limit, length=cfg.area_length)
    crash_table = CrashCoefficientTable.load(cfg.crash_coefficients) if "moe" in stages else None
    energy_cfg = EnergyConfig.load(cfg.vehicle_params) if "energy" in stages else None

    timings: dict[str, float] = {}
    report = MoeReport()
    with _Stage("ingest", timings):
        if dataset is None:
            parts = [read_dataset(p) for p in cfg.inputs]
            trajectories = [tr for part in parts for tr in part]
            interval = parts[0].sample_interval if parts else None
            dataset = Dataset.from_trajectories(trajectories, sample_interval=interval)
        findings = validate_dataset(dataset)
        report.notes.append(f"{len(dataset)} trajectories, {len(findings)} validation finding(s)")
    result = RunResult(report, dataset, area, timings=timings)
    dt = dataset.sample_interval
    lane_ids = area.lane_ids
    lane_cols = tuple(f"lane_{i}" for i in lane_ids)
    have_vehicles = len(dataset) > 0

    with _Stage("assign", timings):
        asg = assign_lanes(dataset, area, min_lane_dwell=cfg.min_lane_dwell)
        result.assignments = asg
        result.u_f = free_flow_speed(dataset, asg, cfg.uf_source, speed_limit)
        if "assign" in stages:
            _assignment_tables(report, dataset, asg, lane_ids, have_vehicles)

    if "queueing" in stages:
        with _Stage("queueing", timings):
            intervals = [
                iv
                for a in asg
                for iv in extract_queue_intervals(
                    dataset[a.track_id], a, area, cfg.queue_speed, cfg.min_queue_dwell, dt
                )
            ]
            result.intervals = intervals
            profiles = lane_profiles(intervals, area)
            queues = report.add(Table("queues", QUEUE_COLUMNS))
            for lane in lane_ids:
                qm = max_queue_length(profiles[lane]) if lane in profiles else None
                if qm is None:
                    queues.append([lane, 0.0, None, None, None, None, None])
                else:
                    queues.append(
                        [lane, qm.length, qm.timestamp, qm.start_lat, qm.start_lon, qm.end_lat, qm.end_lon]
                    )
            spill = report.add(Table("spillbacks", SPILLBACK_COLUMNS))
            for ev in detect_spillbacks(intervals, area, cfg.spillback_eps, cfg.spillback_dedup_s):
                spill.append([ev.lane_id, ev.t])
            est = infer_signal_phases(profiles.values(), cfg.phase_threshold)
            phases = report.add(Table("signal_phases", ("cycle", "red_onset_s", "green_onset_s")))
            for i, (r, g) in enumerate(zip(est.red_onsets, est.green_onsets), start=1):
                phases.append([i, r, g])
            report.notes.append(f"signal phases: {est.confidence}")

    if "moe" in stages:
        with _Stage("moe", timings):
            agg = aggregate_moes(dataset, asg, result.u_f, lane_ids, cfg.movements, dt)
            result.aggregate = agg
            moves = tuple(cfg.movements)
            for metric in ("travel_time", "stops", "delay"):
                lane_t = report.add(Table(f"{metric}_lane", ("vehicle_type", *lane_cols)))
                move_t = report.add(Table(f"{metric}_movement", ("vehicle_type", *moves)))
                if have_vehicles:
                    _category_rows(lane_t, lambda c, m=metric: [agg.lane_stat(i, c).mean(m) for i in lane_ids])
                    _category_rows(move_t, lambda c, m=metric: [agg.movement_stat(n, c).mean(m) for n in moves])
            rates = crash_rates(result.u_f * 3.6, crash_table)
            crash = report.add(Table("crash_rates", ("crash_type", "crash_rate")))
            for ctype, rate in rates.per_type.items():
                crash.append([ctype.value, rate])
            crash.append(["Total", rates.total])

    if "energy" in stages:
        with _Stage("energy", timings):
            by_cat: dict[VehicleType, list[FuelRecord]] = {c: [] for c in REPORT_CATEGORIES}
            for a in asg:
                tr = dataset[a.track_id]
                mask = np.zeros(len(tr), dtype=bool)
                mask[a.entry_index : a.exit_index + 1] = True
                mask &= a.labels > 0
                rec = trip_fuel_and_co2(tr, energy_cfg.params_for(tr.vehicle_type), energy_cfg.co2_per_liter, dt, mask)
                result.fuel.append(rec)
                by_cat[tr.category].append(rec)
            fuel = report.add(Table("fuel", ("vehicle_type", "vehicles", "fuel_l", "fuel_per_vehicle_l", "co2_kg")))

            def fuel_row(cat):
                recs = result.fuel if cat is None else by_cat[cat]
                total = float(sum(r.fuel for r in recs))
                per = total / len(recs) if recs else None
                return [len(recs), total, per, float(sum(r.co2 for r in recs))]

            if have_vehicles:
                _category_rows(fuel, fuel_row)

    if "fd" in stages:
        with _Stage("fd", timings):
            obs = observations_from_lanes(dataset, asg, area, cfg.fd_window_s)
            obs_t = report.add(Table("fd_observations", FD_CURVE_COLUMNS))
            for u, k in obs:
                obs_t.append([u, k, u * k])
            curve = report.add(Table("fd_curve", FD_CURVE_COLUMNS))
            fit_t = report.add(Table("fd_fit", ("parameter", "value")))
            try:
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always", CoverageWarning)
                    fit = fit_from_observations(obs)
                for w in caught:
                    report.notes.append(f"fd: {w.message}")
            except InsufficientDataError as exc:
                report.notes.append(f"fd: fit skipped ({exc})")
                fit = None
            result.fit = fit
            if fit is not None:
                p = fit.params
                u, k, q = fd_arrays(p, cfg.fd_curve_points)
                for row in zip(u, k, q):
                    curve.append([float(x) for x in row])
                for name, value in (
                    ("u_f_kmh", p.u_f),
                    ("u_c_kmh", p.u_c),
                    ("q_c_vph", p.q_c),
                    ("k_j_vpk", p.k_j),
                    ("k_c_vpk", p.k_c),
                    ("rmse_vpk", fit.rmse),
                    ("n_samples", fit.n_samples),
                    ("coverage_ok", int(fit.coverage_ok)),
                    ("coverage_note", fit.coverage_note),
                ):
                    fit_t.append([name, value])

    summary = report.add(Table("summary", ("item", "value")))
    summary.append(["vehicles", len(dataset)])
    summary.append(["assigned", len(asg)])
    summary.append(["excluded", len(asg.excluded)])
    summary.append(["sample_interval_s", float(dt)])
    summary.append(["free_speed_kmh", result.u_f * 3.6])
    summary.append(["free_speed_source", cfg.uf_source])
    return result


def _assignment_tables(report, dataset, asg, lane_ids, have_vehicles) -> None:
    lane_cols = tuple(f"lane_{i}" for i in lane_ids)
    counts = report.add(Table("vehicle_counts", ("vehicle_type", *lane_cols)))

    def visits(cat):
        out = []
        for lane in lane_ids:
            out.append(
                sum(1 for a in asg if lane in a.visited_lanes() and (cat is None or a.vehicle_type == cat))
            )
        return out

    changes = report.add(Table("lane_changes", ("vehicle_type", "vehicles", "lane_changes")))
    per_cat = detect_lane_changes(asg)

    def change_row(cat):
        if cat is None:
            return [len(asg), sum(per_cat.values())]
        return [sum(1 for a in asg if a.vehicle_type == cat), per_cat.get(cat, 0)]

    od = report.add(Table("od_matrix", ("origin_lane", *lane_cols)))
    vehicles = report.add(
        Table("assignments", ("track_id", "vehicle_type", "origin_lane", "destination_lane", "lanes", "lane_changes"))
    )
    if not have_vehicles:
        return
    _category_rows(counts, visits)
    _category_rows(changes, change_row)
    mat = od_matrix(asg, max(lane_ids))
    for lane in lane_ids:
        od.append([lane, *[int(mat[lane, d]) for d in lane_ids]])
    for a in asg:
        vehicles.append(
            [
                a.track_id,
                a.vehicle_type.value,
                a.origin_lane,
                a.destination_lane,
                "-".join(str(x) for x in a.lane_sequence()),
                a.lane_changes,
            ]
        )
