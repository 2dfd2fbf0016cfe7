"""Power-based fuel consumption (VT-CPFM) and a CO2 conversion.

Speeds enter the resistance and power formulas in km/h; everything else in
this package is SI, so conversion happens here.
"""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .ingest import Trajectory, VehicleType

AIR_DENSITY = 1.2256  # kg/m^3, sea level at 15 C
GRAVITY = 9.8066
MASS_FACTOR = 1.04  # rotating-mass allowance
DEFAULT_CO2_PER_LITER = 2.31  # kg/L, gasoline; not from the fuel model


@dataclass(frozen=True)
class VehicleClassParams:
    mass: float  # kg
    drag: float  # Cd
    frontal_area: float  # m^2
    cr: float
    c1: float
    c2: float
    eta_d: float
    alpha0: float  # L/s
    alpha1: float  # L/(kW s)
    alpha2: float  # L/(kW^2 s)
    altitude_km: float = 0.0
    fuel_scale: float = 1.0

    def __post_init__(self):
        if not self.mass > 0:
            raise ConfigError(f"mass must be > 0, got {self.mass}")
        if not self.frontal_area > 0:
            raise ConfigError(f"frontal area must be > 0, got {self.frontal_area}")
        if not 0 < self.eta_d <= 1:
            raise ConfigError(f"driveline efficiency must be in (0, 1], got {self.eta_d}")
        if self.alpha0 < 0:
            raise ConfigError(f"alpha0 must be >= 0, got {self.alpha0}")

    @property
    def altitude_factor(self) -> float:
        return 1.0 - 0.085 * self.altitude_km


def resistance(v_kmh, grade, p: VehicleClassParams):
    """Aerodynamic + rolling + grade resistance in newtons."""
    v = np.asarray(v_kmh, dtype=float)
    aero = AIR_DENSITY / 25.92 * p.drag * p.altitude_factor * p.frontal_area * v**2
    rolling = GRAVITY * p.mass * (p.cr / 1000.0) * (p.c1 * v + p.c2)
    result = aero + rolling + GRAVITY * p.mass * np.asarray(grade, dtype=float)
    return float(result) if result.ndim == 0 else result


def power(v_kmh, accel, resist, p: VehicleClassParams):
    """Tractive power in kW; negative while braking."""
    v = np.asarray(v_kmh, dtype=float)
    result = (np.asarray(resist, dtype=float) + MASS_FACTOR * p.mass * np.asarray(accel, dtype=float)) / (
        3600.0 * p.eta_d
    ) * v
    return float(result) if result.ndim == 0 else result


def fuel_rate(power_kw, p: VehicleClassParams):
    """Fuel rate in L/s: quadratic in power, idling rate ``alpha0`` when power < 0."""
    pw = np.asarray(power_kw, dtype=float)
    rate = np.where(pw >= 0, p.alpha0 + p.alpha1 * pw + p.alpha2 * pw**2, p.alpha0)
    return float(rate) if rate.ndim == 0 else rate


@dataclass(frozen=True, eq=False)
class FuelRecord:
    track_id: int
    power: np.ndarray  # kW per sample
    fuel_rate: np.ndarray  # L/s per sample
    fuel: float  # L
    co2: float  # kg
    duration: float  # s


def trip_fuel_and_co2(
    traj: Trajectory,
    p: VehicleClassParams,
    co2_per_liter: float = DEFAULT_CO2_PER_LITER,
    dt: float = 1.0,
    mask: np.ndarray | None = None,
    grade=0.0,
) -> FuelRecord:
    """Integrate the fuel rate over the selected samples (rectangle rule, step ``dt``).

    ``fuel_scale`` on the parameters multiplies the fuel rate (used for classes
    that borrow another class's parameters).
    """
    sel = np.ones(len(traj), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    v_kmh = traj.speed[sel] * 3.6
    accel = traj.lon_acc[sel]
    g = np.broadcast_to(np.asarray(grade, dtype=float), traj.speed.shape)[sel]
    pw = np.asarray(power(v_kmh, accel, resistance(v_kmh, g, p), p), dtype=float).reshape(-1)
    rate = np.asarray(fuel_rate(pw, p), dtype=float).reshape(-1) * p.fuel_scale
    fuel = float(np.sum(rate) * dt)
    return FuelRecord(traj.track_id, pw, rate, fuel, fuel * co2_per_liter, float(sel.sum() * dt))


@dataclass(frozen=True)
class EnergyConfig:
    classes: Mapping[VehicleType, VehicleClassParams]
    co2_per_liter: float = DEFAULT_CO2_PER_LITER

    def params_for(self, vtype: VehicleType) -> VehicleClassParams:
        try:
            return self.classes[vtype.category]
        except KeyError:
            raise ConfigError(f"no fuel parameters for vehicle class {vtype.category.value}") from None

    @classmethod
    def from_dict(cls, doc: Mapping) -> EnergyConfig:
        """``{"co2_per_liter": .., "classes": {type: {field: value} | {"base": type, "fuel_scale": k}}}``"""
        raw = doc.get("classes")
        if not isinstance(raw, Mapping):
            raise ConfigError("vehicle parameter config needs a 'classes' mapping")
        names = {f.name for f in fields(VehicleClassParams)}
        resolved: dict[VehicleType, VehicleClassParams] = {}
        pending = dict(raw)
        for _ in range(len(pending) + 1):
            for key, spec in list(pending.items()):
                try:
                    vtype = VehicleType.from_label(key)
                except ValueError as exc:
                    raise ConfigError(str(exc)) from None
                if "base" in spec:
                    base = VehicleType.from_label(spec["base"])
                    if base not in resolved:
                        continue
                    b = resolved[base]
                    params = VehicleClassParams(
                        **{f.name: getattr(b, f.name) for f in fields(VehicleClassParams)}
                        | {"fuel_scale": b.fuel_scale * float(spec.get("fuel_scale", 1.0))}
                    )
                else:
                    unknown = set(spec) - names
                    if unknown:
                        raise ConfigError(f"unknown vehicle parameter(s) for {key}: {sorted(unknown)}")
                    try:
                        params = VehicleClassParams(**{k: float(v) for k, v in spec.items()})
                    except TypeError as exc:
                        raise ConfigError(f"incomplete parameters for {key}: {exc}") from None
                resolved[vtype] = params
                del pending[key]
        if pending:
            raise ConfigError(f"unresolvable 'base' references: {sorted(pending)}")
        return cls(resolved, float(doc.get("co2_per_liter", DEFAULT_CO2_PER_LITER)))

    @classmethod
    def load(cls, path: str | Path | None = None) -> EnergyConfig:
        """Read a JSON config; None loads the bundled sample parameters."""
        try:
            if path is None:
                text = resources.files("uavmoe.data").joinpath("vehicle_params.json").read_text("utf-8")
            else:
                text = Path(path).read_text(encoding="utf-8")
            doc = json.loads(text)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load vehicle parameters from {path}: {exc}") from None
        return cls.from_dict(doc)
