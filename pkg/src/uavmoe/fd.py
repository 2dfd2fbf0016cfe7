"""Van Aerde single-regime speed/headway model and fundamental diagrams.

Units follow traffic-engineering convention inside this module: speeds in
km/h, densities in veh/km, flows in veh/h, headways in km/veh.
"""

from __future__ import annotations

import math
import warnings
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize

from .errors import DomainError, InsufficientDataError


class SingularParametersError(DomainError):
    """Speed-at-capacity equal to free speed (pole of the ``m`` constant)."""


class InfeasibleParametersError(DomainError):
    pass


class CoverageWarning(UserWarning):
    """Observations do not span both the congested and uncongested regimes."""


@dataclass(frozen=True)
class VanAerdeParams:
    u_f: float  # free speed, km/h
    u_c: float  # speed at capacity, km/h
    q_c: float  # capacity, veh/h
    k_j: float  # jam density, veh/km

    @property
    def k_c(self) -> float:
        """Density at capacity."""
        return self.q_c / self.u_c

    def check(self) -> None:
        if self.u_c == self.u_f:
            raise SingularParametersError("u_c == u_f: the headway constants are undefined")
        if not 0 < self.u_c < self.u_f:
            raise InfeasibleParametersError(f"need 0 < u_c < u_f, got u_c={self.u_c}, u_f={self.u_f}")
        if not self.q_c > 0:
            raise InfeasibleParametersError(f"capacity must be > 0, got {self.q_c}")
        if not self.k_j > self.k_c:
            raise InfeasibleParametersError(
                f"jam density {self.k_j} must exceed density at capacity {self.k_c:.4g}"
            )

    @property
    def monotone(self) -> bool:
        """True when ``c3 >= 0``, i.e. ``k_j >= q_c * u_f / u_c**2``.

        Under this condition headway rises with speed everywhere and flow
        peaks at ``u_c``.
        """
        return self.k_j >= self.q_c * self.u_f / self.u_c**2


@dataclass(frozen=True)
class HeadwayConstants:
    c1: float  # km
    c2: float  # km^2/h
    c3: float  # h
    m: float  # h/km


class FDSample(NamedTuple):
    u: float  # km/h
    k: float  # veh/km
    q: float  # veh/h


def calibrate_constants(p: VanAerdeParams) -> HeadwayConstants:
    p.check()
    m = (2 * p.u_c - p.u_f) / (p.u_f - p.u_c) ** 2
    denom = m + 1 / p.u_f
    if denom <= 0:
        raise InfeasibleParametersError(f"m + 1/u_f = {denom} <= 0")
    c2 = 1 / (p.k_j * denom)
    c1 = m * c2
    c3 = (-c1 + p.u_c / p.q_c - c2 / (p.u_f - p.u_c)) / p.u_c
    return HeadwayConstants(c1, c2, c3, m)


def headway(u, c: HeadwayConstants, u_f: float):
    """Distance headway ``c1 + c3*u + c2/(u_f - u)`` in km/veh for ``0 <= u < u_f``."""
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr < 0) or np.any(u_arr >= u_f) or not np.all(np.isfinite(u_arr)):
        raise DomainError(f"speed must lie in [0, u_f={u_f}); headway diverges at u_f")
    h = c.c1 + c.c3 * u_arr + c.c2 / (u_f - u_arr)
    return float(h) if h.ndim == 0 else h


def fd_point(p: VanAerdeParams, u: float) -> FDSample:
    c = calibrate_constants(p)
    k = 1.0 / headway(u, c, p.u_f)
    return FDSample(float(u), k, k * u)


def fd_speeds(u_f: float, n: int) -> np.ndarray:
    """``n`` speeds in the open interval (0, u_f), cosine-spaced so both ends
    (jam and free flow) are sampled densely."""
    i = np.arange(1, n + 1)
    return u_f * 0.5 * (1 - np.cos(np.pi * i / (n + 1)))


def fd_arrays(p: VanAerdeParams, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    c = calibrate_constants(p)
    u = fd_speeds(p.u_f, n)
    k = 1.0 / headway(u, c, p.u_f)
    return u, k, k * u


def fd_curve(p: VanAerdeParams, n: int) -> list[FDSample]:
    return [FDSample(*map(float, row)) for row in zip(*fd_arrays(p, n))]


# --- fitting ----------------------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    params: VanAerdeParams
    residual: float  # sum of squared density errors, (veh/km)^2
    rmse: float
    coverage_ok: bool
    coverage_note: str
    n_samples: int


def _model_k(u: np.ndarray, uf, uc, qc, kj) -> np.ndarray:
    """Vectorised density for broadcastable parameter arrays; NaN where invalid."""
    m = (2 * uc - uf) / (uf - uc) ** 2
    c2 = 1 / (kj * (m + 1 / uf))
    c1 = m * c2
    c3 = (-c1 + uc / qc - c2 / (uf - uc)) / uc
    with np.errstate(divide="ignore", invalid="ignore"):
        h = c1 + c3 * u + c2 / (uf - u)
        k = np.where((h > 0) & (u < uf), 1 / h, np.nan)
    return k


def _sse(u, k_obs, uf, uc, qc, kj) -> np.ndarray:
    k = _model_k(u, uf, uc, qc, kj)
    err = np.sum((k - k_obs) ** 2, axis=-1, keepdims=True)
    valid = (uc > 0) & (uc < uf) & (qc > 0) & (kj > qc / uc)
    return np.where(valid & np.isfinite(err), err, np.inf)[..., 0]


def _unpack(theta, u_max):
    """Unconstrained vector -> (u_f, u_c, q_c, k_j) with u_f > u_max and 0 < u_c < u_f."""
    uf = u_max * (1 + math.exp(theta[0]))
    uc = uf / (1 + math.exp(-theta[1]))
    return uf, uc, math.exp(theta[2]), math.exp(theta[3])


def _pack(uf, uc, qc, kj, u_max):
    return np.array([math.log(uf / u_max - 1), math.log(uc / (uf - uc)), math.log(qc), math.log(kj)])


def fit_from_observations(
    samples: Sequence[tuple[float, float]],
    grid_points: int = 9,
    min_branch_fraction: float = 0.1,
) -> FitResult:
    """Fit (u_f, u_c, q_c, k_j) to (speed km/h, density veh/km) observations.

    The squared density error is minimised. A coarse bounded grid is searched
    first, then the best node is refined with Nelder-Mead. Exact grid ties go
    to the lexicographically smallest parameter tuple. A CoverageWarning is
    issued when the data do not cover both sides of capacity.
    """
    obs = np.asarray(samples, dtype=float).reshape(-1, 2)
    if len(obs) < 8:
        raise InsufficientDataError(f"need at least 8 observations, got {len(obs)}")
    if not np.all(np.isfinite(obs)) or np.any(obs < 0):
        raise DomainError("observations must be finite and non-negative")
    u, k_obs = obs[:, 0], obs[:, 1]
    u_max = float(u.max())
    k_max = float(k_obs.max())
    q_max = float((u * k_obs).max())
    if u_max <= 0 or k_max <= 0 or q_max <= 0:
        raise InsufficientDataError("observations carry no flow")

    g = grid_points
    uf_grid = u_max * np.geomspace(1.01, 2.0, g)
    ratio_grid = np.linspace(0.3, 0.95, g)
    qc_grid = q_max * np.geomspace(0.9, 3.0, g)
    kj_grid = k_max * np.geomspace(0.9, 4.0, g)
    UF, R, QC, KJ = np.meshgrid(uf_grid, ratio_grid, qc_grid, kj_grid, indexing="ij")
    UC = UF * R
    flat = [a.reshape(-1, 1) for a in (UF, UC, QC, KJ)]
    sse = _sse(u[None, :], k_obs[None, :], *flat)
    best = float(np.min(sse))
    if not np.isfinite(best):
        start = (u_max * 1.2, u_max * 0.6, q_max * 1.2, k_max * 1.5)
    else:
        ties = np.flatnonzero(sse == best)
        cands = sorted(tuple(float(a[i, 0]) for a in flat) for i in ties)
        start = cands[0]

    def objective(theta):
        try:
            uf, uc, qc, kj = _unpack(theta, u_max)
        except OverflowError:
            return np.inf
        val = float(_sse(u[None, :], k_obs[None, :], *(np.array([[v]]) for v in (uf, uc, qc, kj)))[0])
        return val if np.isfinite(val) else 1e300

    theta = _pack(*start, u_max)
    value = objective(theta)
    for _ in range(6):
        res = minimize(
            objective, theta, method="Nelder-Mead",
            options={
                "xatol": 1e-11,
                "fatol": max(1e-16, 1e-13 * value) if np.isfinite(value) else 1e-16,
                "maxiter": 8_000,
                "maxfev": 8_000,
                "adaptive": True,
            },
        )
        improved = res.fun < value * (1 - 1e-12)
        theta, value = (res.x, float(res.fun)) if res.fun <= value else (theta, value)
        if not improved:
            break
    params = VanAerdeParams(*_unpack(theta, u_max))
    ok, note = coverage(obs, params, min_branch_fraction)
    if not ok:
        warnings.warn(note, CoverageWarning, stacklevel=2)
    return FitResult(params, value, math.sqrt(value / len(obs)), ok, note, len(obs))


def coverage(obs: np.ndarray, params: VanAerdeParams, min_branch_fraction: float = 0.1) -> tuple[bool, str]:
    """Check that observations populate both regimes and reach well into congestion.

    Samples with density above the fitted density at capacity are congested.
    Both branches must hold at least ``min_branch_fraction`` of the samples
    (and at least 2). The densest sample must also be more than halfway from
    ``k_c`` to ``k_j``.
    """
    k = obs[:, 1]
    k_c = params.k_c
    congested = int(np.sum(k > k_c))
    free = len(k) - congested
    need = max(2, math.ceil(min_branch_fraction * len(k)))
    reach = k_c + 0.5 * (params.k_j - k_c)
    problems = []
    if congested < need:
        problems.append(f"only {congested} congested sample(s) (need {need})")
    if free < need:
        problems.append(f"only {free} uncongested sample(s) (need {need})")
    if k.max() < reach:
        problems.append(f"max density {k.max():.1f} veh/km never approaches jam density {params.k_j:.1f}")
    if problems:
        return False, "insufficient regime coverage: " + "; ".join(problems)
    return True, f"{free} uncongested / {congested} congested samples"


def observations_from_lanes(
    dataset,
    assignments: Iterable,
    area,
    window: float = 30.0,
) -> list[tuple[float, float]]:
    """Bin lane occupancy into fixed time windows (Edie's definitions).

    Per lane and window: density = time spent by all vehicles / (window *
    lane length); space-mean speed = distance travelled / time spent.
    Returns (km/h, veh/km) pairs for windows with any vehicle present.
    """
    dt = dataset.sample_interval
    length_km = area.length / 1000.0
    spent: dict[tuple[int, int], float] = {}
    dist: dict[tuple[int, int], float] = {}
    for a in assignments:
        tr = dataset[a.track_id]
        lanes = a.labels
        inside = lanes > 0
        if not inside.any():
            continue
        bins = np.floor(tr.t[inside] / window).astype(int)
        for lane, b, v in zip(lanes[inside], bins, tr.speed[inside]):
            key = (int(lane), int(b))
            spent[key] = spent.get(key, 0.0) + dt
            dist[key] = dist.get(key, 0.0) + v * dt
    out = []
    for key in sorted(spent):
        t_s = spent[key]
        if t_s <= 0:
            continue
        k = t_s / (window * length_km)
        u = dist[key] / t_s * 3.6
        out.append((u, k))
    return out


def random_params(rng: np.random.Generator) -> VanAerdeParams:
    """Random well-posed parameter set (``monotone`` holds), for property tests."""
    while True:
        u_f = rng.uniform(40, 130)
        u_c = u_f * rng.uniform(0.5, 0.95)
        q_c = rng.uniform(800, 2400)
        k_min = q_c * u_f / u_c**2
        k_j = k_min * rng.uniform(1.05, 3.0)
        p = VanAerdeParams(u_f, u_c, q_c, k_j)
        if p.k_j > p.k_c:
            return p


__all__ = [
    "CoverageWarning",
    "FDSample",
    "FitResult",
    "HeadwayConstants",
    "InfeasibleParametersError",
    "SingularParametersError",
    "VanAerdeParams",
    "calibrate_constants",
    "coverage",
    "fd_arrays",
    "fd_curve",
    "fd_point",
    "fit_from_observations",
    "headway",
    "observations_from_lanes",
    "random_params",
]
