"""Per-leg speed selection that minimizes sound exposure at a receptor.

A TL model here is any callable ``tl(lats, lons, source_depth, receptor, f_hz)``
returning transmission loss (dB) from each ship position to the receptor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datagen, geo, physics
from .model import Surrogate, predict_arrays

SPEED_GRID_POINTS = 200
SERIES_COLUMNS = ("t_s", "lat", "lon", "speed_knots", "sl_db", "tl_db", "rl_db")


@dataclass(frozen=True)
class Route:
    waypoints: tuple
    v0_knots: float
    vmax_knots: float
    source_depth_m: float = 10.0
    vessel_length_m: float = 200.0
    f_hz: float = 400.0
    dt_s: float = 60.0

    def __post_init__(self):
        object.__setattr__(self, "waypoints", tuple(self.waypoints))
        if len(self.waypoints) < 2:
            raise ValueError("a route needs at least two waypoints")
        if not 0 < self.v0_knots <= self.vmax_knots:
            raise ValueError("speeds must satisfy 0 < V0 <= Vmax")
        if self.dt_s <= 0 or self.f_hz <= 0 or self.vessel_length_m <= 0:
            raise ValueError("dt_s, f_hz and vessel_length_m must be positive")

    @property
    def legs(self):
        return list(zip(self.waypoints[:-1], self.waypoints[1:]))

    @property
    def source_spec(self):
        return physics.SourceSpec(vessel_length_m=self.vessel_length_m)


@dataclass(frozen=True)
class Receptor:
    position: geo.GeoPoint


def read_route(path) -> tuple[Route, Receptor]:
    doc = json.loads(Path(path).read_text())
    try:
        waypoints = [geo.GeoPoint(w["lat"], w["lon"]) for w in doc["waypoints"]]
        route = Route(waypoints, float(doc["v0_knots"]), float(doc["vmax_knots"]),
                      source_depth_m=float(doc.get("source_depth_m", 10.0)),
                      vessel_length_m=float(doc.get("vessel_length_m", 200.0)),
                      f_hz=float(doc.get("freq_hz", 400.0)), dt_s=float(doc.get("dt_s", 60.0)))
        r = doc["receptor"]
        receptor = Receptor(geo.GeoPoint(r["lat"], r["lon"], r.get("depth", 0.0)))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"bad route file: {exc}") from exc
    return route, receptor


# ------------------------------------------------------------------ TL models
@dataclass
class ConstantTL:
    value: float

    def __call__(self, lats, lons, source_depth, receptor: geo.GeoPoint, f_hz):
        return np.full(np.shape(lats), float(self.value))


@dataclass
class SurrogateTL:
    """Clamped surrogate mean from ship positions to a fixed receptor."""

    model: Surrogate
    bathy: object

    def __call__(self, lats, lons, source_depth, receptor: geo.GeoPoint, f_hz):
        lats = np.asarray(lats, dtype=float)
        lons = np.asarray(lons, dtype=float)
        n = lats.shape[0]
        geometry = np.column_stack([lats, lons, np.full(n, source_depth), np.full(n, receptor.lat),
                                    np.full(n, receptor.lon), np.full(n, receptor.depth), np.full(n, f_hz)])
        profiles = datagen.sample_profiles(lats, lons, geometry[:, 3], geometry[:, 4], self.bathy)
        mean, _, _ = predict_arrays(self.model, geometry, profiles, clamp=True)
        return mean


# ------------------------------------------------------------------ legs
def leg_time_budget(L_km, v0_knots) -> float:
    """Time in seconds to cover ``L_km`` at the baseline speed."""
    if L_km < 0 or v0_knots <= 0:
        raise ValueError("need L_km >= 0 and v0_knots > 0")
    return L_km * 1000.0 / (v0_knots * physics.KNOT_MS)


def step_count(L_km, V_knots, dt_s) -> int:
    return max(1, math.ceil(L_km * 1000.0 / (V_knots * physics.KNOT_MS * dt_s)))


def sel_db(rl_db, dt_s) -> float:
    """Energy sum of received levels held for ``dt_s`` each."""
    rl = np.asarray(rl_db, dtype=float)
    peak = rl.max()
    return float(peak + 10.0 * np.log10(np.sum(10.0 ** ((rl - peak) / 10.0)) * dt_s))


@dataclass
class LegSamples:
    lats: np.ndarray
    lons: np.ndarray
    tl: np.ndarray


class LegEvaluator:
    """SEL of one leg as a function of speed, caching TL series per step count."""

    def __init__(self, tl_model, a: geo.GeoPoint, b: geo.GeoPoint, receptor: geo.GeoPoint, route: Route):
        if not route.dt_s > 0:
            raise ValueError("dt_s must be positive")
        self.tl_model, self.a, self.b = tl_model, a, b
        self.receptor = getattr(receptor, "position", receptor)
        self.route = route
        self.length_km = geo.haversine_km(a, b)
        self._cache: dict[int, LegSamples] = {}

    def samples(self, n: int) -> LegSamples:
        if n not in self._cache:
            xi = (np.arange(n) + 0.5) / n
            lats = self.a.lat + xi * (self.b.lat - self.a.lat)
            lons = self.a.lon + xi * (self.b.lon - self.a.lon)
            tl = np.asarray(self.tl_model(lats, lons, self.route.source_depth_m, self.receptor, self.route.f_hz),
                            dtype=float)
            self._cache[n] = LegSamples(lats, lons, tl)
        return self._cache[n]

    def source_level(self, V):
        return float(physics.jomopans_echo_sl(self.route.f_hz, V, self.route.vessel_length_m))

    def sel(self, V: float) -> float:
        if not V > 0:
            raise ValueError("speed must be positive")
        s = self.samples(step_count(self.length_km, V, self.route.dt_s))
        return sel_db(self.source_level(V) - s.tl, self.route.dt_s)


def leg_sel(tl_model, a: geo.GeoPoint, b: geo.GeoPoint, V: float, receptor: geo.GeoPoint, route: Route) -> float:
    return LegEvaluator(tl_model, a, b, receptor, route).sel(V)


@dataclass
class LegPlan:
    index: int
    length_km: float
    budget_s: float
    speed_knots: float
    time_s: float
    sel_db: float
    lats: np.ndarray = field(repr=False)
    lons: np.ndarray = field(repr=False)
    sl_db: float = 0.0
    tl_db: np.ndarray = field(default=None, repr=False)

    @property
    def rl_db(self):
        return self.sl_db - self.tl_db

    def summary(self):
        return {"index": self.index, "length_km": self.length_km, "budget_s": self.budget_s,
                "speed_knots": self.speed_knots, "time_s": self.time_s, "sel_db": self.sel_db,
                "n_steps": int(self.tl_db.shape[0])}


def speed_grid(v0, vmax, n_points: int = SPEED_GRID_POINTS):
    if v0 == vmax:
        return np.array([float(v0)])
    return np.linspace(v0, vmax, n_points)


def optimize_leg(tl_model, a: geo.GeoPoint, b: geo.GeoPoint, receptor: geo.GeoPoint, route: Route,
                 index: int = 0, n_points: int = SPEED_GRID_POINTS) -> LegPlan:
    """Grid search over ``[V0, Vmax]``; the first (slowest) minimizer wins ties."""
    ev = LegEvaluator(tl_model, a, b, receptor, route)
    speeds = speed_grid(route.v0_knots, route.vmax_knots, n_points)
    sels = np.array([ev.sel(v) for v in speeds])
    best = int(np.argmin(sels))
    V = float(speeds[best])
    s = ev.samples(step_count(ev.length_km, V, route.dt_s))
    time_s = ev.length_km * 1000.0 / (V * physics.KNOT_MS)
    return LegPlan(index, ev.length_km, leg_time_budget(ev.length_km, route.v0_knots), V, time_s,
                   float(sels[best]), s.lats, s.lons, ev.source_level(V), s.tl)


@dataclass
class VoyagePlan:
    legs: list
    total_time_s: float
    total_sel_db: float

    def series(self) -> np.ndarray:
        """Rows of ``SERIES_COLUMNS``; each sample is stamped at its midpoint time."""
        rows, offset = [], 0.0
        for leg in self.legs:
            n = leg.tl_db.shape[0]
            t = offset + (np.arange(n) + 0.5) / n * leg.time_s
            rows.append(np.column_stack([t, leg.lats, leg.lons, np.full(n, leg.speed_knots),
                                         np.full(n, leg.sl_db), leg.tl_db, leg.rl_db]))
            offset += leg.time_s
        return np.vstack(rows)

    def summary(self):
        return {"legs": [leg.summary() for leg in self.legs], "total_time_s": self.total_time_s,
                "total_sel_db": self.total_sel_db}

    def write(self, plan_path, series_path) -> None:
        Path(plan_path).write_text(json.dumps(self.summary(), indent=2) + "\n")
        np.savetxt(series_path, self.series(), fmt="%.6f", delimiter=",", header=",".join(SERIES_COLUMNS),
                   comments="")


def optimize_route(tl_model, route: Route, receptor: geo.GeoPoint, n_points: int = SPEED_GRID_POINTS) -> VoyagePlan:
    legs = [optimize_leg(tl_model, a, b, receptor, route, i, n_points) for i, (a, b) in enumerate(route.legs)]
    sels = np.array([leg.sel_db for leg in legs])
    peak = sels.max()
    total_sel = float(peak + 10.0 * np.log10(np.sum(10.0 ** ((sels - peak) / 10.0))))
    return VoyagePlan(legs, float(sum(leg.time_s for leg in legs)), total_sel)
