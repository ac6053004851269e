"""Spherical geodesy, path sampling and feature normalization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfRange

EARTH_RADIUS_KM = 6371.0
REFERENCE_DISTANCE_M = 1.0

# column order of the raw geometry block (N x 7) used throughout the package
GEOMETRY_COLUMNS = ("src_lat", "src_lon", "src_depth", "rcv_lat", "rcv_lon", "rcv_depth", "freq_hz")


@dataclass(frozen=True)
class GeoPoint:
    """Latitude/longitude in degrees, depth in meters (positive down)."""

    lat: float
    lon: float
    depth: float = 0.0

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")
        if not (math.isfinite(self.depth) and self.depth >= 0.0):
            raise ValueError(f"depth {self.depth} must be finite and >= 0")

    def with_depth(self, depth: float) -> "GeoPoint":
        return GeoPoint(self.lat, self.lon, depth)


def haversine_km_array(lat1, lon1, lat2, lon2, radius_km: float = EARTH_RADIUS_KM):
    """Vectorized great-circle distance in km; inputs in degrees."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2.0) ** 2
    return 2.0 * radius_km * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def haversine_km(a: GeoPoint, b: GeoPoint, radius_km: float = EARTH_RADIUS_KM) -> float:
    return float(haversine_km_array(a.lat, a.lon, b.lat, b.lon, radius_km))


def slant_range_m_array(src_lat, src_lon, src_depth, rcv_lat, rcv_lon, rcv_depth,
                        radius_km: float = EARTH_RADIUS_KM):
    horizontal = 1000.0 * haversine_km_array(src_lat, src_lon, rcv_lat, rcv_lon, radius_km)
    dz = np.asarray(rcv_depth, dtype=float) - np.asarray(src_depth, dtype=float)
    return np.maximum(np.hypot(horizontal, dz), REFERENCE_DISTANCE_M)


def slant_range_m(src: GeoPoint, rcv: GeoPoint, radius_km: float = EARTH_RADIUS_KM) -> float:
    """3-D source-receiver distance, floored at the 1 m reference distance."""
    return float(slant_range_m_array(src.lat, src.lon, src.depth, rcv.lat, rcv.lon, rcv.depth, radius_km))


def interpolate_geodesic(a: GeoPoint, b: GeoPoint, xi: float) -> GeoPoint:
    """Componentwise affine interpolation ``a + xi (b - a)``."""
    if not 0.0 <= xi <= 1.0:
        raise ValueError(f"xi={xi} outside [0, 1]")
    return GeoPoint(
        a.lat + xi * (b.lat - a.lat),
        a.lon + xi * (b.lon - a.lon),
        a.depth + xi * (b.depth - a.depth),
    )


def destination_point(lat, lon, bearing_rad, distance_km, radius_km: float = EARTH_RADIUS_KM):
    """Point reached by travelling ``distance_km`` along an initial bearing (vectorized)."""
    phi1, lmb1 = np.radians(lat), np.radians(lon)
    delta = np.asarray(distance_km) / radius_km
    phi2 = np.arcsin(np.sin(phi1) * np.cos(delta) + np.cos(phi1) * np.sin(delta) * np.cos(bearing_rad))
    lmb2 = lmb1 + np.arctan2(np.sin(bearing_rad) * np.sin(delta) * np.cos(phi1),
                             np.cos(delta) - np.sin(phi1) * np.sin(phi2))
    lon2 = (np.degrees(lmb2) + 540.0) % 360.0 - 180.0
    return np.degrees(phi2), lon2


@dataclass(frozen=True)
class NormRanges:
    """Min/max pairs for the min-max scaled inputs.

    Values up to ``tolerance * (max - min)`` beyond an edge are clipped to the
    edge; anything further out raises :class:`OutOfRange`.
    """

    src_depth: tuple[float, float]
    rcv_depth: tuple[float, float]
    bathy: tuple[float, float]
    freq: tuple[float, float]
    tolerance: float = field(default=0.05)

    def __post_init__(self):
        for name in ("src_depth", "rcv_depth", "bathy", "freq"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and hi > lo):
                raise ValueError(f"NormRanges.{name} needs min < max, got {(lo, hi)}")

    @classmethod
    def from_arrays(cls, geometry: np.ndarray, bathy: np.ndarray, tolerance: float = 0.05) -> "NormRanges":
        geometry = np.asarray(geometry, dtype=float)
        bathy = np.asarray(bathy, dtype=float)

        def span(values):
            lo, hi = float(values.min()), float(values.max())
            if hi <= lo:  # a constant column still needs a non-empty range
                lo, hi = lo - 0.5, hi + 0.5
            return lo, hi

        return cls(
            src_depth=span(geometry[:, 2]),
            rcv_depth=span(geometry[:, 5]),
            bathy=span(bathy),
            freq=span(geometry[:, 6]),
            tolerance=tolerance,
        )

    def to_dict(self) -> dict:
        return {
            "src_depth": list(self.src_depth),
            "rcv_depth": list(self.rcv_depth),
            "bathy": list(self.bathy),
            "freq": list(self.freq),
            "tolerance": self.tolerance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormRanges":
        return cls(
            src_depth=tuple(d["src_depth"]),
            rcv_depth=tuple(d["rcv_depth"]),
            bathy=tuple(d["bathy"]),
            freq=tuple(d["freq"]),
            tolerance=d.get("tolerance", 0.05),
        )


def _minmax(values, bounds, tolerance, name):
    lo, hi = bounds
    values = np.asarray(values, dtype=float)
    slack = tolerance * (hi - lo)
    bad = (values < lo - slack) | (values > hi + slack) | ~np.isfinite(values)
    if np.any(bad):
        worst = values[bad].flat[0]
        raise OutOfRange(f"{name}={worst} outside trained range [{lo}, {hi}]")
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


def normalize_lat(lat):
    return (np.asarray(lat, dtype=float) + 90.0) / 180.0


def normalize_lon(lon):
    return (np.asarray(lon, dtype=float) + 180.0) / 360.0


def normalize_geometry(geometry: np.ndarray, ranges: NormRanges) -> np.ndarray:
    """Map raw N x 7 geometry rows (see ``GEOMETRY_COLUMNS``) into [0, 1]."""
    g = np.atleast_2d(np.asarray(geometry, dtype=float))
    if g.shape[-1] != 7:
        raise ValueError(f"geometry rows need 7 columns, got {g.shape[-1]}")
    if np.any(np.abs(g[:, [0, 3]]) > 90.0) or np.any(np.abs(g[:, [1, 4]]) > 180.0):
        raise OutOfRange("latitude/longitude outside the globe")
    tol = ranges.tolerance
    return np.column_stack([
        normalize_lat(g[:, 0]),
        normalize_lon(g[:, 1]),
        _minmax(g[:, 2], ranges.src_depth, tol, "src_depth"),
        normalize_lat(g[:, 3]),
        normalize_lon(g[:, 4]),
        _minmax(g[:, 5], ranges.rcv_depth, tol, "rcv_depth"),
        _minmax(g[:, 6], ranges.freq, tol, "freq_hz"),
    ])


def denormalize_geometry(features: np.ndarray, ranges: NormRanges) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=float))

    def unscale(v, bounds):
        lo, hi = bounds
        return lo + v * (hi - lo)

    return np.column_stack([
        x[:, 0] * 180.0 - 90.0,
        x[:, 1] * 360.0 - 180.0,
        unscale(x[:, 2], ranges.src_depth),
        x[:, 3] * 180.0 - 90.0,
        x[:, 4] * 360.0 - 180.0,
        unscale(x[:, 5], ranges.rcv_depth),
        unscale(x[:, 6], ranges.freq),
    ])


def normalize_features(src: GeoPoint, rcv: GeoPoint, f_hz: float, ranges: NormRanges) -> np.ndarray:
    """Seven-entry feature vector in [0, 1] for a single source/receiver/frequency."""
    row = [[src.lat, src.lon, src.depth, rcv.lat, rcv.lon, rcv.depth, f_hz]]
    return normalize_geometry(np.asarray(row), ranges)[0]


def normalize_bathy(profiles: np.ndarray, ranges: NormRanges) -> np.ndarray:
    return _minmax(profiles, ranges.bathy, ranges.tolerance, "bathymetry depth")


def denormalize_bathy(profiles: np.ndarray, ranges: NormRanges) -> np.ndarray:
    lo, hi = ranges.bathy
    return lo + np.asarray(profiles, dtype=float) * (hi - lo)


def geometry_row(src: GeoPoint, rcv: GeoPoint, f_hz: float) -> np.ndarray:
    return np.array([src.lat, src.lon, src.depth, rcv.lat, rcv.lon, rcv.depth, f_hz], dtype=float)
