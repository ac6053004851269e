"""Synthetic stand-in for the ray-tracing data pipeline.

Provides analytic or gridded bathymetry, profile sampling along a source-receiver
track, a closed-form transmission-loss oracle, third-octave bands and dataset
generation with train/val/test splits.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geo, physics
from .errors import OutOfGrid

PROFILE_LEN = 128
TL_CLIP = 200.0
TL_FLOOR = 1e-3

_NOMINAL_MANTISSAS = (1.0, 1.25, 1.6, 2.0, 2.5, 3.15, 4.0, 5.0, 6.3, 8.0)


def third_octave_bands(f_lo: float, f_hi: float) -> list[float]:
    """Nominal (base-10) one-third-octave centre frequencies in ``[f_lo, f_hi]``."""
    if f_lo > f_hi:
        raise ValueError("f_lo must not exceed f_hi")
    out = []
    for decade in range(-1, 6):
        for mant in _NOMINAL_MANTISSAS:
            f = round(mant * 10.0 ** decade, 6)
            if f_lo * (1 - 1e-9) <= f <= f_hi * (1 + 1e-9):
                out.append(f)
    return out


# ------------------------------------------------------------------ bathymetry
@dataclass(frozen=True)
class AnalyticBathymetry:
    base: float = 50.0
    amplitude: float = 300.0
    a: float = 40.0
    b: float = 40.0
    min_depth: float = 10.0
    max_depth: float = 400.0

    def depth(self, lat, lon):
        lat_r, lon_r = np.radians(lat), np.radians(lon)
        d = self.base + self.amplitude * (0.5 + 0.5 * np.sin(self.a * lat_r) * np.cos(self.b * lon_r))
        return np.clip(d, self.min_depth, self.max_depth)

    def to_dict(self):
        return {"kind": "analytic", **asdict(self)}


@dataclass(frozen=True)
class GridBathymetry:
    """Regular lat/lon grid with bilinear interpolation; ``depths[i, j]`` at (lat0 + i dlat, lon0 + j dlon)."""

    lat0: float
    lon0: float
    dlat: float
    dlon: float
    depths: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=float)
        if d.ndim != 2 or min(d.shape) < 2:
            raise ValueError("grid needs at least 2 x 2 depths")
        if not (self.dlat > 0 and self.dlon > 0):
            raise ValueError("grid axes must be strictly increasing")
        object.__setattr__(self, "depths", d)

    @property
    def shape(self):
        return self.depths.shape

    def depth(self, lat, lon):
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        nrows, ncols = self.depths.shape
        fi = (lat - self.lat0) / self.dlat
        fj = (lon - self.lon0) / self.dlon
        eps = 1e-9
        if np.any((fi < -eps) | (fi > nrows - 1 + eps) | (fj < -eps) | (fj > ncols - 1 + eps)):
            raise OutOfGrid("coordinate outside bathymetry grid")
        fi = np.clip(fi, 0, nrows - 1)
        fj = np.clip(fj, 0, ncols - 1)
        i0 = np.minimum(np.floor(fi).astype(int), nrows - 2)
        j0 = np.minimum(np.floor(fj).astype(int), ncols - 2)
        ti, tj = fi - i0, fj - j0
        d = self.depths
        return ((1 - ti) * (1 - tj) * d[i0, j0] + (1 - ti) * tj * d[i0, j0 + 1]
                + ti * (1 - tj) * d[i0 + 1, j0] + ti * tj * d[i0 + 1, j0 + 1])

    def to_dict(self):
        return {"kind": "grid", "lat0": self.lat0, "lon0": self.lon0, "dlat": self.dlat, "dlon": self.dlon,
                "nrows": self.shape[0], "ncols": self.shape[1]}


def write_grid(grid: GridBathymetry, path) -> None:
    """Plain text: one header line ``lat0 lon0 dlat dlon nrows ncols`` then row-major depths."""
    nrows, ncols = grid.shape
    with open(path, "w") as fh:
        fh.write(f"{grid.lat0!r} {grid.lon0!r} {grid.dlat!r} {grid.dlon!r} {nrows} {ncols}\n")
        np.savetxt(fh, grid.depths, fmt="%.17g")


def read_grid(path) -> GridBathymetry:
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 6:
            raise ValueError(f"{path}: header needs 6 fields")
        lat0, lon0, dlat, dlon = map(float, head[:4])
        nrows, ncols = int(head[4]), int(head[5])
        depths = np.loadtxt(fh, ndmin=2)
    if depths.shape != (nrows, ncols):
        raise ValueError(f"{path}: expected {nrows}x{ncols} depths, got {depths.shape}")
    return GridBathymetry(lat0, lon0, dlat, dlon, depths)


def bathy_from_dict(d: dict):
    if d.get("kind", "analytic") == "analytic":
        return AnalyticBathymetry(**{k: v for k, v in d.items() if k != "kind"})
    raise ValueError("grid bathymetry must be loaded from its file")


def synth_depth(lat, lon, source=None):
    return (source or AnalyticBathymetry()).depth(lat, lon)


def profile_fractions(n: int = PROFILE_LEN) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def sample_profiles(src_lat, src_lon, rcv_lat, rcv_lon, bathy, n: int = PROFILE_LEN) -> np.ndarray:
    """Depth profiles (N x n) at midpoint fractions along each source-receiver track."""
    xi = profile_fractions(n)
    s_lat = np.asarray(src_lat, dtype=float).reshape(-1, 1)
    s_lon = np.asarray(src_lon, dtype=float).reshape(-1, 1)
    lat = s_lat + xi * (np.asarray(rcv_lat, dtype=float).reshape(-1, 1) - s_lat)
    lon = s_lon + xi * (np.asarray(rcv_lon, dtype=float).reshape(-1, 1) - s_lon)
    return bathy.depth(lat, lon)


def sample_profile(src: geo.GeoPoint, rcv: geo.GeoPoint, bathy, n: int = PROFILE_LEN) -> np.ndarray:
    return sample_profiles(src.lat, src.lon, rcv.lat, rcv.lon, bathy, n)[0]


# ------------------------------------------------------------------ oracle
@dataclass(frozen=True)
class OracleConfig:
    """Coefficients of the synthetic ground truth (dB, dB/km and meters)."""

    c_b: float = 2.0
    d_ref: float = 100.0
    c_i: float = 3.0
    lambda0: float = 500.0
    c_z: float = 5.0
    sigma_data: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("c_b", "c_i", "c_z", "sigma_data"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.d_ref <= 0 or self.lambda0 <= 0:
            raise ValueError("d_ref and lambda0 must be positive")


def oracle_tl_arrays(geometry, profiles, cfg: OracleConfig = OracleConfig(), noisy: bool = False,
                     rng: np.random.Generator | None = None, radius_km: float = geo.EARTH_RADIUS_KM):
    """Oracle TL for N raw geometry rows and their N x 128 depth profiles."""
    g = np.atleast_2d(np.asarray(geometry, dtype=float))
    omega = np.atleast_2d(np.asarray(profiles, dtype=float))
    R_m = geo.slant_range_m_array(*g[:, :6].T, radius_km=radius_km)
    R_km = R_m / 1000.0
    f_hz = g[:, 6]
    shallow = np.maximum(0.0, 1.0 - omega / cfg.d_ref).mean(axis=1)
    wavelength = cfg.lambda0 * np.sqrt(1000.0 / f_hz)
    tl = (20.0 * np.log10(R_m)
          + physics.thorp_alpha(f_hz / 1000.0) * R_km
          + cfg.c_b * R_km * shallow
          + cfg.c_i * np.sin(2.0 * np.pi * R_m / wavelength)
          + cfg.c_z * np.sin(np.pi * g[:, 5] / 110.0) * np.sin(np.pi * g[:, 2] / 30.0))
    if noisy and cfg.sigma_data > 0:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        tl = tl + rng.normal(0.0, cfg.sigma_data, size=tl.shape)
    return np.clip(tl, TL_FLOOR, TL_CLIP)


def oracle_tl(src: geo.GeoPoint, rcv: geo.GeoPoint, f_hz: float, omega, cfg: OracleConfig = OracleConfig(),
              noisy: bool = False, rng: np.random.Generator | None = None) -> float:
    return float(oracle_tl_arrays(geo.geometry_row(src, rcv, f_hz), np.asarray(omega)[None, :], cfg, noisy, rng)[0])


# ------------------------------------------------------------------ datasets
CSV_COLUMNS = list(geo.GEOMETRY_COLUMNS) + [f"bathy_{k:03d}" for k in range(PROFILE_LEN)] + ["tl_db"]
_FMT = ["%.8f", "%.8f", "%.4f", "%.8f", "%.8f", "%.4f", "%.6g"] + ["%.4f"] * PROFILE_LEN + ["%.6f"]


@dataclass
class TLDataset:
    """Columnar rows: raw geometry (N x 7), depth profiles (N x 128), target TL (N,)."""

    geometry: np.ndarray
    bathy: np.ndarray
    tl: np.ndarray

    def __post_init__(self):
        self.geometry = np.atleast_2d(np.asarray(self.geometry, dtype=float))
        self.bathy = np.atleast_2d(np.asarray(self.bathy, dtype=float))
        self.tl = np.asarray(self.tl, dtype=float).reshape(-1)
        n = self.tl.shape[0]
        if self.geometry.shape != (n, 7) or self.bathy.shape != (n, PROFILE_LEN):
            raise ValueError("inconsistent dataset shapes")

    def __len__(self):
        return self.tl.shape[0]

    def subset(self, idx) -> "TLDataset":
        return TLDataset(self.geometry[idx], self.bathy[idx], self.tl[idx])

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        table = np.column_stack([self.geometry, self.bathy, self.tl])
        np.savetxt(buf, table, fmt=_FMT, delimiter=",", header=",".join(CSV_COLUMNS), comments="")
        return buf.getvalue()

    @classmethod
    def from_csv_text(cls, text: str) -> "TLDataset":
        lines = text.splitlines()
        if not lines or lines[0].strip().split(",") != CSV_COLUMNS:
            raise ValueError("dataset header does not match the expected columns")
        if len(lines) == 1:
            table = np.empty((0, len(CSV_COLUMNS)))
        else:
            table = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1, ndmin=2)
        return cls(table[:, :7], table[:, 7:7 + PROFILE_LEN], table[:, -1])

    def write_csv(self, path) -> str:
        text = self.to_csv_text()
        Path(path).write_text(text)
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def read_csv(cls, path) -> "TLDataset":
        return cls.from_csv_text(Path(path).read_text())

    def sha256(self) -> str:
        return hashlib.sha256(self.to_csv_text().encode()).hexdigest()


@dataclass(frozen=True)
class DatasetSpec:
    n_sources: int = 20
    receivers_per_source: int = 172
    max_radius_km: float = 100.0
    max_rcv_depth: float = 110.0
    f_lo: float = 12.5
    f_hi: float = 8000.0
    fractions: tuple = (0.75, 0.15, 0.10)
    seed: int = 0
    route_start: tuple = (48.45, -124.75)
    route_end: tuple = (47.65, -122.45)
    src_depth_range: tuple = (5.0, 25.0)
    route_jitter_km: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(self.fractions))
        object.__setattr__(self, "route_start", tuple(self.route_start))
        object.__setattr__(self, "route_end", tuple(self.route_end))
        object.__setattr__(self, "src_depth_range", tuple(self.src_depth_range))
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) < 0:
            raise ValueError("split fractions must be three non-negative values summing to 1")
        if self.max_radius_km <= 0 or self.max_rcv_depth <= 0:
            raise ValueError("radius and receiver depth must be positive")
        if self.n_sources < 1 or self.receivers_per_source < 1:
            raise ValueError("need at least one source and one receiver")

    @property
    def bands(self):
        return third_octave_bands(self.f_lo, self.f_hi)

    @property
    def n_rows(self):
        return self.n_sources * self.receivers_per_source * len(self.bands)


def split_counts(n: int, fractions) -> tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def place_sources(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    """(n_sources, 3) lat/lon/depth spread along the route with small lateral jitter."""
    n = spec.n_sources
    xi = (np.arange(n) + rng.uniform(0.25, 0.75, size=n)) / n
    (lat_a, lon_a), (lat_b, lon_b) = spec.route_start, spec.route_end
    lat = lat_a + xi * (lat_b - lat_a)
    lon = lon_a + xi * (lon_b - lon_a)
    bearing = rng.uniform(0.0, 2.0 * np.pi, size=n)
    lat, lon = geo.destination_point(lat, lon, bearing, rng.uniform(0.0, spec.route_jitter_km, size=n))
    depth = rng.uniform(*spec.src_depth_range, size=n)
    return np.column_stack([lat, lon, depth])


def generate_rows(spec: DatasetSpec, bathy=None, oracle_cfg: OracleConfig = OracleConfig()) -> TLDataset:
    """All source x receiver x band rows, in generation order."""
    bathy = bathy or AnalyticBathymetry()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    sources = place_sources(spec, rng)
    n_rcv = spec.receivers_per_source
    src = np.repeat(sources, n_rcv, axis=0)
    radius = spec.max_radius_km * np.sqrt(rng.uniform(0.0, 1.0, size=src.shape[0]))
    bearing = rng.uniform(0.0, 2.0 * np.pi, size=src.shape[0])
    rcv_lat, rcv_lon = geo.destination_point(src[:, 0], src[:, 1], bearing, radius)
    rcv_depth = rng.uniform(0.0, spec.max_rcv_depth, size=src.shape[0])
    profiles = sample_profiles(src[:, 0], src[:, 1], rcv_lat, rcv_lon, bathy)

    bands = np.asarray(spec.bands)
    n_pairs, n_bands = src.shape[0], bands.shape[0]
    pair_geometry = np.column_stack([src, rcv_lat, rcv_lon, rcv_depth])
    geometry = np.column_stack([np.repeat(pair_geometry, n_bands, axis=0), np.tile(bands, n_pairs)])
    rows_bathy = np.repeat(profiles, n_bands, axis=0)
    noise_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, oracle_cfg.seed, 1]))
    tl = oracle_tl_arrays(geometry, rows_bathy, oracle_cfg, noisy=True, rng=noise_rng)
    # round-trip through the text format so in-memory rows equal what is written to disk
    return TLDataset.from_csv_text(TLDataset(geometry, rows_bathy, tl).to_csv_text())


def split_dataset(data: TLDataset, fractions, seed: int) -> dict[str, TLDataset]:
    n = len(data)
    perm = np.random.default_rng(np.random.SeedSequence([seed, 2])).permutation(n)
    n_train, n_val, _ = split_counts(n, fractions)
    return {
        "train": data.subset(np.sort(perm[:n_train])),
        "val": data.subset(np.sort(perm[n_train:n_train + n_val])),
        "test": data.subset(np.sort(perm[n_train + n_val:])),
    }


def generate_dataset(spec: DatasetSpec = DatasetSpec(), bathy=None, oracle_cfg: OracleConfig = OracleConfig(),
                     out_dir=None):
    """Generate, split and optionally write ``{train,val,test}.csv`` plus ``manifest.json``.

    Returns ``(splits, manifest)``.
    """
    if out_dir is not None and not Path(out_dir).is_dir():
        raise FileNotFoundError(f"output directory {out_dir} does not exist")
    bathy = bathy or AnalyticBathymetry()
    rows = generate_rows(spec, bathy, oracle_cfg)
    splits = split_dataset(rows, spec.fractions, spec.seed)
    ranges = geo.NormRanges.from_arrays(splits["train"].geometry, splits["train"].bathy)
    hashes = {}
    if out_dir is not None:
        out = Path(out_dir)
        for name, part in splits.items():
            hashes[f"{name}.csv"] = part.write_csv(out / f"{name}.csv")
    else:
        hashes = {f"{name}.csv": part.sha256() for name, part in splits.items()}
    n_bands = len(spec.bands)
    manifest = {
        "spec": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()},
        "oracle": asdict(oracle_cfg),
        "bathymetry": bathy.to_dict(),
        "seeds": {"dataset": spec.seed, "oracle_noise": oracle_cfg.seed},
        "bands_hz": spec.bands,
        "n_bands": n_bands,
        "band_note": f"{n_bands} nominal third-octave centres in [{spec.f_lo:g}, {spec.f_hi:g}] Hz "
                     "(a 30-band count would need a non-nominal extra centre)",
        "row_counts": {"total": len(rows), **{name: len(part) for name, part in splits.items()}},
        "split_fractions": {name: (len(part) / len(rows) if len(rows) else 0.0) for name, part in splits.items()},
        "norm_ranges": ranges.to_dict(),
        "file_sha256": hashes,
    }
    if out_dir is not None:
        (Path(out_dir) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return splits, manifest


def load_splits(data_dir) -> tuple[dict[str, TLDataset], dict]:
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    splits = {name: TLDataset.read_csv(d / f"{name}.csv") for name in ("train", "val", "test")}
    return splits, manifest

