"""Fold sparse hydrophone TL observations into a trained surrogate.

The update is a read-only wrapper: the trained model is untouched and the
conditioned residual GP is rebuilt from the observations when needed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import datagen, geo
from .encoders import DTYPE
from .errors import FormatError
from .model import Surrogate, predict_arrays
from .svgp import ConditionedGP, condition_on_observations

OBS_COLUMNS = ("src_lat", "src_lon", "src_depth", "hyd_lat", "hyd_lon", "hyd_depth", "freq_hz", "tl_obs_db")
SIDECAR_FORMAT = "tlsurrogate-assimilation"
SIDECAR_VERSION = 1


@dataclass
class HydrophoneObs:
    source: geo.GeoPoint
    position: geo.GeoPoint
    f_hz: float
    tl_obs: float
    bathy: np.ndarray | None = field(default=None, repr=False)
    noise_var: float | None = None

    def __post_init__(self):
        if not 0.0 < self.tl_obs <= datagen.TL_CLIP:
            raise ValueError(f"observed TL {self.tl_obs} outside (0, {datagen.TL_CLIP}]")
        if self.noise_var is not None and self.noise_var < 0:
            raise ValueError("noise variance must be non-negative")

    def geometry(self):
        return geo.geometry_row(self.source, self.position, self.f_hz)

    def profile(self, bathy_source):
        if self.bathy is not None:
            return np.asarray(self.bathy, dtype=float)
        if bathy_source is None:
            raise ValueError("observation has no bathymetry profile and no bathymetry source was given")
        return datagen.sample_profile(self.source, self.position, bathy_source)


def read_observations(path) -> list[HydrophoneObs]:
    text = Path(path).read_text()
    header = text.splitlines()[0].strip().split(",") if text.strip() else []
    if header != list(OBS_COLUMNS):
        raise ValueError(f"{path}: expected header {','.join(OBS_COLUMNS)}")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return [HydrophoneObs(geo.GeoPoint(r[0], r[1], r[2]), geo.GeoPoint(r[3], r[4], r[5]), float(r[6]), float(r[7]))
            for r in table]


def write_observations(observations, path) -> None:
    rows = [[o.source.lat, o.source.lon, o.source.depth, o.position.lat, o.position.lon, o.position.depth,
             o.f_hz, o.tl_obs] for o in observations]
    np.savetxt(path, np.asarray(rows, dtype=float).reshape(-1, 8), fmt="%.10g", delimiter=",",
               header=",".join(OBS_COLUMNS), comments="")


@dataclass
class AssimilatedSurrogate:
    """Trained surrogate with its residual GP conditioned on observations."""

    model: Surrogate
    conditioned: ConditionedGP
    observations: list

    def _encode(self, geometry, bathy):
        inputs = self.model.make_inputs(geometry, bathy, dedupe=self.model.config.uses_encoders)
        return self.model.latent(inputs), self.model.physics_mean(inputs)

    def predict_arrays(self, geometry, bathy, clamp: bool = True, chunk: int = 4096):
        """Posterior ``(mean, variance, clamped)`` with the same layout as the base predictor."""
        g = np.atleast_2d(np.asarray(geometry, dtype=float))
        b = np.atleast_2d(np.asarray(bathy, dtype=float))
        self.model.eval()
        means, variances = [], []
        with torch.no_grad():
            for start in range(0, g.shape[0], chunk):
                z, phys = self._encode(g[start:start + chunk], b[start:start + chunk])
                mu, var = self.conditioned.predict(z)
                means.append((phys + mu).numpy())
                variances.append(var.numpy())
        mean = np.concatenate(means)
        var = np.concatenate(variances)
        clamped = np.zeros(mean.shape, dtype=bool)
        if clamp:
            clamped = mean > self.model.config.tl_max
            mean = np.minimum(mean, self.model.config.tl_max)
        return mean, var, clamped


@dataclass
class AssimilationReport:
    prior_mean: np.ndarray
    prior_sigma: np.ndarray
    posterior_mean: np.ndarray
    posterior_sigma: np.ndarray
    observations: np.ndarray
    truth: np.ndarray | None = None

    @property
    def mean_signed_error_before(self):
        return None if self.truth is None else float(np.mean(self.prior_mean - self.truth))

    @property
    def mean_signed_error_after(self):
        return None if self.truth is None else float(np.mean(self.posterior_mean - self.truth))

    def summary(self):
        return {
            "n_queries": int(self.prior_mean.shape[0]),
            "n_observations": int(self.observations.shape[0]),
            "observations_db": self.observations.tolist(),
            "mean_sigma_before": float(np.mean(self.prior_sigma)),
            "mean_sigma_after": float(np.mean(self.posterior_sigma)),
            "sigma_non_increasing": bool(np.all(self.posterior_sigma <= self.prior_sigma + 1e-12)),
            "mean_signed_error_before": self.mean_signed_error_before,
            "mean_signed_error_after": self.mean_signed_error_after,
        }


def assimilate(model: Surrogate, observations, bathy_source=None, covariance: str = "prior", queries=None,
               truth=None):
    """Condition the residual GP on hydrophone observations.

    Observation TL is moved to residual space by subtracting the physics mean.
    Noise defaults to the trained likelihood variance unless an observation
    sets its own. ``queries`` is an optional ``(geometry, bathy)`` pair on which
    a before/after report is computed; ``truth`` holds reference TL there.
    Returns ``(assimilated, report_or_None)``.
    """
    observations = list(observations)
    if not observations:
        raise ValueError("need at least one observation")
    geometry = np.vstack([o.geometry() for o in observations])
    profiles = np.vstack([o.profile(bathy_source) for o in observations])
    y = np.array([o.tl_obs for o in observations])
    model.eval()
    with torch.no_grad():
        inputs = model.make_inputs(geometry, profiles)
        z = model.latent(inputs)
        residuals = torch.as_tensor(y, dtype=DTYPE) - model.physics_mean(inputs)
        default = float(model.head.noise)
        noise = torch.tensor([default if o.noise_var is None else o.noise_var for o in observations], dtype=DTYPE)
        conditioned = condition_on_observations(model.head.state(), model.head.hyper(), noise, z, residuals,
                                                covariance)
    result = AssimilatedSurrogate(model, conditioned, observations)
    report = None
    if queries is not None:
        qg, qb = queries
        prior_mean, prior_var, _ = predict_arrays(model, qg, qb)
        post_mean, post_var, _ = result.predict_arrays(qg, qb)
        report = AssimilationReport(prior_mean, np.sqrt(prior_var), post_mean, np.sqrt(post_var), y,
                                    None if truth is None else np.asarray(truth, dtype=float))
    return result, report


def disk_queries(center: geo.GeoPoint, source: geo.GeoPoint, f_hz: float, radius_km: float, n: int,
                 rng: np.random.Generator, depth_jitter_m: float = 0.0):
    """Raw geometry rows for receivers spread uniformly over a disk around ``center``."""
    r = radius_km * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    bearing = rng.uniform(0.0, 2.0 * np.pi, size=n)
    lat, lon = geo.destination_point(np.full(n, center.lat), np.full(n, center.lon), bearing, r)
    depth = np.clip(center.depth + rng.uniform(-depth_jitter_m, depth_jitter_m, size=n), 0.0, None)
    return np.column_stack([np.full(n, source.lat), np.full(n, source.lon), np.full(n, source.depth),
                            lat, lon, depth, np.full(n, f_hz)])


def write_sidecar(path, base_model_path, observations, covariance: str = "prior") -> None:
    """Persist an assimilation as observations plus a hash of the base model file."""
    digest = hashlib.sha256(Path(base_model_path).read_bytes()).hexdigest()
    doc = {
        "format": SIDECAR_FORMAT,
        "format_version": SIDECAR_VERSION,
        "base_model_sha256": digest,
        "covariance": covariance,
        "observations": [
            {"source": [o.source.lat, o.source.lon, o.source.depth],
             "position": [o.position.lat, o.position.lon, o.position.depth],
             "f_hz": o.f_hz, "tl_obs": o.tl_obs, "noise_var": o.noise_var,
             "bathy": None if o.bathy is None else np.asarray(o.bathy, dtype=float).tolist()}
            for o in observations
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_sidecar(path, model: Surrogate, base_model_path, bathy_source=None) -> AssimilatedSurrogate:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != SIDECAR_FORMAT:
        raise FormatError("not an assimilation sidecar")
    digest = hashlib.sha256(Path(base_model_path).read_bytes()).hexdigest()
    if doc.get("base_model_sha256") != digest:
        raise FormatError("sidecar refers to a different base model")
    obs = [HydrophoneObs(geo.GeoPoint(*o["source"]), geo.GeoPoint(*o["position"]), o["f_hz"], o["tl_obs"],
                         None if o["bathy"] is None else np.asarray(o["bathy"]), o["noise_var"])
           for o in doc["observations"]]
    assimilated, _ = assimilate(model, obs, bathy_source, doc.get("covariance", "prior"))
    return assimilated
