"""Physics mean + encoders + SVGP head as one trainable transmission-loss surrogate."""

from __future__ import annotations

import datetime
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import geo, physics
from .encoders import DTYPE, Encoder, RawInput
from .errors import FormatError, VersionMismatch
from .svgp import SVGPHead, elbo_minibatch, inducing_factor, marginal_posterior_batch

FORMAT_NAME = "tlsurrogate-model"
FORMAT_VERSION = 1
ABLATIONS = ("full", "zero-mean", "physics-mean-only")


@dataclass(frozen=True)
class ModelConfig:
    d_bathy: int = 16
    d_geo: int = 16
    d_lat: int = 16
    n_inducing: int = 128
    tl_max: float = 200.0
    ablation: str = "full"
    bathy_channels: tuple = (8, 16, 32)
    bathy_head: tuple = (256, 128, 64)
    geo_widths: tuple = (32, 64, 128, 256, 128, 64)
    profile_len: int = 128
    earth_radius_km: float = geo.EARTH_RADIUS_KM
    init_outputscale: float = 25.0
    init_lengthscale: float = 1.0
    init_alpha: float = 1.0
    init_noise: float = 1.0

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        for name in ("bathy_channels", "bathy_head", "geo_widths"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def uses_encoders(self):
        return self.ablation == "full"

    @property
    def uses_physics_mean(self):
        return self.ablation != "zero-mean"


@dataclass
class ModelInputs:
    """Per-row tensors derived once from raw geometry and bathymetry."""

    x_geo: torch.Tensor            # (N, 7) normalized
    omega: torch.Tensor            # (U, 128) normalized profiles
    log10_range: torch.Tensor      # (N,)
    absorption: torch.Tensor       # (N,) thorp(f) * R_km
    omega_index: torch.Tensor | None = None

    def __len__(self):
        return self.x_geo.shape[0]

    def take(self, idx) -> "ModelInputs":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        if self.omega_index is None:
            return ModelInputs(self.x_geo[idx], self.omega[idx], self.log10_range[idx], self.absorption[idx])
        return ModelInputs(self.x_geo[idx], self.omega, self.log10_range[idx], self.absorption[idx],
                           self.omega_index[idx])


@dataclass
class PredictiveTL:
    mean: float
    variance: float
    clamped: bool


@dataclass
class LossParts:
    total: torch.Tensor
    elbo: torch.Tensor
    hinge: torch.Tensor


class Surrogate(nn.Module):
    def __init__(self, config: ModelConfig, norm_ranges: geo.NormRanges, seed: int = 0,
                 metadata: dict | None = None):
        super().__init__()
        self.config = config
        self.norm_ranges = norm_ranges
        self.seed = seed
        self.metadata = dict(metadata or {})
        gen = torch.Generator().manual_seed(seed)
        if config.uses_encoders:
            self.encoder = Encoder(config.d_geo, config.d_bathy, config.d_lat, config.geo_widths,
                                   config.bathy_channels, config.bathy_head, config.profile_len, gen)
        else:
            self.encoder = RawInput()
        use_phys = config.uses_physics_mean
        self.A = nn.Parameter(torch.tensor(20.0 if use_phys else 0.0, dtype=DTYPE), requires_grad=use_phys)
        self.B = nn.Parameter(torch.tensor(1.0 if use_phys else 0.0, dtype=DTYPE), requires_grad=use_phys)
        self.head = SVGPHead(config.n_inducing, self.encoder.latent_dim, config.init_outputscale,
                             config.init_lengthscale, config.init_alpha, config.init_noise, gen)

    # ----------------------------------------------------------------- inputs
    def make_inputs(self, geometry, bathy, dedupe: bool = False) -> ModelInputs:
        """Normalize raw rows (N x 7 geometry, N x 128 depths in meters)."""
        g = np.atleast_2d(np.asarray(geometry, dtype=float))
        b = np.atleast_2d(np.asarray(bathy, dtype=float))
        if b.shape[0] != g.shape[0]:
            raise ValueError("geometry and bathymetry row counts differ")
        x = geo.normalize_geometry(g, self.norm_ranges)
        index = None
        if dedupe:
            b, index = np.unique(b, axis=0, return_inverse=True)
            index = torch.as_tensor(index.reshape(-1), dtype=torch.long)
        omega = geo.normalize_bathy(b, self.norm_ranges)
        R = geo.slant_range_m_array(*g[:, :6].T, radius_km=self.config.earth_radius_km)
        absorption = physics.thorp_alpha(g[:, 6] / 1000.0) * (R / 1000.0)
        return ModelInputs(torch.as_tensor(x, dtype=DTYPE), torch.as_tensor(omega, dtype=DTYPE),
                           torch.as_tensor(np.log10(R), dtype=DTYPE), torch.as_tensor(absorption, dtype=DTYPE),
                           index)

    # ---------------------------------------------------------------- forward
    def latent(self, inputs: ModelInputs):
        return self.encoder(inputs.x_geo, inputs.omega, inputs.omega_index)

    def physics_mean(self, inputs: ModelInputs):
        return self.A * inputs.log10_range + self.B * inputs.absorption

    def moments(self, inputs: ModelInputs, chol=None):
        """Physics mean, GP residual mean and GP variance per row."""
        latents = self.latent(inputs)
        state, hyper = self.head.state(), self.head.hyper()
        if chol is None:
            chol, _ = inducing_factor(state.Z, hyper)
        mu, var = marginal_posterior_batch(latents, state, hyper, chol)
        return self.physics_mean(inputs), mu, var

    def forward(self, inputs: ModelInputs):
        phys, mu, var = self.moments(inputs)
        return phys + mu, var

    def trainable(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]


# ------------------------------------------------------------------ prediction
def predict_arrays(model: Surrogate, geometry, bathy, clamp: bool = True, chunk: int = 4096):
    """Batched prediction; returns ``(mean, variance, clamped)`` numpy arrays.

    Runs in eval mode, deduplicating bathymetry profiles within each chunk.
    """
    g = np.atleast_2d(np.asarray(geometry, dtype=float))
    b = np.atleast_2d(np.asarray(bathy, dtype=float))
    was_training = model.training
    model.eval()
    means, variances = [], []
    try:
        with torch.no_grad():
            state, hyper = model.head.state(), model.head.hyper()
            chol, _ = inducing_factor(state.Z, hyper)
            for start in range(0, g.shape[0], chunk):
                inputs = model.make_inputs(g[start:start + chunk], b[start:start + chunk],
                                           dedupe=model.config.uses_encoders)
                phys, mu, var = model.moments(inputs, chol)
                means.append((phys + mu).numpy())
                variances.append(var.numpy())
    finally:
        model.train(was_training)
    mean = np.concatenate(means) if means else np.empty(0)
    var = np.concatenate(variances) if variances else np.empty(0)
    clamped = np.zeros(mean.shape, dtype=bool)
    if clamp:
        clamped = mean > model.config.tl_max
        mean = np.minimum(mean, model.config.tl_max)
    return mean, var, clamped


def predict(model: Surrogate, src: geo.GeoPoint, rcv: geo.GeoPoint, f_hz: float, omega, clamp: bool = True):
    mean, var, clamped = predict_arrays(model, geo.geometry_row(src, rcv, f_hz)[None, :],
                                        np.asarray(omega, dtype=float)[None, :], clamp)
    return PredictiveTL(float(mean[0]), float(var[0]), bool(clamped[0]))


# ------------------------------------------------------------------ training objective
def residual_target(model: Surrogate, inputs: ModelInputs, tl):
    return torch.as_tensor(tl, dtype=DTYPE) - model.physics_mean(inputs)


def loss(model: Surrogate, inputs: ModelInputs, tl, N: int, lam: float = 10.0, tl_max: float | None = None):
    """Negative ELBO on physics residuals plus the one-sided overshoot penalty."""
    tl_max = model.config.tl_max if tl_max is None else tl_max
    tl = torch.as_tensor(tl, dtype=DTYPE)
    latents = model.latent(inputs)
    state, hyper = model.head.state(), model.head.hyper()
    chol, _ = inducing_factor(state.Z, hyper)
    mu, var = marginal_posterior_batch(latents, state, hyper, chol)
    phys = model.physics_mean(inputs)
    elbo = elbo_minibatch(tl - phys, latents, state, hyper, model.head.noise, N, chol, (mu, var))
    hinge = (torch.clamp_min(phys + mu - tl_max, 0.0) ** 2).mean()
    return LossParts(elbo + lam * hinge, elbo, hinge)


def gradients(model: Surrogate, inputs: ModelInputs, tl, N: int, lam: float = 10.0,
              tl_max: float | None = None) -> dict:
    """Exact first derivatives of the total loss for every trainable parameter."""
    named = model.trainable()
    parts = loss(model, inputs, tl, N, lam, tl_max)
    grads = torch.autograd.grad(parts.total, [p for _, p in named])
    return {name: g for (name, _), g in zip(named, grads)}


# ------------------------------------------------------------------ persistence
_EXACT_NAMES = {
    "head.Z": "inducing.Z",
    "head.m": "variational.m",
    "head.S_raw": "variational.S_factor_raw",
    "head.noise_raw": "noise.raw",
}
_INTERNAL_NAMES = {v: k for k, v in _EXACT_NAMES.items()}


def _file_name(key):
    if key in _EXACT_NAMES:
        return _EXACT_NAMES[key]
    if key.startswith("head."):
        return "kernel." + key[len("head."):]
    return key


def _internal_name(name):
    if name in _INTERNAL_NAMES:
        return _INTERNAL_NAMES[name]
    if name.startswith("kernel."):
        return "head." + name[len("kernel."):]
    return name


def _created_stamp():
    # reproducible-build convention; unset means no timestamp, keeping files byte-stable
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is None:
        return None
    return datetime.datetime.fromtimestamp(int(epoch), datetime.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def header_dict(model: Surrogate) -> dict:
    return {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "created": model.metadata.get("created", _created_stamp()),
        "seed": model.seed,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(model.config).items()},
        "norm_ranges": model.norm_ranges.to_dict(),
        "metadata": {k: v for k, v in sorted(model.metadata.items()) if k != "created"},
        "positive_transform": "softplus",
    }


def dumps(model: Surrogate) -> str:
    lines = ["{", ' "header": ' + json.dumps(header_dict(model), sort_keys=True) + ",", ' "arrays": {']
    entries = []
    for key, tensor in model.state_dict().items():
        t = tensor.detach()
        dtype = "int64" if t.dtype == torch.int64 else "float64"
        payload = {"shape": list(t.shape), "dtype": dtype, "data": t.reshape(-1).tolist()}
        entries.append("  " + json.dumps(_file_name(key)) + ": " + json.dumps(payload))
    lines.append(",\n".join(entries))
    lines.append(" }")
    lines.append("}")
    return "\n".join(lines) + "\n"


def save(model: Surrogate, path) -> None:
    Path(path).write_text(dumps(model))


def loads(text: str) -> Surrogate:
    try:
        doc = json.loads(text)
        header = doc["header"]
        arrays = doc["arrays"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"not a model file: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise FormatError("missing or wrong format tag")
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"file version {header.get('format_version')}, expected {FORMAT_VERSION}")
    try:
        config = ModelConfig(**header["config"])
        ranges = geo.NormRanges.from_dict(header["norm_ranges"])
        metadata = dict(header.get("metadata") or {})
        if header.get("created") is not None:
            metadata["created"] = header["created"]
        model = Surrogate(config, ranges, seed=header["seed"], metadata=metadata)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad header: {exc}") from exc
    state = model.state_dict()
    loaded = {}
    for name, payload in arrays.items():
        key = _internal_name(name)
        if key not in state:
            raise FormatError(f"unexpected array {name!r}")
        try:
            dtype = torch.int64 if payload["dtype"] == "int64" else DTYPE
            t = torch.tensor(payload["data"], dtype=dtype).reshape(payload["shape"])
        except (KeyError, RuntimeError, TypeError, ValueError) as exc:
            raise FormatError(f"bad array {name!r}: {exc}") from exc
        if t.shape != state[key].shape:
            raise FormatError(f"array {name!r} has shape {tuple(t.shape)}, expected {tuple(state[key].shape)}")
        loaded[key] = t
    missing = set(state) - set(loaded)
    if missing:
        raise FormatError(f"missing arrays: {sorted(_file_name(k) for k in missing)}")
    model.load_state_dict(loaded)
    return model


def load(path) -> Surrogate:
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError as exc:
        raise FormatError(str(exc)) from exc
    return loads(text)
