"""Mini-batch training with an overshoot penalty, decoupled weight decay and early stopping."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import geo
from .datagen import TLDataset
from .encoders import DTYPE
from .errors import FailureEscalation
from .model import ModelConfig, ModelInputs, Surrogate, loss
from .svgp import expected_loglik, inducing_factor, kl_qp

RMSPE_EPS = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1024
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip: float = 1.0
    lam: float = 10.0
    patience: int = 30
    tol: float = 1e-6
    max_epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "lr_max", "lr_min", "clip", "max_epochs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("weight_decay", "lam", "patience", "tol"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.lr_min < self.lr_max:
            raise ValueError("lr_min must be below lr_max")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


def cosine_lr(t, cfg: TrainConfig) -> float:
    """Single cosine cycle from ``lr_max`` at t=0 down to ``lr_min`` at t=max_epochs."""
    if not 0 <= t <= cfg.max_epochs:
        raise ValueError(f"epoch {t} outside [0, {cfg.max_epochs}]")
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * t / cfg.max_epochs))


def clip_grad_norm(grads, gamma: float):
    """Rescale gradients so their global l2 norm is at most ``gamma``.

    Accepts a list or a dict of tensors; returns the same container type and the
    norm before clipping.
    """
    items = list(grads.values()) if isinstance(grads, dict) else list(grads)
    norm = math.sqrt(sum(float((g.detach() ** 2).sum()) for g in items))
    if norm > gamma:
        scale = gamma / norm
        items = [g * scale for g in items]
    if isinstance(grads, dict):
        return dict(zip(grads.keys(), items)), norm
    return items, norm


def _no_decay(name: str) -> bool:
    # physical coefficients, variational, kernel and likelihood parameters are not shrunk
    return name in ("A", "B") or name.startswith("head.")


@dataclass
class AdamW:
    """Adam moments with decoupled weight decay, keyed by parameter name."""

    cfg: TrainConfig
    step_count: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float) -> None:
        """In-place update of ``params`` (name -> tensor)."""
        c = self.cfg
        self.step_count += 1
        bc1 = 1.0 - c.beta1 ** self.step_count
        bc2 = 1.0 - c.beta2 ** self.step_count
        with torch.no_grad():
            for name, p in params.items():
                g = grads[name]
                if name not in self.exp_avg:
                    self.exp_avg[name] = torch.zeros_like(p)
                    self.exp_avg_sq[name] = torch.zeros_like(p)
                m, v = self.exp_avg[name], self.exp_avg_sq[name]
                m.mul_(c.beta1).add_(g, alpha=1.0 - c.beta1)
                v.mul_(c.beta2).addcmul_(g, g, value=1.0 - c.beta2)
                update = (m / bc1) / (torch.sqrt(v / bc2) + c.adam_eps)
                decay = 0.0 if _no_decay(name) else c.weight_decay
                p.sub_(lr * update + lr * decay * p)


def optimizer_step(params: dict, grads: dict, state: AdamW, lr: float) -> None:
    state.step(params, grads, lr)


# ------------------------------------------------------------------ metrics
@dataclass
class Metrics:
    neg_elbo: float
    mse: float
    rmspe: float
    mean_signed_error: float
    residual_std: float
    coverage_2sigma: float
    n: int

    def to_dict(self):
        return asdict(self)


def error_metrics(pred, target, variance, neg_elbo=float("nan")) -> Metrics:
    """Error statistics of clamped mean predictions against targets."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    err = pred - target
    rmspe = 100.0 * math.sqrt(float(np.mean((err / (target + RMSPE_EPS)) ** 2)))
    band = 2.0 * np.sqrt(np.asarray(variance, dtype=float))
    return Metrics(
        neg_elbo=float(neg_elbo),
        mse=float(np.mean(err ** 2)),
        rmspe=rmspe,
        mean_signed_error=float(np.mean(err)),
        residual_std=float(np.std(err)),
        coverage_2sigma=float(np.mean(np.abs(err) <= band)),
        n=int(err.shape[0]),
    )


def validate(model: Surrogate, data: TLDataset, tl_max: float | None = None, chunk: int = 4096) -> Metrics:
    """Held-out metrics on clamped means.

    The negative ELBO uses the clamped residual means and no overshoot penalty.
    Coverage uses the observation predictive variance (GP variance plus noise).
    """
    if len(data) == 0:
        raise ValueError("validation set is empty")
    tl_max = model.config.tl_max if tl_max is None else tl_max
    was_training = model.training
    model.eval()
    phys_all, mu_all, var_all = [], [], []
    try:
        with torch.no_grad():
            state, hyper = model.head.state(), model.head.hyper()
            chol, _ = inducing_factor(state.Z, hyper)
            for start in range(0, len(data), chunk):
                inputs = model.make_inputs(data.geometry[start:start + chunk], data.bathy[start:start + chunk],
                                           dedupe=model.config.uses_encoders)
                phys, mu, var = model.moments(inputs, chol)
                phys_all.append(phys)
                mu_all.append(mu)
                var_all.append(var)
            phys, mu, var = torch.cat(phys_all), torch.cat(mu_all), torch.cat(var_all)
            y = torch.as_tensor(data.tl, dtype=DTYPE)
            pred = torch.clamp_max(phys + mu, tl_max)
            noise = model.head.noise
            neg_elbo = -expected_loglik(y - phys, pred - phys, var, noise).sum() + kl_qp(state, hyper, chol)
            total_var = var + noise
    finally:
        model.train(was_training)
    return error_metrics(pred.numpy(), data.tl, total_var.numpy(), float(neg_elbo))


# ------------------------------------------------------------------ loop
@dataclass
class TrainResult:
    model: Surrogate
    log: list
    best_epoch: int
    best_val: float
    stopped_early: bool


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; a trailing batch of one row is merged into its predecessor."""
    perm = rng.permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def init_inducing(model: Surrogate, inputs: ModelInputs, tl, rng: np.random.Generator, max_rows: int = 4096) -> None:
    """Place inducing points on encoded training rows and start m at their residuals.

    Normalization running statistics are reset afterwards so that training starts
    from the same state as a fresh model.
    """
    n = len(inputs)
    M = model.head.Z.shape[0]
    pool = rng.choice(n, size=min(n, max(M, min(max_rows, n))), replace=False)
    pool = np.sort(pool)
    sub = inputs.take(pool)
    with torch.no_grad():
        model.train()
        z = model.latent(sub)
        residual = torch.as_tensor(np.asarray(tl)[pool], dtype=DTYPE) - model.physics_mean(sub)
        pick = rng.choice(len(pool), size=M, replace=len(pool) < M)
        model.head.Z.copy_(z[pick])
        model.head.m.copy_(residual[pick])
    for module in model.modules():
        if isinstance(module, torch.nn.modules.batchnorm._BatchNorm):
            module.reset_running_stats()


def train(train_set: TLDataset, val_set: TLDataset, cfg: TrainConfig = TrainConfig(),
          model_config: ModelConfig = ModelConfig(), model: Surrogate | None = None, log_path=None,
          progress=None) -> TrainResult:
    """Fit a surrogate; returns the best-validation model and the per-epoch log."""
    if len(train_set) < 2 or len(val_set) == 0:
        raise ValueError("need at least two training rows and one validation row")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    if model is None:
        ranges = geo.NormRanges.from_arrays(train_set.geometry, train_set.bathy)
        model = Surrogate(model_config, ranges, seed=cfg.seed)
        inputs = model.make_inputs(train_set.geometry, train_set.bathy)
        init_inducing(model, inputs, train_set.tl, rng)
    else:
        inputs = model.make_inputs(train_set.geometry, train_set.bathy)
    tl = torch.as_tensor(train_set.tl, dtype=DTYPE)
    N = len(train_set)
    named = dict(model.trainable())
    opt = AdamW(cfg)

    best_val, best_epoch, best_state = math.inf, 0, copy.deepcopy(model.state_dict())
    patience, log, stopped_early = 0, [], False
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            lr = cosine_lr(epoch - 1, cfg)
            model.train()
            losses, failures, groups = [], 0, batches(N, cfg.batch_size, rng)
            for idx in groups:
                sub = inputs.take(idx)
                try:
                    parts = loss(model, sub, tl[idx], N, cfg.lam)
                    grads = torch.autograd.grad(parts.total, list(named.values()))
                except FailureEscalation:
                    failures += 1
                    continue
                grads, _ = clip_grad_norm(dict(zip(named.keys(), grads)), cfg.clip)
                opt.step(named, grads, lr)
                losses.append(float(parts.total.detach()))
            if failures == len(groups):
                raise FailureEscalation(f"every batch of epoch {epoch} failed factorization")
            metrics = validate(model, val_set)
            if metrics.neg_elbo < best_val - cfg.tol:
                best_val, best_epoch = metrics.neg_elbo, epoch
                best_state = copy.deepcopy(model.state_dict())
                patience = 0
            else:
                patience += 1
            record = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
                      "val_neg_elbo": metrics.neg_elbo, "val_mse": metrics.mse, "val_rmspe": metrics.rmspe,
                      "patience": patience}
            log.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if progress is not None:
                progress(record)
            if patience >= cfg.patience:
                stopped_early = True
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, log, best_epoch, best_val, stopped_early)
