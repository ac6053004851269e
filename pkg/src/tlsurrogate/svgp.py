"""Sparse variational GP residual head.

Non-whitened parameterization: ``q(u) = N(m, S)`` lives directly in inducing
space with ``S = L_S L_S^T``. Positive hyperparameters are stored as
unconstrained reals mapped through softplus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .encoders import DTYPE
from .errors import FailureEscalation

JITTER_START = 1e-6
JITTER_MAX = 1e-2
JITTER_GROWTH = 10.0


def inv_softplus(y):
    y = torch.as_tensor(y, dtype=DTYPE)
    return y + torch.log(-torch.expm1(-y))


@dataclass
class KernelHyper:
    outputscale: torch.Tensor
    lengthscale_mat: torch.Tensor
    lengthscale_rq: torch.Tensor
    alpha: torch.Tensor

    @classmethod
    def make(cls, outputscale=1.0, lengthscale_mat=1.0, lengthscale_rq=1.0, alpha=1.0, dim=1):
        def vec(v):
            v = torch.as_tensor(v, dtype=DTYPE)
            return v.expand(dim).clone() if v.ndim == 0 else v

        return cls(torch.as_tensor(outputscale, dtype=DTYPE), vec(lengthscale_mat), vec(lengthscale_rq),
                   torch.as_tensor(alpha, dtype=DTYPE))


@dataclass
class VariationalState:
    Z: torch.Tensor         # (M, d) inducing locations
    m: torch.Tensor         # (M,)
    S_factor: torch.Tensor  # (M, M) lower triangular, positive diagonal

    @property
    def S(self):
        return self.S_factor @ self.S_factor.T


def kernel_matrix(X1, X2, hyper: KernelHyper):
    """Product of an ARD Matern-1/2 and an ARD rational-quadratic kernel."""
    # cdist without the matmul expansion keeps exact zeros on coincident rows
    r_mat = torch.cdist(X1 / hyper.lengthscale_mat, X2 / hyper.lengthscale_mat,
                        compute_mode="donot_use_mm_for_euclid_dist")
    r2_rq = torch.cdist(X1 / hyper.lengthscale_rq, X2 / hyper.lengthscale_rq,
                        compute_mode="donot_use_mm_for_euclid_dist") ** 2
    k_mat = torch.exp(-r_mat)
    k_rq = (1.0 + r2_rq / (2.0 * hyper.alpha)) ** (-hyper.alpha)
    return hyper.outputscale * k_mat * k_rq


def kernel_eval(z1, z2, hyper: KernelHyper):
    z1 = torch.as_tensor(z1, dtype=DTYPE).reshape(1, -1)
    z2 = torch.as_tensor(z2, dtype=DTYPE).reshape(1, -1)
    return kernel_matrix(z1, z2, hyper)[0, 0]


def chol_with_jitter(K, start=JITTER_START, max_jitter=JITTER_MAX, growth=JITTER_GROWTH):
    """Lower Cholesky factor of ``K + eps I`` with eps escalated until it succeeds.

    Returns ``(L, eps)``; raises :class:`FailureEscalation` past ``max_jitter``.
    """
    eye = torch.eye(K.shape[-1], dtype=K.dtype)
    eps = start
    while eps <= max_jitter * (1.0 + 1e-9):
        L, info = torch.linalg.cholesky_ex(K + eps * eye)
        if int(info) == 0 and bool(torch.isfinite(L).all()):
            return L, eps
        eps *= growth
    raise FailureEscalation(f"Cholesky failed with jitter up to {max_jitter:g}")


def factor_psd(K, min_pivot=JITTER_START):
    """Cholesky factor of ``K`` itself when it is well conditioned, else of ``K + eps I``.

    The plain factor is kept when every squared pivot is at least ``min_pivot``
    times the largest diagonal entry; otherwise the jitter schedule takes over.
    Returns ``(L, eps)`` with ``eps = 0`` for the plain factor.
    """
    L, info = torch.linalg.cholesky_ex(K)
    if int(info) == 0 and bool(torch.isfinite(L).all()):
        if float((torch.diagonal(L.detach()) ** 2).min()) >= min_pivot * float(torch.diagonal(K.detach()).max()):
            return L, 0.0
    return chol_with_jitter(K)


def inducing_factor(Z, hyper: KernelHyper):
    return factor_psd(kernel_matrix(Z, Z, hyper))


def _solve_lower(L, B):
    return torch.linalg.solve_triangular(L, B, upper=False)


def marginal_posterior_batch(latents, state: VariationalState, hyper: KernelHyper, chol=None):
    """Predictive mean and variance of the residual at each latent row."""
    if chol is None:
        chol, _ = inducing_factor(state.Z, hyper)
    Kzx = kernel_matrix(state.Z, latents, hyper)
    A = _solve_lower(chol, Kzx)                                   # L^-1 K_Zx
    W = torch.linalg.solve_triangular(chol.T, A, upper=True)      # K_ZZ^-1 K_Zx
    mean = W.T @ state.m
    var = hyper.outputscale - (A * A).sum(0) + ((state.S_factor.T @ W) ** 2).sum(0)
    return mean, torch.clamp_min(var, 0.0)


def predictive(z_star, state: VariationalState, hyper: KernelHyper):
    z = torch.as_tensor(z_star, dtype=DTYPE).reshape(1, -1)
    mean, var = marginal_posterior_batch(z, state, hyper)
    return mean[0], var[0]


def kl_qp(state: VariationalState, hyper: KernelHyper, chol=None):
    """KL(N(m, S) || N(0, K_ZZ)) with the jittered K_ZZ."""
    if chol is None:
        chol, _ = inducing_factor(state.Z, hyper)
    M = state.m.shape[0]
    trace = (_solve_lower(chol, state.S_factor) ** 2).sum()
    maha = (_solve_lower(chol, state.m.unsqueeze(-1)) ** 2).sum()
    logdet_K = 2.0 * torch.log(torch.diagonal(chol)).sum()
    logdet_S = 2.0 * torch.log(torch.abs(torch.diagonal(state.S_factor))).sum()
    return 0.5 * (trace + maha - M + logdet_K - logdet_S)


def expected_loglik(r, mu, v, noise):
    """E over f ~ N(mu, v) of log N(r | f, noise)."""
    return -0.5 * torch.log(2.0 * math.pi * noise) - (r - mu) ** 2 / (2.0 * noise) - v / (2.0 * noise)


def elbo_minibatch(residuals, latents, state: VariationalState, hyper: KernelHyper, noise, N,
                   chol=None, moments=None):
    """Negative ELBO for a mini-batch: ``(N/B) sum(-E log p) + KL``."""
    B = residuals.shape[0]
    if B == 0 or N < B:
        raise ValueError(f"need 0 < B <= N, got B={B}, N={N}")
    if chol is None:
        chol, _ = inducing_factor(state.Z, hyper)
    if moments is None:
        moments = marginal_posterior_batch(latents, state, hyper, chol)
    mu, v = moments
    nll = -expected_loglik(residuals, mu, v, noise).sum()
    return (N / B) * nll + kl_qp(state, hyper, chol)


class SVGPHead(nn.Module):
    """Trainable inducing points, variational parameters, kernel and likelihood noise."""

    def __init__(self, n_inducing=128, dim=16, outputscale=25.0, lengthscale=1.0, alpha=1.0, noise=1.0,
                 generator: torch.Generator | None = None):
        super().__init__()
        gen = generator if generator is not None else torch.Generator().manual_seed(0)
        self.Z = nn.Parameter(torch.rand(n_inducing, dim, dtype=DTYPE, generator=gen))
        self.m = nn.Parameter(torch.zeros(n_inducing, dtype=DTYPE))
        raw_S = torch.zeros(n_inducing, n_inducing, dtype=DTYPE)
        raw_S.diagonal().fill_(float(inv_softplus(1.0)))
        self.S_raw = nn.Parameter(raw_S)
        self.outputscale_raw = nn.Parameter(inv_softplus(outputscale))
        self.lengthscale_mat_raw = nn.Parameter(inv_softplus(torch.full((dim,), lengthscale, dtype=DTYPE)))
        self.lengthscale_rq_raw = nn.Parameter(inv_softplus(torch.full((dim,), lengthscale, dtype=DTYPE)))
        self.alpha_raw = nn.Parameter(inv_softplus(alpha))
        self.noise_raw = nn.Parameter(inv_softplus(noise))

    @property
    def noise(self):
        return F.softplus(self.noise_raw)

    @property
    def S_factor(self):
        return torch.tril(self.S_raw, -1) + torch.diag(F.softplus(torch.diagonal(self.S_raw)))

    def hyper(self) -> KernelHyper:
        return KernelHyper(F.softplus(self.outputscale_raw), F.softplus(self.lengthscale_mat_raw),
                           F.softplus(self.lengthscale_rq_raw), F.softplus(self.alpha_raw))

    def state(self) -> VariationalState:
        return VariationalState(self.Z, self.m, self.S_factor)

    def set_S_factor(self, L):
        """Store a lower-triangular factor with positive diagonal."""
        with torch.no_grad():
            raw = torch.tril(torch.as_tensor(L, dtype=DTYPE), -1)
            raw.diagonal().copy_(inv_softplus(torch.diagonal(torch.as_tensor(L, dtype=DTYPE))))
            self.S_raw.copy_(raw)

    def factor(self, hyper=None):
        hyper = hyper or self.hyper()
        return inducing_factor(self.Z, hyper)


@dataclass
class ConditionedGP:
    """Residual GP conditioned on point observations (frozen, read-only)."""

    state: VariationalState
    hyper: KernelHyper
    obs_latents: torch.Tensor
    obs_chol: torch.Tensor      # Cholesky of C = cov(z_K, z_K) + diag(noise)
    weights: torch.Tensor       # C^-1 (y_K - mu_GP(z_K))
    covariance: str
    base_chol: torch.Tensor

    def _cross(self, latents):
        k = kernel_matrix(self.obs_latents, latents, self.hyper)
        if self.covariance == "posterior":
            k = _q_cross_cov(self.obs_latents, latents, self.state, self.hyper, self.base_chol, k)
        return k

    def predict(self, latents):
        with torch.no_grad():
            mu, var = marginal_posterior_batch(latents, self.state, self.hyper, self.base_chol)
            k = self._cross(latents)
            mean = mu + k.T @ self.weights
            reduction = (_solve_lower(self.obs_chol, k) ** 2).sum(0)
            return mean, torch.clamp_min(var - reduction, 0.0)


def _q_cross_cov(Xa, Xb, state, hyper, chol, k_ab=None):
    """Covariance of f(Xa), f(Xb) under q(f)."""
    if k_ab is None:
        k_ab = kernel_matrix(Xa, Xb, hyper)
    Ka = kernel_matrix(state.Z, Xa, hyper)
    Kb = kernel_matrix(state.Z, Xb, hyper)
    Wa = torch.cholesky_solve(Ka, chol)
    Wb = torch.cholesky_solve(Kb, chol)
    return k_ab - Ka.T @ Wb + (state.S_factor.T @ Wa).T @ (state.S_factor.T @ Wb)


def condition_on_observations(state: VariationalState, hyper: KernelHyper, noise, obs_latents, obs_residuals,
                              covariance: str = "prior") -> ConditionedGP:
    """Condition the residual GP on K observations.

    ``covariance="prior"`` uses kernel covariances among observation points (the
    classic kriging update); ``"posterior"`` uses the variational posterior
    covariance, which is the exact Gaussian update of q(f).
    ``noise`` is a scalar or a per-observation vector of variances.
    """
    if covariance not in ("prior", "posterior"):
        raise ValueError(f"unknown covariance variant {covariance!r}")
    with torch.no_grad():
        obs_latents = torch.as_tensor(obs_latents, dtype=DTYPE)
        y = torch.as_tensor(obs_residuals, dtype=DTYPE).reshape(-1)
        if obs_latents.shape[0] < 1 or obs_latents.shape[0] != y.shape[0]:
            raise ValueError("need at least one observation with matching residuals")
        if not bool(torch.isfinite(y).all()):
            raise ValueError("observation residuals must be finite")
        base_chol, _ = inducing_factor(state.Z, hyper)
        if covariance == "prior":
            C = kernel_matrix(obs_latents, obs_latents, hyper)
        else:
            C = _q_cross_cov(obs_latents, obs_latents, state, hyper, base_chol)
        C = 0.5 * (C + C.T) + torch.diag(torch.as_tensor(noise, dtype=DTYPE).expand(y.shape[0]))
        L, _ = factor_psd(C)
        mu_obs, _ = marginal_posterior_batch(obs_latents, state, hyper, base_chol)
        weights = torch.cholesky_solve((y - mu_obs).unsqueeze(-1), L).squeeze(-1)
        frozen = VariationalState(state.Z.detach(), state.m.detach(), state.S_factor.detach())
        frozen_hyper = KernelHyper(*(t.detach() for t in (hyper.outputscale, hyper.lengthscale_mat,
                                                          hyper.lengthscale_rq, hyper.alpha)))
        return ConditionedGP(frozen, frozen_hyper, obs_latents, L, weights, covariance, base_chol)
