"""
HLSIRM - Likelihood and Prior Densities

Linear predictor, Bernoulli-logit likelihood and the full prior stack.
Sums run in ascending group order so results are reproducible bit for bit.
"""
import math

import numpy as np
from scipy import linalg, stats
from scipy.special import log_expit, multigammaln

from models.domain import ModelState, ResponseDataset
from models.schemas import Hyperparameters
from utils.linalg import cholesky_logdet, mvn_logpdf_each, mvn_logpdf_rows, require_spd


def linear_predictor(state: ModelState, k: int, i: int, j: int) -> float:
    """alpha_i(k) + beta_j + <z_i(k), w_j> + eps_ij(k)."""
    state.check_indices(k, i, j)
    eta = (
        state.individual_intercepts[k][i]
        + state.item_intercepts[j]
        + float(state.individual_positions[k][i] @ state.item_positions[j])
    )
    if state.residuals is not None:
        eta += state.residuals[k][i, j]
    return float(eta)


def group_eta(state: ModelState, k: int, include_residuals: bool = True) -> np.ndarray:
    """Linear predictor matrix of group k (n_k x p)."""
    eta = (
        state.individual_intercepts[k][:, None]
        + state.item_intercepts[None, :]
        + state.individual_positions[k] @ state.item_positions.T
    )
    if include_residuals and state.residuals is not None:
        eta = eta + state.residuals[k]
    return eta


def group_log_target(state: ModelState, data: ResponseDataset, hp: Hyperparameters, k: int) -> float:
    """Log posterior restricted to the terms touching the block of group k."""
    return group_log_likelihood(state, data, k) + group_prior(state, hp, k)


def item_log_likelihood(state: ModelState, data: ResponseDataset) -> np.ndarray:
    """Column sums of the cell log-likelihood over all groups (length p)."""
    total = np.zeros(state.p)
    for k, g in enumerate(data.groups):
        total += cell_log_likelihood(g.Y, group_eta(state, k)).sum(axis=0)
    return total


def cell_log_likelihood(Y: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Per-cell y*log(p) + (1-y)*log(1-p); zero where Y is missing."""
    observed = ~np.isnan(Y)
    y = np.where(observed, Y, 0.0)
    ll = y * log_expit(eta) + (1.0 - y) * log_expit(-eta)
    return np.where(observed, ll, 0.0)


def group_log_likelihood(state: ModelState, data: ResponseDataset, k: int) -> float:
    state.check_indices(k)
    return float(np.sum(cell_log_likelihood(data.groups[k].Y, group_eta(state, k))))


def log_likelihood(state: ModelState, data: ResponseDataset) -> float:
    state.check_shapes(data)
    total = 0.0
    for k in range(data.K):
        total += group_log_likelihood(state, data, k)
    return total


# ============== Priors ==============

def invwishart_logpdf(psi: np.ndarray, df: float, scale: np.ndarray) -> float:
    """Inverse-Wishart log-density from Cholesky log-determinants."""
    D = psi.shape[0]
    psi_chol, psi_logdet = cholesky_logdet(psi)
    _, scale_logdet = cholesky_logdet(scale)
    trace = float(np.trace(linalg.cho_solve((psi_chol, True), scale)))
    return (
        0.5 * df * scale_logdet
        - 0.5 * df * D * math.log(2.0)
        - float(multigammaln(0.5 * df, D))
        - 0.5 * (df + D + 1) * psi_logdet
        - 0.5 * trace
    )


def group_prior(state: ModelState, hp: Hyperparameters, k: int) -> float:
    """Prior terms touching the block of group k (intercepts and positions)."""
    sigma_k = math.sqrt(state.group_variances[k])
    total = float(stats.norm.logpdf(state.group_intercepts[k], hp.alpha0, hp.sigma_alpha))
    total += float(np.sum(stats.norm.logpdf(state.individual_intercepts[k], state.group_intercepts[k], sigma_k)))
    total += mvn_logpdf_rows(state.group_positions[k], hp.z0_vec, state.psi_z / hp.kappa0)
    total += mvn_logpdf_rows(state.individual_positions[k], state.group_positions[k], state.psi_z)
    return total


def item_prior_each(
    beta: np.ndarray, w: np.ndarray, hp: Hyperparameters, psi_w: np.ndarray
) -> np.ndarray:
    """Per-item prior log-density of (beta_j, w_j)."""
    return stats.norm.logpdf(beta, hp.beta0, hp.tau) + mvn_logpdf_each(w, hp.w0_vec, psi_w)


def residual_prior(residuals: np.ndarray, phi: float) -> np.ndarray:
    return stats.norm.logpdf(residuals, 0.0, 1.0 / math.sqrt(phi))


def log_prior(state: ModelState, hp: Hyperparameters) -> float:
    """Sum of every prior log-density in the model."""
    psi_z = require_spd(state.psi_z, "psi_z")
    psi_w = require_spd(state.psi_w, "psi_w")
    total = 0.0
    for k in range(state.K):
        total += group_prior(state, hp, k)
    total += float(np.sum(stats.invgamma.logpdf(state.group_variances, hp.a_sigma, scale=hp.b_sigma)))
    total += float(np.sum(item_prior_each(state.item_intercepts, state.item_positions, hp, psi_w)))
    if state.residuals is not None:
        for eps in state.residuals:
            total += float(np.sum(residual_prior(eps, hp.phi)))
    total += invwishart_logpdf(psi_z, hp.nu_z, hp.S_z_mat)
    total += invwishart_logpdf(psi_w, hp.nu_w, hp.S_w_mat)
    return total


def log_posterior(state: ModelState, data: ResponseDataset, hp: Hyperparameters) -> float:
    """Unnormalized log posterior."""
    return log_likelihood(state, data) + log_prior(state, hp)
