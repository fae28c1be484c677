"""
HLSIRM - Linear Algebra Helpers
"""
from typing import Tuple

import numpy as np
from scipy import linalg

from utils.errors import ValidityError


def is_spd(matrix: np.ndarray, tol: float = 1e-10) -> bool:
    """True when ``matrix`` is symmetric and has a Cholesky factor."""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        return False
    if not np.all(np.isfinite(matrix)):
        return False
    scale = max(1.0, float(np.max(np.abs(matrix))))
    if np.max(np.abs(matrix - matrix.T)) > tol * scale:
        return False
    try:
        np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        return False
    return True


def require_spd(matrix: np.ndarray, name: str) -> np.ndarray:
    """Return ``matrix`` as a float array or raise ValidityError."""
    matrix = np.asarray(matrix, dtype=float)
    if not is_spd(matrix):
        raise ValidityError(
            f"{name} must be symmetric positive definite",
            details={"name": name, "matrix": matrix.tolist()},
        )
    return matrix


def cholesky_logdet(matrix: np.ndarray) -> Tuple[np.ndarray, float]:
    """Lower Cholesky factor and log-determinant of an SPD matrix."""
    chol = linalg.cholesky(matrix, lower=True)
    return chol, 2.0 * float(np.sum(np.log(np.diag(chol))))


def mvn_logpdf_each(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """
    Multivariate normal log-density of every row of ``x``.

    ``mean`` broadcasts against ``x`` (a single vector or one row per point).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] == 0:
        return np.zeros(0)
    dim = x.shape[1]
    chol, logdet = cholesky_logdet(cov)
    solved = linalg.solve_triangular(chol, (x - mean).T, lower=True)
    quad = np.sum(solved * solved, axis=0)
    return -0.5 * (dim * np.log(2.0 * np.pi) + logdet + quad)


def mvn_logpdf_rows(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Sum of ``mvn_logpdf_each`` over rows."""
    return float(np.sum(mvn_logpdf_each(x, mean, cov)))


def scatter(x: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Sum of outer products of the rows of ``x - center``."""
    resid = np.atleast_2d(x) - center
    return resid.T @ resid


def psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix; negative eigenvalues clip to 0."""
    values, vectors = linalg.eigh(np.asarray(matrix, dtype=float))
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T
