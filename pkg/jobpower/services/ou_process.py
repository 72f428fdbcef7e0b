"""
O-U residual process on the 1-minute grid.

The process is handled as a stationary AR(1) with coefficient a = exp(-rho)
and marginal variance sigma2. Its correlation matrix has a tridiagonal
inverse, so densities and conditional draws cost O(T).
"""

from typing import Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded, solve_banded

from jobpower.utils.exceptions import NumericalError

LOG_2PI = np.log(2.0 * np.pi)


def one_minus_a2(rho: float) -> float:
    """1 - exp(-2 rho), accurate for small rho"""
    return -np.expm1(-2.0 * rho)


def ar1_precision_bands(length: int, sigma2: float, rho: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Diagonal and off-diagonal of the AR(1) prior precision (1/sigma2) * inv(Gamma_rho).

    Returns:
        (diag of length T, off-diagonal of length T-1)
    """
    if length == 1:
        return np.array([1.0 / sigma2]), np.zeros(0)
    a = np.exp(-rho)
    scale = 1.0 / (sigma2 * one_minus_a2(rho))
    diag = np.full(length, (1.0 + a * a) * scale)
    diag[0] = diag[-1] = scale
    off = np.full(length - 1, -a * scale)
    return diag, off


def ar1_quadratic_form(z: np.ndarray, rho: float) -> Tuple[float, int, float]:
    """
    Pieces of the AR(1) log density of unit marginal variance, summed over rows.

    Returns:
        (q, n, logdet) with q = sum z' inv(Gamma) z, n the number of values and
        logdet = sum log det(Gamma)
    """
    z = np.atleast_2d(z)
    n_rows, length = z.shape
    if length == 0:
        return 0.0, 0, 0.0
    c = one_minus_a2(rho)
    a = np.exp(-rho)
    innovations = z[:, 1:] - a * z[:, :-1]
    q = float(np.sum(z[:, 0] ** 2) + np.sum(innovations ** 2) / c)
    logdet = n_rows * (length - 1) * np.log(c)
    return q, z.size, float(logdet)


def ar1_log_density(z: np.ndarray, sigma2: float, rho: float) -> float:
    """Log density of one or more independent stationary AR(1) paths (rows of ``z``)"""
    q, n, logdet = ar1_quadratic_form(z, rho)
    return -0.5 * (n * (LOG_2PI + np.log(sigma2)) + logdet + q / sigma2)


def sample_residual_path(
    r: np.ndarray,
    sigma2: float,
    rho: float,
    tau2: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Draw z | r where r = z + eps, eps ~ N(0, tau2 I), z ~ AR(1)(sigma2, rho).

    The posterior precision Q + I/tau2 is tridiagonal; its banded Cholesky
    factor gives the mean and the draw without forming a dense inverse.
    """
    r = np.asarray(r, dtype=float)
    length = r.size
    if length == 0:
        return np.zeros(0)

    diag, off = ar1_precision_bands(length, sigma2, rho)
    bands = np.zeros((2, length))
    bands[0, 1:] = off
    bands[1, :] = diag + 1.0 / tau2
    try:
        upper = cholesky_banded(bands, lower=False)
    except LinAlgError as e:
        raise NumericalError(f"residual precision is not positive definite: {e}") from e

    mean = cho_solve_banded((upper, False), r / tau2)
    noise = solve_banded((0, 1), upper, rng.standard_normal(length))
    return mean + noise


def posterior_covariance_dense(length: int, sigma2: float, rho: float, tau2: float) -> np.ndarray:
    """Dense tau2 (I + (tau2/sigma2) inv(Gamma_rho))^-1, for checking the banded sampler"""
    idx = np.arange(length)
    gamma = np.exp(-rho * np.abs(idx[:, None] - idx[None, :]))
    precision = np.linalg.inv(gamma) / sigma2 + np.eye(length) / tau2
    return np.linalg.inv(precision)
