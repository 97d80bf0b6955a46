"""Sandwich covariance, Fisher information, relative efficiency and Wald intervals."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import model
from .estimators import FitResult
from .model import Dataset, ParamVector
from .numerics import QuadratureSpec, std_normal_quantile

SINGULAR_RCOND = 1e-12


class QuadratureFailure(FloatingPointError):
    pass


@dataclass
class CovarianceBundle:
    J: np.ndarray
    K: np.ndarray
    xi: np.ndarray
    A: Optional[np.ndarray]
    sigma: Optional[np.ndarray]
    se: Optional[np.ndarray]
    singular: bool
    n: int
    rcond: float
    fisher: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    level: float

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def _rcond(m: np.ndarray) -> float:
    if not np.all(np.isfinite(m)):
        return 0.0
    ev = np.abs(np.linalg.eigvalsh(0.5 * (m + m.T)))
    top = ev.max()
    return float(ev.min() / top) if top > 0 else 0.0


def _integrate(theta, fn, spec):
    res = model.integrate_over_support(theta, fn, spec)
    if not res.converged:
        raise QuadratureFailure("model integral did not converge")
    return np.asarray(res.value)


def _upper(d):
    return np.triu_indices(d)


def _mirror(vec, d):
    iu = _upper(d)
    m = np.zeros((d, d))
    m[iu] = vec
    return m + np.triu(m, 1).T


def fisher_information(theta, spec: QuadratureSpec | None = None) -> np.ndarray:
    """Expected outer product of the score, integral sum_y p s s^T."""
    th = model._arr(theta)
    d = th.size
    iu = _upper(d)

    def fn(xs, ys):
        logp, sc = model.log_density_and_score(th, xs, ys)
        return np.exp(logp)[:, None] * (sc[:, :, None] * sc[:, None, :])[:, iu[0], iu[1]]

    return _mirror(_integrate(th, fn, spec), d)


def fisher_information_hessian_form(theta, spec: QuadratureSpec | None = None) -> np.ndarray:
    """Expected negative Hessian of log p; equals fisher_information under the model."""
    th = model._arr(theta)
    d = th.size
    iu = _upper(d)

    def fn(xs, ys):
        logp, _, q = model.log_density_score_hessian(th, xs, ys)
        return np.exp(logp)[:, None] * q[:, iu[0], iu[1]]

    return _mirror(_integrate(th, fn, spec), d)


def matrix_A(theta, alpha: float, spec: QuadratureSpec | None = None) -> np.ndarray:
    """integral sum_y p^{1+alpha} ((1+alpha) s s^T - Q), Q the negative Hessian of log p."""
    th = model._arr(theta)
    d = th.size
    iu = _upper(d)

    def fn(xs, ys):
        logp, sc, q = model.log_density_score_hessian(th, xs, ys)
        m = (1.0 + alpha) * sc[:, :, None] * sc[:, None, :] - q
        return np.exp((1.0 + alpha) * logp)[:, None] * m[:, iu[0], iu[1]]

    return _mirror(_integrate(th, fn, spec), d)


def _weighted_pieces(theta, data: Dataset, alpha: float):
    th = model._arr(theta)
    logp, sc, q = model.log_density_score_hessian(th, data.x, data.y)
    w = np.exp(alpha * logp)
    return w, sc, q


def _finish_sandwich(J, K, xi, A, n, fisher=None) -> CovarianceBundle:
    rc = _rcond(J)
    if rc < SINGULAR_RCOND:
        return CovarianceBundle(J, K, xi, A, None, None, True, n, rc, fisher)
    jinv = np.linalg.solve(J, np.eye(J.shape[0]))
    sigma = jinv if fisher is not None else jinv @ K @ jinv.T
    sigma = 0.5 * (sigma + sigma.T)
    diag = np.diag(sigma)
    if np.any(~np.isfinite(diag)) or np.any(diag < 0):
        return CovarianceBundle(J, K, xi, A, None, None, True, n, rc, fisher)
    return CovarianceBundle(J, K, xi, A, sigma, np.sqrt(diag / n), False, n, rc, fisher)


def sandwich_covariance(theta, data: Dataset, alpha: float,
                        spec: QuadratureSpec | None = None) -> CovarianceBundle:
    """Empirical sandwich J^{-1} K J^{-1}; alpha = 0 uses the inverse outer-product information.

    The model integral A is evaluated at theta; B, xi and K are sample averages.
    """
    th = model._arr(theta)
    n = data.n
    w, sc, q = _weighted_pieces(th, data, alpha)
    outer = sc[:, :, None] * sc[:, None, :]
    if alpha == 0:
        opg = outer.mean(axis=0)
        xi = sc.mean(axis=0)
        return _finish_sandwich(opg, opg, xi, np.zeros_like(opg), n, fisher=opg)
    try:
        A = matrix_A(th, alpha, spec)
    except QuadratureFailure:
        d = th.size
        nanm = np.full((d, d), np.nan)
        return CovarianceBundle(nanm, nanm, np.full(d, np.nan), None, None, None, True, n, 0.0)
    B = np.mean(w[:, None, None] * (q - alpha * outer), axis=0)
    J = A + B
    xi = np.mean(w[:, None] * sc, axis=0)
    K = np.mean((w * w)[:, None, None] * outer, axis=0) - np.outer(xi, xi)
    return _finish_sandwich(0.5 * (J + J.T), 0.5 * (K + K.T), xi, A, n)


def fit_covariance(result: FitResult, data: Dataset,
                   spec: QuadratureSpec | None = None) -> CovarianceBundle:
    """Covariance to pair with a fit; two-step estimates use the ML information at their value."""
    alpha = result.alpha if result.estimator == "dpd" else 0.0
    return sandwich_covariance(result.theta_hat, data, alpha, spec)


def population_sandwich(theta, alpha: float, spec: QuadratureSpec | None = None):
    """J, K and xi when the data come from the model itself."""
    th = model._arr(theta)
    d = th.size
    iu = _upper(d)
    if alpha == 0:
        info = fisher_information(th, spec)
        return info, info, np.zeros(d)

    def fn(xs, ys):
        logp, sc, q = model.log_density_score_hessian(th, xs, ys)
        p = np.exp(logp)
        pa = np.exp(alpha * logp)
        outer = sc[:, :, None] * sc[:, None, :]
        a_part = (pa * p)[:, None] * ((1.0 + alpha) * outer - q)[:, iu[0], iu[1]]
        b_part = (pa * p)[:, None] * (q - alpha * outer)[:, iu[0], iu[1]]
        k_part = (pa * pa * p)[:, None] * outer[:, iu[0], iu[1]]
        xi_part = (pa * p)[:, None] * sc
        return np.column_stack((a_part + b_part, k_part, xi_part))

    vals = _integrate(th, fn, spec)
    m = iu[0].size
    J = _mirror(vals[:m], d)
    xi = vals[2 * m:]
    K = _mirror(vals[m:2 * m], d) - np.outer(xi, xi)
    return J, K, xi


def asymptotic_covariance(theta, alpha: float, spec: QuadratureSpec | None = None) -> np.ndarray:
    J, K, _ = population_sandwich(theta, alpha, spec)
    if alpha == 0:
        return np.linalg.inv(J)
    jinv = np.linalg.inv(J)
    return jinv @ K @ jinv.T


def relative_efficiency(theta, alpha: float, spec: QuadratureSpec | None = None) -> float:
    """Asymptotic variance of ML for rho divided by that of the minimum-DPD estimator."""
    th = model._arr(theta)
    ml_var = np.linalg.inv(fisher_information(th, spec))[0, 0]
    if alpha == 0:
        return 1.0
    return float(ml_var / asymptotic_covariance(th, alpha, spec)[0, 0])


def confidence_interval(estimate: float, se: float, gamma: float = 0.05) -> ConfidenceInterval:
    """Two-sided Wald interval at level 1 - gamma."""
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    if not (np.isfinite(se) and se >= 0):
        raise ValueError("standard error must be finite and non-negative")
    zq = float(std_normal_quantile(1.0 - gamma / 2.0))
    return ConfidenceInterval(estimate - zq * se, estimate + zq * se, 1.0 - gamma)


def rho_interval(result: FitResult, cov: CovarianceBundle, gamma: float = 0.05) -> Optional[ConfidenceInterval]:
    if cov.se is None:
        return None
    return confidence_interval(result.theta_hat.rho, float(cov.se[0]), gamma)
