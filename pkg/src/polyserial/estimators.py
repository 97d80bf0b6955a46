"""Maximum likelihood, two-step and minimum density power divergence fits."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model
from .model import Dataset, ParamVector, ScoreSystem
from .numerics import (
    OptimizerSpec,
    QuadratureSpec,
    minimize,
    minimize_with_fallback,
    std_normal_quantile,
)

INSTABILITY_GAP = 3.92
MAD_SCALE = 1.482602218505602


class EmptyCategoryError(ValueError):
    """Raised when some response category has no observations."""

    def __init__(self, categories):
        self.categories = list(categories)
        cats = ", ".join(str(c) for c in self.categories)
        super().__init__(
            f"response categor{'y' if len(self.categories) == 1 else 'ies'} {cats} "
            "never observed; merge sparse categories with a neighbour before fitting"
        )


@dataclass(frozen=True)
class DpdConfig:
    alpha: float = 0.5
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    quadrature: QuadratureSpec = field(default_factory=QuadratureSpec)
    start: Optional[ParamVector] = None
    weights: bool = True

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]; larger values are too inefficient")


@dataclass
class FitResult:
    theta_hat: ParamVector
    objective: float
    converged: bool
    method_used: str
    alpha: float
    estimator: str
    weights: Optional[np.ndarray]
    m_alpha: float
    point_polyserial: Optional[float]
    threshold_instability: bool
    n_iter: int = 0
    start: Optional[ParamVector] = None

    @property
    def flagged(self) -> bool:
        return self.threshold_instability or not self.converged


def check_categories(data: Dataset) -> None:
    counts = data.counts()
    empty = [k + 1 for k in np.nonzero(counts == 0)[0]]
    if empty:
        raise EmptyCategoryError(empty)


def threshold_unstable(theta: ParamVector) -> bool:
    return bool(np.any(np.diff(theta.tau) >= INSTABILITY_GAP))


# ---------------------------------------------------------------------------
# starting values

def _quantile_thresholds(data: Dataset) -> np.ndarray:
    cum = np.cumsum(data.counts())[:-1] / data.n
    if np.any(cum <= 0) or np.any(cum >= 1):
        raise EmptyCategoryError([k + 1 for k in np.nonzero(data.counts() == 0)[0]] or [1])
    return std_normal_quantile(cum)


def _safe_rho(v: float) -> float:
    return float(np.clip(v, -0.95, 0.95))


def robust_start(data: Dataset) -> ParamVector:
    """Median / MAD / quantile thresholds and an inflated Pearson correlation."""
    check_categories(data)
    x = data.x
    med = float(np.median(x))
    scale = MAD_SCALE * float(np.median(np.abs(x - med)))
    if not scale > 0:
        scale = float(np.std(x)) or 1.0
    if np.std(x) > 0 and np.std(data.y) > 0:
        pearson = float(np.corrcoef(x, data.y)[0, 1])
    else:
        pearson = 0.0
    return ParamVector(_safe_rho(1.1 * pearson), med, scale ** 2, tuple(_quantile_thresholds(data)))


# ---------------------------------------------------------------------------
# ML and two-step

def _nll_and_grad(z, data: Dataset):
    th = model._from_z_array(z)
    logp, sc = model.log_density_and_score(th, data.x, data.y)
    val = -float(np.mean(logp))
    grad_th = -np.mean(sc, axis=0)
    return val, model.unconstrained_jacobian(z).T @ grad_th


def fit_two_step(data: Dataset, config: DpdConfig | None = None) -> FitResult:
    """Sample moments and quantile thresholds, then ML for rho alone."""
    config = config or DpdConfig(alpha=0.0)
    check_categories(data)
    mu = float(np.mean(data.x))
    var = float(np.var(data.x, ddof=1)) if data.n > 1 else 0.0
    if not var > 0:
        raise ValueError("x has zero sample variance")
    tau = _quantile_thresholds(data)
    fixed = np.concatenate(([0.0, mu, var], tau))

    def f(w):
        th = fixed.copy()
        th[0] = math.tanh(w[0])
        logp, sc = model.log_density_and_score(th, data.x, data.y)
        return -float(np.mean(logp)), np.array([-np.mean(sc[:, 0]) * (1.0 - th[0] ** 2)])

    spec = config.optimizer
    res = minimize_with_fallback(f, np.array([0.0]), spec, grad=True)
    th = fixed.copy()
    th[0] = _safe_open(math.tanh(res.x[0]))
    theta = ParamVector.from_array(th)
    return _finish(theta, data, res.fun, res.converged, res.method, 0.0, "two-step",
                   config, res.n_iter, None)


def _safe_open(rho):
    return max(min(rho, 1.0 - 1e-12), -1.0 + 1e-12)


def fit_ml(data: Dataset, config: DpdConfig | None = None) -> FitResult:
    """Maximum likelihood over the full parameter vector, started at two-step estimates."""
    config = config or DpdConfig(alpha=0.0)
    check_categories(data)
    start = config.start or fit_two_step(data, config).theta_hat
    z0 = model.to_unconstrained(start)
    res = minimize_with_fallback(lambda z: _nll_and_grad(z, data), z0, config.optimizer, grad=True)
    theta = model.from_unconstrained(res.x)
    return _finish(theta, data, res.fun, res.converged, res.method, 0.0, "ml",
                   config, res.n_iter, start)


# ---------------------------------------------------------------------------
# density power divergence

def _integral_terms(th, alpha, spec, with_grad=True):
    """integral sum_y p^{1+alpha} and, optionally, integral sum_y p^{1+alpha} s."""
    def fn(xs, ys):
        logp, sc = model.log_density_and_score(th, xs, ys)
        w = np.exp((1.0 + alpha) * logp)
        if not with_grad:
            return w
        return np.column_stack((w, w[:, None] * sc))

    res = model.integrate_over_support(th, fn, spec)
    val = np.atleast_1d(res.value)
    return val, res.converged


def dpd_objective(theta, data: Dataset, alpha: float, spec: QuadratureSpec | None = None) -> float:
    """Density power divergence between the empirical and model densities."""
    if not alpha > 0:
        raise ValueError("the DPD objective needs alpha > 0")
    th = model._arr(theta)
    integral, ok = _integral_terms(th, alpha, spec, with_grad=False)
    if not ok:
        raise FloatingPointError("quadrature of the DPD integral term did not converge")
    logp = model.log_density(th, data.x, data.y)
    return float(integral[0] - (1.0 + 1.0 / alpha) * np.mean(np.exp(alpha * logp)) + 1.0 / alpha)


def correction_term(theta, alpha: float, spec: QuadratureSpec | None = None) -> np.ndarray:
    """c_alpha(theta) = integral sum_y p^{1+alpha} s dx."""
    th = model._arr(theta)
    val, ok = _integral_terms(th, alpha, spec)
    if not ok:
        raise FloatingPointError("quadrature of the correction term did not converge")
    return val[1:]


def estimating_equation_residual(theta, data: Dataset, alpha: float,
                                 spec: QuadratureSpec | None = None) -> np.ndarray:
    """mean_i p_i^alpha s_i - c_alpha(theta); zero at the minimum-DPD estimate."""
    th = model._arr(theta)
    logp, sc = model.log_density_and_score(th, data.x, data.y)
    w = np.exp(alpha * logp)
    return np.mean(w[:, None] * sc, axis=0) - correction_term(th, alpha, spec)


def _dpd_and_grad(z, data: Dataset, alpha, spec):
    th = model._from_z_array(z)
    integral, ok = _integral_terms(th, alpha, spec)
    logp, sc = model.log_density_and_score(th, data.x, data.y)
    w = np.exp(alpha * logp)
    val = integral[0] - (1.0 + 1.0 / alpha) * np.mean(w) + 1.0 / alpha
    # grad D = -(1 + alpha) * residual
    resid = np.mean(w[:, None] * sc, axis=0) - integral[1:]
    grad = -(1.0 + alpha) * resid
    if not ok:
        return np.nan, np.full(z.shape, np.nan)
    return float(val), model.unconstrained_jacobian(z).T @ grad


def fit_dpd(data: Dataset, config: DpdConfig | None = None) -> FitResult:
    """Minimum density power divergence estimate; alpha = 0 is ML."""
    config = config or DpdConfig()
    if config.alpha == 0:
        return fit_ml(data, config)
    check_categories(data)
    start = config.start or robust_start(data)
    z0 = model.to_unconstrained(start)
    alpha, spec = config.alpha, config.quadrature
    res = minimize_with_fallback(lambda z: _dpd_and_grad(z, data, alpha, spec), z0,
                                 config.optimizer, grad=True)
    theta = model.from_unconstrained(res.x)
    return _finish(theta, data, res.fun, res.converged, res.method, alpha, "dpd",
                   config, res.n_iter, start)


def _finish(theta, data, objective, converged, method, alpha, name, config, nit, start):
    if config.weights:
        m_alpha = compute_m_alpha(theta, alpha)
        weights = compute_weights(theta, data, alpha, m_alpha)
    else:
        m_alpha, weights = 1.0 if alpha == 0 else float("nan"), None
    try:
        pps = model.point_polyserial(theta, ScoreSystem.integer(data.r))
    except ValueError:
        pps = None
    return FitResult(theta, float(objective), bool(converged), method, float(alpha), name,
                     weights, float(m_alpha), pps, threshold_unstable(theta), nit, start)


# ---------------------------------------------------------------------------
# weights

def _log_s_and_grad(xv, y, th, alpha):
    """alpha * log p(x, y) and its x-derivative for the weight bound search."""
    rho, mu, v = th[0], th[1], th[2]
    sig, s = math.sqrt(v), math.sqrt(1.0 - rho * rho)
    x = np.atleast_1d(xv)
    p = model._pieces(th, x, np.array([y]))
    # d tau*/dx = -rho / (sigma s) for both ends of the interval
    dlogc = -(p.ra - p.rb) * rho / (sig * s)
    dlogx = -(x - mu) / v
    return alpha * float(p.logp[0]), alpha * (dlogx + dlogc)


def compute_m_alpha(theta, alpha: float) -> float:
    """sup_{x, y} p(x, y)^alpha, maximising over x separately per category."""
    if alpha == 0:
        return 1.0
    th = model._arr(theta)
    r = th.size - 2
    mu, sig = th[1], math.sqrt(th[2])
    spec = OptimizerSpec("quasi-newton", 1e-10, 1e-12, 200)
    best = -np.inf
    for y in range(1, r + 1):
        f = lambda xv: tuple(-t for t in _log_s_and_grad(xv[0], y, th, alpha))
        # work in standardised units so the tolerances mean the same for any scale
        g = lambda u: _scaled(f, u, mu, sig)
        res = minimize(g, np.array([0.0]), spec, grad=True)
        val = -res.fun
        if not res.converged or not np.isfinite(val):
            grid = mu + sig * np.linspace(-8.0, 8.0, 16001)
            lp = alpha * model.log_density(th, grid, np.full(grid.size, y))
            val = float(np.max(lp))
        best = max(best, val)
    return float(math.exp(best))


def _scaled(f, u, mu, sig):
    val, grad = f(np.array([mu + sig * u[0]]))
    return val, np.asarray(grad) * sig


def compute_weights(theta, data: Dataset, alpha: float, m_alpha: float | None = None) -> np.ndarray:
    """Rescaled weights p(X_i, Y_i)^alpha / M_alpha, in [0, 1]."""
    if alpha == 0:
        return np.ones(data.n)
    if m_alpha is None:
        m_alpha = compute_m_alpha(theta, alpha)
    logp = model.log_density(theta, data.x, data.y)
    w = np.exp(alpha * logp - math.log(m_alpha))
    return np.clip(w, 0.0, 1.0)


def fit(data: Dataset, estimator: str = "dpd", config: DpdConfig | None = None) -> FitResult:
    if estimator == "ml":
        return fit_ml(data, config)
    if estimator == "two-step":
        return fit_two_step(data, config)
    if estimator == "dpd":
        return fit_dpd(data, config)
    raise ValueError(f"unknown estimator {estimator!r}")
