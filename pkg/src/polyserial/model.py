"""The polyserial model: parameters, densities and analytic derivatives.

Parameter vectors are ordered ``(rho, mu, sigma2, tau_1, ..., tau_{r-1})``.
The array-level functions (``log_density``, ``score_vector``, ...) accept
either a :class:`ParamVector` or a plain 1-D array in that order, and are
vectorised over observations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .numerics import (
    QuadratureSpec,
    integrate_1d,
    log_normal_interval,
    std_normal_cdf,
    std_normal_logpdf,
    std_normal_pdf,
)

DENSITY_FLOOR = 1e-300


@dataclass(frozen=True)
class ParamVector:
    rho: float
    mu: float
    sigma2: float
    tau: tuple

    def __post_init__(self):
        tau = tuple(float(t) for t in self.tau)
        object.__setattr__(self, "tau", tau)
        vals = (self.rho, self.mu, self.sigma2) + tau
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("parameters must be finite")
        if not -1.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (-1, 1), got {self.rho}")
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if len(tau) < 1:
            raise ValueError("need at least one threshold (r >= 2)")
        if any(b <= a for a, b in zip(tau, tau[1:])):
            raise ValueError("thresholds must be strictly increasing")

    @property
    def r(self) -> int:
        return len(self.tau) + 1

    @property
    def d(self) -> int:
        return len(self.tau) + 3

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)

    def to_array(self) -> np.ndarray:
        return np.array((self.rho, self.mu, self.sigma2) + self.tau, dtype=float)

    @classmethod
    def from_array(cls, arr) -> "ParamVector":
        arr = np.asarray(arr, dtype=float)
        return cls(float(arr[0]), float(arr[1]), float(arr[2]), tuple(arr[3:]))

    def replace(self, **kw) -> "ParamVector":
        cur = dict(rho=self.rho, mu=self.mu, sigma2=self.sigma2, tau=self.tau)
        cur.update(kw)
        return ParamVector(**cur)


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    r: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        y_raw = np.asarray(self.y).ravel()
        if x.shape != y_raw.shape:
            raise ValueError("x and y must have equal length")
        if x.size < 1:
            raise ValueError("dataset is empty")
        if int(self.r) < 2:
            raise ValueError("need r >= 2 categories")
        if not np.all(np.isfinite(x)):
            raise ValueError("x contains non-finite values")
        y = y_raw.astype(int)
        if not np.array_equal(y, y_raw):
            raise ValueError("y must be integer category codes")
        if y.min() < 1 or y.max() > self.r:
            raise ValueError(f"y codes must lie in 1..{self.r}")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "r", int(self.r))

    @property
    def n(self) -> int:
        return self.x.size

    def counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.r + 1)[1:]


@dataclass(frozen=True)
class ScoreSystem:
    scores: tuple

    def __post_init__(self):
        s = tuple(float(v) for v in self.scores)
        if len(s) < 2 or any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError("scores must be strictly increasing with at least two entries")
        object.__setattr__(self, "scores", s)

    @classmethod
    def integer(cls, r: int) -> "ScoreSystem":
        return cls(tuple(range(1, r + 1)))


def _arr(theta) -> np.ndarray:
    if isinstance(theta, ParamVector):
        return theta.to_array()
    return np.asarray(theta, dtype=float)


def _tau_ext(th) -> np.ndarray:
    return np.concatenate(([-np.inf], th[3:], [np.inf]))


# ---------------------------------------------------------------------------
# scalar-level pieces

def tau_star(theta, x, k):
    """Standardised threshold (tau_k - rho z) / sqrt(1 - rho^2), z = (x - mu)/sigma.

    ``k = 0`` and ``k = r`` give -inf and +inf.
    """
    th = _arr(theta)
    rho, mu, sig = th[0], th[1], math.sqrt(th[2])
    tau = _tau_ext(th)[np.asarray(k)]
    z = (np.asarray(x, dtype=float) - mu) / sig
    return (tau - rho * z) / math.sqrt(1.0 - rho * rho)


def log_marginal_density(theta, x):
    th = _arr(theta)
    x = np.asarray(x, dtype=float)
    return -0.5 * math.log(2.0 * math.pi * th[2]) - 0.5 * (x - th[1]) ** 2 / th[2]


def marginal_density(theta, x):
    return np.exp(log_marginal_density(theta, x))


def log_cond_density(theta, x, y):
    """log P(Y = y | X = x), computed stably from tau*_y and tau*_{y-1}."""
    y = np.asarray(y)
    return log_normal_interval(tau_star(theta, x, y - 1), tau_star(theta, x, y))


def cond_density(theta, x, y):
    return np.maximum(np.exp(log_cond_density(theta, x, y)), DENSITY_FLOOR)


def log_density(theta, x, y):
    return log_marginal_density(theta, x) + log_cond_density(theta, x, y)


def joint_density(theta, x, y):
    """p(x, y) = normal(x; mu, sigma2) * P(Y = y | x)."""
    return np.exp(log_density(theta, x, y))


def joint_density_strip(theta, x: float, y: int, spec: QuadratureSpec | None = None) -> float:
    """Joint density as the integral of the bivariate normal over the y-strip of eta.

    Slow reference form; the factorised :func:`joint_density` is what the
    estimators use.
    """
    th = _arr(theta)
    rho, mu, s2 = th[0], th[1], th[2]
    sig = math.sqrt(s2)
    tau = _tau_ext(th)
    det = s2 * (1.0 - rho * rho)
    dx = float(x) - mu

    def phi2(v):
        q = (dx * dx - 2.0 * rho * sig * dx * v + s2 * v * v) / det
        return np.exp(-0.5 * q) / (2.0 * math.pi * math.sqrt(det))

    return float(integrate_1d(phi2, tau[y - 1], tau[y], spec or QuadratureSpec(1e-12, 1e-15)).value)


def joint_cdf(theta, x: float, y: int, spec: QuadratureSpec | None = None) -> float:
    """P(X <= x, Y <= y) = integral_{-inf}^x p_X(u) Phi(tau*_y(u)) du."""
    th = _arr(theta)
    r = len(th) - 2
    if y < 1:
        return 0.0
    y = min(int(y), r)
    mu, sig = th[1], math.sqrt(th[2])
    if y == r:
        return float(std_normal_cdf((x - mu) / sig))
    if x == -np.inf:
        return 0.0
    spec = spec or QuadratureSpec(1e-11, 1e-14)

    def integrand(u):
        return np.exp(log_marginal_density(th, u)) * std_normal_cdf(tau_star(th, u, y))

    lo = mu - 12.0 * sig
    if x <= lo:
        return float(integrate_1d(integrand, -np.inf, x, spec).value)
    return float(integrate_1d(integrand, lo, x, spec, initial_intervals=8).value)


def point_polyserial(theta, scores: ScoreSystem | None = None) -> float:
    """Correlation between X and the scored ordinal Y implied by theta."""
    th = _arr(theta)
    r = len(th) - 2
    scores = scores or ScoreSystem.integer(r)
    ys = np.asarray(scores.scores)
    if ys.size != r:
        raise ValueError(f"need {r} scores, got {ys.size}")
    rho, mu, sig = th[0], th[1], math.sqrt(th[2])
    tau = th[3:]
    cdf_tau = std_normal_cdf(tau)
    probs = np.diff(np.concatenate(([0.0], cdf_tau, [1.0])))
    mu_y = float(np.sum(ys * probs))
    var_y = float(np.sum(ys ** 2 * probs) - mu_y ** 2)
    if not var_y > 0:
        raise ValueError("degenerate score variance")
    steps = np.diff(ys)
    mu_xy = mu * (ys[-1] - np.sum(cdf_tau * steps)) + rho * sig * np.sum(std_normal_pdf(tau) * steps)
    return float((mu_xy - mu * mu_y) / (sig * math.sqrt(var_y)))


# ---------------------------------------------------------------------------
# derivatives

class _Pieces(NamedTuple):
    logp: np.ndarray          # log p(x, y)
    score: np.ndarray         # (n, d) gradient of log p
    ga: np.ndarray            # (n, d) gradient of tau*_y
    gb: np.ndarray            # (n, d) gradient of tau*_{y-1}
    a: np.ndarray             # tau*_y with infinities replaced by 0
    b: np.ndarray
    ra: np.ndarray            # phi(tau*_y) / p(y|x)
    rb: np.ndarray
    valid_a: np.ndarray
    valid_b: np.ndarray
    z: np.ndarray
    aux: tuple                # (rho, sigma, s, v, x - mu)


def _pieces(theta, x, y) -> _Pieces:
    th = _arr(theta)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=int))
    x, y = np.broadcast_arrays(x, y)
    n, d = x.size, th.size
    rho, mu, v = th[0], th[1], th[2]
    sig = math.sqrt(v)
    s = math.sqrt(1.0 - rho * rho)
    r = d - 2
    tau = _tau_ext(th)
    dev = x - mu
    z = dev / sig
    a_raw = (tau[y] - rho * z) / s
    b_raw = (tau[y - 1] - rho * z) / s
    valid_a = y < r
    valid_b = y > 1

    logpx = -0.5 * math.log(2.0 * math.pi * v) - 0.5 * z * z
    logpc = log_normal_interval(b_raw, a_raw)
    logp = logpx + logpc
    with np.errstate(over="ignore"):
        ra = np.where(valid_a, np.exp(std_normal_logpdf(np.where(valid_a, a_raw, 0.0)) - logpc), 0.0)
        rb = np.where(valid_b, np.exp(std_normal_logpdf(np.where(valid_b, b_raw, 0.0)) - logpc), 0.0)
    a = np.where(valid_a, a_raw, 0.0)
    b = np.where(valid_b, b_raw, 0.0)

    def grad_tstar(t, k, valid):
        g = np.zeros((n, d))
        g[:, 0] = rho * t / s ** 2 - z / s
        g[:, 1] = rho / (sig * s)
        g[:, 2] = rho * z / (2.0 * v * s)
        rows = np.nonzero(valid)[0]
        g[rows, 2 + k[rows]] = 1.0 / s
        g[~valid] = 0.0
        return g

    ga = grad_tstar(a, y, valid_a)
    gb = grad_tstar(b, y - 1, valid_b)
    score = ra[:, None] * ga - rb[:, None] * gb
    score[:, 1] += dev / v
    score[:, 2] += -0.5 / v + 0.5 * dev ** 2 / v ** 2
    return _Pieces(logp, score, ga, gb, a, b, ra, rb, valid_a, valid_b, z, (rho, sig, s, v, dev))


def _hess_tstar(p: _Pieces, t, k, valid, gt):
    rho, sig, s, v, dev = p.aux
    n, d = gt.shape
    z = p.z
    h = np.zeros((n, d, d))
    h[:, 0, 0] = t / s ** 2 + rho * gt[:, 0] / s ** 2 + 2.0 * rho ** 2 * t / s ** 4 - rho * z / s ** 3
    h[:, 0, 1] = h[:, 1, 0] = 1.0 / (sig * s ** 3)
    h[:, 0, 2] = h[:, 2, 0] = z / (2.0 * v * s ** 3)
    h[:, 1, 2] = h[:, 2, 1] = -rho / (2.0 * s * sig ** 3)
    h[:, 2, 2] = -3.0 * rho * z / (4.0 * s * v ** 2)
    rows = np.nonzero(valid)[0]
    h[rows, 0, 2 + k[rows]] = rho / s ** 3
    h[rows, 2 + k[rows], 0] = rho / s ** 3
    h[~valid] = 0.0
    return h


def _neg_log_hessian(p: _Pieces, y) -> np.ndarray:
    rho, sig, s, v, dev = p.aux
    y = np.broadcast_to(np.atleast_1d(np.asarray(y, dtype=int)), p.z.shape)
    ha = _hess_tstar(p, p.a, y, p.valid_a, p.ga)
    hb = _hess_tstar(p, p.b, y - 1, p.valid_b, p.gb)
    # grad^2 p_c / p_c
    hc = (p.ra[:, None, None] * (ha - p.a[:, None, None] * p.ga[:, :, None] * p.ga[:, None, :])
          - p.rb[:, None, None] * (hb - p.b[:, None, None] * p.gb[:, :, None] * p.gb[:, None, :]))
    gc = p.ra[:, None] * p.ga - p.rb[:, None] * p.gb
    hlog = hc - gc[:, :, None] * gc[:, None, :]
    hlog[:, 1, 1] += -1.0 / v
    hlog[:, 1, 2] += -dev / v ** 2
    hlog[:, 2, 1] += -dev / v ** 2
    hlog[:, 2, 2] += 0.5 / v ** 2 - dev ** 2 / v ** 3
    q = -hlog
    return 0.5 * (q + np.swapaxes(q, 1, 2))


def score_vector(theta, x, y) -> np.ndarray:
    """Gradient of log p(x, y) w.r.t. theta; shape (n, d), or (d,) for scalars."""
    out = _pieces(theta, x, y).score
    return out[0] if np.ndim(x) == 0 and np.ndim(y) == 0 else out


def log_density_and_score(theta, x, y):
    p = _pieces(theta, x, y)
    return p.logp, p.score


def neg_log_hessian(theta, x, y) -> np.ndarray:
    """Q(x, y) = -Hessian of log p(x, y); shape (n, d, d)."""
    p = _pieces(theta, x, y)
    q = _neg_log_hessian(p, y)
    return q[0] if np.ndim(x) == 0 and np.ndim(y) == 0 else q


def log_density_score_hessian(theta, x, y):
    p = _pieces(theta, x, y)
    return p.logp, p.score, _neg_log_hessian(p, y)


def hessian_matrix(theta, x, y):
    """Hessian of the joint density p(x, y) and the matrix Q = -Hessian of log p.

    grad^2 p = p (s s^T - Q) ties the two together.  Returns (hess_p, Q).
    """
    logp, sc, q = log_density_score_hessian(theta, x, y)
    p = np.exp(logp)
    hp = p[:, None, None] * (sc[:, :, None] * sc[:, None, :] - q)
    hp = 0.5 * (hp + np.swapaxes(hp, 1, 2))
    if np.ndim(x) == 0 and np.ndim(y) == 0:
        return hp[0], q[0]
    return hp, q


def marginal_gradient_hessian(theta, x):
    """Gradient and Hessian of the marginal normal density of X (full d-space)."""
    th = _arr(theta)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = th.size
    mu, v = th[1], th[2]
    px = np.exp(log_marginal_density(th, x))
    dev = x - mu
    g = np.zeros((x.size, d))
    g[:, 1] = px * dev / v
    g[:, 2] = px / (2.0 * v) * (dev ** 2 / v - 1.0)
    h = np.zeros((x.size, d, d))
    h[:, 1, 1] = (dev * g[:, 1] - px) / v
    h[:, 1, 2] = h[:, 2, 1] = dev / v * (g[:, 2] - px / v)
    h[:, 2, 2] = (g[:, 2] * (dev ** 2 / v - 1.0) + px / v * (1.0 - 2.0 * dev ** 2 / v)) / (2.0 * v)
    return g, h


def conditional_gradient_hessian(theta, x, y):
    """Gradient and Hessian of P(Y = y | X = x) w.r.t. theta."""
    p = _pieces(theta, x, y)
    y = np.broadcast_to(np.atleast_1d(np.asarray(y, dtype=int)), p.z.shape)
    pa = np.where(p.valid_a, std_normal_pdf(p.a), 0.0)
    pb = np.where(p.valid_b, std_normal_pdf(p.b), 0.0)
    g = pa[:, None] * p.ga - pb[:, None] * p.gb
    ha = _hess_tstar(p, p.a, y, p.valid_a, p.ga)
    hb = _hess_tstar(p, p.b, y - 1, p.valid_b, p.gb)
    h = (pa[:, None, None] * (ha - p.a[:, None, None] * p.ga[:, :, None] * p.ga[:, None, :])
         - pb[:, None, None] * (hb - p.b[:, None, None] * p.gb[:, :, None] * p.gb[:, None, :]))
    return g, h


# ---------------------------------------------------------------------------
# unconstrained reparameterisation

def to_unconstrained(theta) -> np.ndarray:
    """(atanh rho, mu, log sigma2, tau_1, log gaps...)."""
    th = _arr(theta)
    if not np.all(np.isfinite(th)):
        raise ValueError("non-finite parameters")
    tau = th[3:]
    gaps = np.diff(tau)
    if abs(th[0]) >= 1 or th[2] <= 0 or np.any(gaps <= 0):
        raise ValueError("parameters outside the legal set")
    return np.concatenate(([math.atanh(th[0]), th[1], math.log(th[2]), tau[0]], np.log(gaps)))


def _from_z_array(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    rho = math.tanh(z[0])
    # keep rho strictly inside (-1, 1) at double precision
    rho = max(min(rho, 1.0 - 1e-15), -1.0 + 1e-15)
    tau = z[3] + np.concatenate(([0.0], np.cumsum(np.exp(z[4:]))))
    return np.concatenate(([rho, z[1], math.exp(z[2])], tau))


def from_unconstrained(z) -> ParamVector:
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite unconstrained parameters")
    return ParamVector.from_array(_from_z_array(z))


def unconstrained_jacobian(z) -> np.ndarray:
    """d theta / d z, shape (d, d)."""
    z = np.asarray(z, dtype=float)
    d = z.size
    jac = np.zeros((d, d))
    jac[0, 0] = 1.0 - math.tanh(z[0]) ** 2
    jac[1, 1] = 1.0
    jac[2, 2] = math.exp(z[2])
    gaps = np.exp(z[4:])
    for k in range(d - 3):  # tau_{k+1}
        jac[3 + k, 3] = 1.0
        jac[3 + k, 4:4 + k] = gaps[:k]
    return jac


# ---------------------------------------------------------------------------
# integrals over the model support

INTEGRATION_HALF_WIDTH = 10.0
INITIAL_PANELS = 10


def integrate_over_support(theta, fn, spec: QuadratureSpec | None = None):
    """Integrate ``sum_y fn(x, y)`` over x in mu +- 10 sigma.

    `fn` receives flat arrays ``(x, y)`` covering every category at each
    abscissa and returns values whose first axis matches them.  Returns the
    :class:`~polyserial.numerics.QuadResult`.
    """
    th = _arr(theta)
    r = th.size - 2
    mu, sig = th[1], math.sqrt(th[2])
    cats = np.arange(1, r + 1)

    def g(xn):
        xs = np.repeat(xn, r)
        ys = np.tile(cats, xn.size)
        vals = np.asarray(fn(xs, ys), dtype=float)
        return vals.reshape((xn.size, r) + vals.shape[1:]).sum(axis=1)

    half = INTEGRATION_HALF_WIDTH * sig
    return integrate_1d(g, mu - half, mu + half, spec, initial_intervals=INITIAL_PANELS)
