"""Special functions, adaptive 1-D quadrature and optimizer wrappers.

Nothing in here knows about the polyserial model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import optimize, special

LOG_2PI_HALF = 0.5 * math.log(2.0 * math.pi)
SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class QuadratureSpec:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    max_subdivisions: int = 200

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("quadrature tolerances must be positive")
        if self.max_subdivisions < 1:
            raise ValueError("max_subdivisions must be >= 1")


@dataclass(frozen=True)
class OptimizerSpec:
    method: str = "quasi-newton"  # or "simplex"
    gradient_tol: float = 1e-7
    step_tol: float = 1e-9
    max_iterations: int = 500

    def __post_init__(self):
        if self.method not in ("quasi-newton", "simplex"):
            raise ValueError(f"unknown optimizer method {self.method!r}")
        if not (self.gradient_tol > 0 and self.step_tol > 0):
            raise ValueError("optimizer tolerances must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


# ---------------------------------------------------------------------------
# standard normal helpers

def std_normal_pdf(v):
    v = np.asarray(v, dtype=float)
    return np.exp(-0.5 * v * v - LOG_2PI_HALF)


def std_normal_logpdf(v):
    v = np.asarray(v, dtype=float)
    return -0.5 * v * v - LOG_2PI_HALF


def std_normal_cdf(v):
    """Phi(v) through erfc, accurate in the lower tail."""
    v = np.asarray(v, dtype=float)
    return 0.5 * special.erfc(-v / SQRT2)


def std_normal_sf(v):
    v = np.asarray(v, dtype=float)
    return 0.5 * special.erfc(v / SQRT2)


def std_normal_logcdf(v):
    return special.log_ndtr(np.asarray(v, dtype=float))


def std_normal_quantile(p):
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("probability outside [0, 1]")
    return special.ndtri(p)


def _log1mexp(d):
    # log(1 - exp(d)) for d <= 0
    d = np.asarray(d, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(d > -math.log(2.0), np.log(-np.expm1(d)), np.log1p(-np.exp(d)))


def log_normal_interval(lo, hi):
    """log(Phi(hi) - Phi(lo)) for lo < hi, elementwise, stable in both tails.

    Intervals entirely above zero are reflected to the lower tail; intervals
    straddling zero use the erf difference, whose terms do not cancel there.
    Relative accuracy degrades only for very narrow tail intervals (about 1e-9 at width 1e-6).
    """
    lo, hi = np.broadcast_arrays(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
    flip = lo > 0
    lo2 = np.where(flip, -hi, lo)
    hi2 = np.where(flip, -lo, hi)
    out = np.empty(lo2.shape)
    lower = hi2 <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        if np.any(lower):
            lh = special.log_ndtr(hi2[lower])
            ll = special.log_ndtr(lo2[lower])
            out[lower] = lh + _log1mexp(ll - lh)
        mid = ~lower
        if np.any(mid):
            prob = 0.5 * (special.erf(hi2[mid] / SQRT2) - special.erf(lo2[mid] / SQRT2))
            out[mid] = np.log(prob)
    return out


def normal_interval_prob(lo, hi):
    """Phi(hi) - Phi(lo) without losing precision in the tails."""
    return np.exp(log_normal_interval(lo, hi))


# ---------------------------------------------------------------------------
# adaptive Gauss-Kronrod (10-point Gauss, 21-point Kronrod)

_XGK = np.array([
    0.995657163025808080735527280689003,
    0.973906528517171720077964012084452,
    0.930157491355708226001207180059508,
    0.865063366688984510732096688423493,
    0.780817726586416897063717578345042,
    0.679409568299024406234327365114874,
    0.562757134668604683339000099272694,
    0.433395394129247190799265943165784,
    0.294392862701460198131126603103866,
    0.148874338981631210884826001129720,
    0.000000000000000000000000000000000,
])
_WGK = np.array([
    0.011694638867371874278064396062192,
    0.032558162307964727478818972459390,
    0.054755896574351996031381300244580,
    0.075039674810919952767043140916190,
    0.093125454583697605535065465083366,
    0.109387158802297641899210590325805,
    0.123491976262065851077600012683329,
    0.134709217311473325928054001771707,
    0.142775938577060080797094273138717,
    0.147739104901338491374841515972068,
    0.149445554002916905664936468389821,
])
_WG = np.array([
    0.066671344308688137593568809893332,
    0.149451349150580593145776339657697,
    0.219086362515982043995534934228163,
    0.269266719309996355091226921569469,
    0.295524224714752870173892994651338,
])
# full symmetric node set on [-1, 1]
_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
_WK = np.concatenate([_WGK[:-1], _WGK[::-1]])
_WG_FULL = np.zeros(21)
# Gauss nodes are the odd-indexed Kronrod abscissae (indices 1,3,5,7,9 from the end)
for _i, _w in zip((1, 3, 5, 7, 9), _WG):
    _WG_FULL[_i] = _w
    _WG_FULL[20 - _i] = _w


@dataclass
class QuadResult:
    value: np.ndarray | float
    error: np.ndarray | float
    converged: bool
    n_intervals: int


def _map_infinite(f, lower, upper):
    """Return (g, a, b) with the infinite range mapped onto (0, 1) logistically."""
    if np.isfinite(lower) and np.isfinite(upper):
        return f, lower, upper
    if not np.isfinite(lower) and not np.isfinite(upper):
        if lower > upper or lower == upper:
            raise ValueError("invalid integration range")

        def g(t):
            with np.errstate(divide="ignore"):
                x = np.log(t) - np.log1p(-t)
                jac = 1.0 / (t * (1.0 - t))
            return _scale(f(x), jac)
        return g, 0.0, 1.0
    if np.isfinite(lower):
        a = lower

        def g(t):
            with np.errstate(divide="ignore"):
                x = a + t / (1.0 - t)
                jac = 1.0 / (1.0 - t) ** 2
            return _scale(f(x), jac)
        return g, 0.0, 1.0
    b = upper

    def g(t):
        with np.errstate(divide="ignore"):
            x = b - (1.0 - t) / t
            jac = 1.0 / t ** 2
        return _scale(f(x), jac)
    return g, 0.0, 1.0


def _scale(vals, jac):
    # nodes that round onto t = 0 or 1 sit at x = +-inf, where a convergent integrand vanishes
    vals = np.asarray(vals, dtype=float)
    jac = np.where(np.isfinite(jac), jac, 0.0)
    if vals.ndim == 1:
        return np.where(jac == 0.0, 0.0, vals * jac)
    jac = jac.reshape((-1,) + (1,) * (vals.ndim - 1))
    return np.where(jac == 0.0, 0.0, vals * jac)


def _gk_panels(g, a, b):
    """Apply the 21-point rule to panels [a_k, b_k]; returns (values, errors)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    half = 0.5 * (b - a)
    center = 0.5 * (a + b)
    x = (center[:, None] + half[:, None] * _NODES[None, :]).ravel()
    fx = np.asarray(g(x), dtype=float)
    tail = fx.shape[1:]
    fx = fx.reshape((len(a), 21) + tail)
    wk = _WK.reshape((1, 21) + (1,) * len(tail))
    wg = _WG_FULL.reshape((1, 21) + (1,) * len(tail))
    h = half.reshape((-1,) + (1,) * len(tail))
    kron = h * np.sum(wk * fx, axis=1)
    gauss = h * np.sum(wg * fx, axis=1)
    return kron, np.abs(kron - gauss)


def integrate_1d(f: Callable, lower: float, upper: float,
                 spec: QuadratureSpec | None = None, initial_intervals: int = 1) -> QuadResult:
    """Globally adaptive Gauss-Kronrod quadrature of a vectorised integrand.

    `f` maps a 1-D array of abscissae to an array whose first axis matches
    the abscissae; trailing axes are integrated componentwise on a shared
    subdivision.  Infinite bounds are handled by a logistic change of
    variables.  If the tolerance is not met within `max_subdivisions`
    bisections the result comes back with ``converged=False``.
    """
    spec = spec or QuadratureSpec()
    if lower == upper:
        probe = np.asarray(f(np.array([lower if np.isfinite(lower) else 0.0])), dtype=float)
        z = np.zeros(probe.shape[1:]) if probe.ndim > 1 else 0.0
        return QuadResult(z, z, True, 0)
    sign = 1.0
    if lower > upper:
        lower, upper, sign = upper, lower, -1.0
    g, a, b = _map_infinite(f, lower, upper)
    edges = np.linspace(a, b, initial_intervals + 1)
    lefts = list(edges[:-1])
    rights = list(edges[1:])
    vals, errs = _gk_panels(g, edges[:-1], edges[1:])
    vals = list(vals)
    errs = list(errs)
    n_bisect = 0
    converged = False
    while True:
        total = np.sum(vals, axis=0)
        err = np.sum(errs, axis=0)
        tol = np.maximum(spec.abs_tol, spec.rel_tol * np.abs(total))
        if np.all(err <= tol) and np.all(np.isfinite(total)):
            converged = True
            break
        if n_bisect >= spec.max_subdivisions or not np.all(np.isfinite(total)):
            break
        # bisect the panel with the largest tolerance-scaled error
        scaled = [float(np.max(e / tol)) for e in errs]
        k = int(np.argmax(scaled))
        lo, hi = lefts[k], rights[k]
        m = 0.5 * (lo + hi)
        v2, e2 = _gk_panels(g, np.array([lo, m]), np.array([m, hi]))
        lefts[k:k + 1] = [lo, m]
        rights[k:k + 1] = [m, hi]
        vals[k:k + 1] = [v2[0], v2[1]]
        errs[k:k + 1] = [e2[0], e2[1]]
        n_bisect += 1
    # panels are kept in positional order, so the sum does not depend on
    # the order in which they were refined
    total = np.sum(vals, axis=0)
    err = np.sum(errs, axis=0)
    if np.ndim(total) == 0:
        total, err = float(total), float(err)
    return QuadResult(sign * total, err, converged, len(lefts))


# ---------------------------------------------------------------------------
# optimisation

@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    converged: bool
    method: str
    n_iter: int
    message: str = ""


def minimize(f: Callable, x0, spec: OptimizerSpec | None = None, grad=None) -> OptimResult:
    """Minimise `f` from `x0`.

    `grad` may be a callable, ``True`` (then `f` returns ``(value, gradient)``)
    or ``None``, in which case quasi-Newton runs on central differences.
    """
    spec = spec or OptimizerSpec()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if not np.isfinite(_value_of(f, x0, grad)):
        raise ValueError("objective is not finite at the starting point")
    if spec.method == "quasi-newton":
        jac = grad if grad is not None else "3-point"
        res = optimize.minimize(
            f, x0, jac=jac, method="BFGS",
            options={"gtol": spec.gradient_tol, "maxiter": spec.max_iterations,
                     "xrtol": spec.step_tol},
        )
        converged = bool(res.success)
        if not converged and res.status == 2 and res.jac is not None:
            # precision loss in the line search right at the optimum
            converged = bool(np.all(np.isfinite(res.jac)) and np.max(np.abs(res.jac)) <= 1e-5)
        fun = float(res.fun)
        return OptimResult(np.asarray(res.x), fun, converged and np.isfinite(fun),
                           "quasi-newton", int(res.nit), str(res.message))
    fun_only = f
    if grad is True:
        def fun_only(x):
            return f(x)[0]
    res = optimize.minimize(
        fun_only, x0, method="Nelder-Mead",
        options={"xatol": spec.step_tol, "fatol": spec.gradient_tol * 1e-2,
                 "maxiter": spec.max_iterations * len(x0), "adaptive": len(x0) > 2},
    )
    fun = float(res.fun)
    return OptimResult(np.asarray(res.x), fun, bool(res.success) and np.isfinite(fun),
                       "simplex", int(res.nit), str(res.message))


def _value_of(f, x, grad):
    v = f(x)
    if grad is True:
        v = v[0]
    return float(v)


def minimize_with_fallback(f: Callable, x0, spec: OptimizerSpec | None = None, grad=None,
                           feasible: Optional[Callable] = None) -> OptimResult:
    """Quasi-Newton first; simplex from the best iterate if that fails.

    Failure means nonconvergence, a non-finite optimum, or a violated
    `feasible` predicate.
    """
    spec = spec or OptimizerSpec()
    ok = lambda r: r.converged and np.all(np.isfinite(r.x)) and (feasible is None or feasible(r.x))
    first = None
    if spec.method == "quasi-newton":
        try:
            first = minimize(f, x0, spec, grad)
        except (FloatingPointError, ValueError, np.linalg.LinAlgError):
            first = None
        if first is not None and ok(first):
            return first
    start = x0
    if first is not None and np.all(np.isfinite(first.x)) and np.isfinite(first.fun):
        start = first.x
    simplex = OptimizerSpec("simplex", spec.gradient_tol, spec.step_tol, spec.max_iterations)
    second = minimize(f, start, simplex, grad)
    if not ok(second) and first is not None and np.isfinite(first.fun) and first.fun < second.fun:
        return first
    return second
