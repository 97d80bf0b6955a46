"""Data generation under the model and contamination designs, and a Monte Carlo harness."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import log_ndtr, ndtri_exp

from . import estimators as est
from . import inference as inf
from .model import Dataset, ParamVector, ScoreSystem

FAMILIES = ("none", "shifted-t", "gross-error", "correlation-shift", "clayton-copula", "gumbel-copula")
COPULAS = ("clayton-copula", "gumbel-copula")
WORKERS_ENV = "POLYSERIAL_WORKERS"

DEFAULT_FAMILY_PARAMS = {
    "none": {},
    "shifted-t": {"loc": (10.0, -2.0), "scale": (0.25, 0.25), "df": 10.0},
    "gross-error": {"offset": 1e6},
    "correlation-shift": {},
    "clayton-copula": {},
    "gumbel-copula": {},
}


@dataclass(frozen=True)
class SimDesign:
    theta_star: ParamVector
    n: int = 500
    epsilon: float = 0.0
    family: str = "none"
    family_params: Mapping = field(default_factory=dict)
    contamination_thresholds: Optional[tuple] = None
    seed: int = 0
    repetitions: int = 200

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {', '.join(FAMILIES)}")
        if not 0.0 <= self.epsilon < 0.5:
            raise ValueError("epsilon must lie in [0, 0.5)")
        if self.repetitions < 1 or self.n < 1:
            raise ValueError("repetitions and n must be positive")
        if self.family in COPULAS and self.epsilon != 0:
            raise ValueError("copula families replace the whole sample; set epsilon = 0")
        if self.family == "none" and self.epsilon != 0:
            raise ValueError("epsilon > 0 needs a contamination family")
        unknown = set(self.family_params) - set(DEFAULT_FAMILY_PARAMS[self.family])
        if unknown:
            raise ValueError(f"unknown parameters for {self.family}: {', '.join(sorted(unknown))}")
        if self.contamination_thresholds is not None:
            t = np.asarray(self.contamination_thresholds, float)
            if t.size != self.theta_star.r - 1 or np.any(np.diff(t) <= 0):
                raise ValueError("contamination thresholds must be r-1 increasing values")

    @property
    def params(self) -> dict:
        out = dict(DEFAULT_FAMILY_PARAMS[self.family])
        out.update(self.family_params)
        return out

    @property
    def thresholds_h(self) -> np.ndarray:
        if self.contamination_thresholds is None:
            return np.asarray(self.theta_star.tau)
        return np.asarray(self.contamination_thresholds, float)

    @property
    def n_contaminated(self) -> int:
        # tiny offset guards against eps * n landing just below an integer
        return int(math.floor(self.epsilon * self.n + 1e-9))


class LabeledSample(NamedTuple):
    data: Dataset
    eta: np.ndarray
    contaminated: np.ndarray


def discretize(eta, tau) -> np.ndarray:
    """Category k when tau_{k-1} < eta <= tau_k."""
    return 1 + np.searchsorted(np.asarray(tau, float), eta, side="left")


def _normal_pairs(theta: ParamVector, n: int, rng: np.random.Generator, rho=None):
    rho = theta.rho if rho is None else rho
    z1 = rng.standard_normal(n)
    z2 = rng.standard_normal(n)
    eta = rho * z1 + math.sqrt(1.0 - rho * rho) * z2
    x = theta.mu + theta.sigma * z1
    return x, eta


def sample_polyserial(theta: ParamVector, n: int, rng: np.random.Generator) -> LabeledSample:
    x, eta = _normal_pairs(theta, n, rng)
    data = Dataset(x, discretize(eta, theta.tau), theta.r)
    return LabeledSample(data, eta, np.zeros(n, bool))


def _contamination(design: SimDesign, m: int, rng: np.random.Generator):
    fam, p = design.family, design.params
    if fam == "shifted-t":
        loc = np.asarray(p["loc"], float)
        scale = np.sqrt(np.asarray(p["scale"], float))
        z = rng.standard_normal((m, 2)) * scale
        w = rng.chisquare(p["df"], m)
        pts = loc + z / np.sqrt(w / p["df"])[:, None]
        return pts[:, 0], pts[:, 1]
    if fam == "gross-error":
        a = float(p["offset"])
        return a + rng.standard_normal(m), -a + rng.standard_normal(m)
    if fam == "correlation-shift":
        return _normal_pairs(design.theta_star, m, rng, rho=-design.theta_star.rho)
    raise ValueError(f"family {fam!r} has no contamination distribution")


def sample_contaminated(design: SimDesign, rng: np.random.Generator) -> LabeledSample:
    """Exactly floor(eps * N) rows from the contamination law, at shuffled positions."""
    if design.family in COPULAS:
        rho_g = design.theta_star.rho
        return sample_copula_model(design.family.split("-")[0], rho_g, design.theta_star.tau,
                                   design.n, rng)
    m = design.n_contaminated
    th = design.theta_star
    if m == 0:
        return sample_polyserial(th, design.n, rng)
    x0, e0 = _normal_pairs(th, design.n - m, rng)
    x1, e1 = _contamination(design, m, rng)
    y = np.concatenate((discretize(e0, th.tau), discretize(e1, design.thresholds_h)))
    x = np.concatenate((x0, x1))
    eta = np.concatenate((e0, e1))
    label = np.r_[np.zeros(design.n - m, bool), np.ones(m, bool)]
    perm = rng.permutation(design.n)
    return LabeledSample(Dataset(x[perm], y[perm], th.r), eta[perm], label[perm])


# ---------------------------------------------------------------------------
# copulas with standard normal margins

def _log_copula(family: str, par: float, lu, lv):
    """log C(u, v) from log u, log v."""
    if family == "clayton":
        # u^-t + v^-t - 1, computed as expm1 terms to keep precision near u, v -> 1
        s = np.expm1(-par * lu) + np.expm1(-par * lv) + 1.0
        return -np.log(s) / par
    if family == "gumbel":
        a = np.log(-lu) * par
        b = np.log(-lv) * par
        return -np.exp(np.logaddexp(a, b) / par)
    raise ValueError(f"unknown copula {family!r}")


@lru_cache(maxsize=None)
def _gl_grid(n_nodes: int = 256, half_width: float = 9.0):
    t, w = np.polynomial.legendre.leggauss(n_nodes)
    return half_width * t, half_width * w


def copula_normal_correlation(family: str, par: float) -> float:
    """Pearson correlation of the normal scores, via Hoeffding's covariance identity."""
    x, w = _gl_grid()
    lphi = log_ndtr(x)
    lu, lv = lphi[:, None], lphi[None, :]
    with np.errstate(over="ignore", under="ignore"):
        diff = np.exp(_log_copula(family, par, lu, lv)) - np.exp(lu + lv)
    return float(w @ diff @ w)


_PAR_RANGE = {"clayton": (1e-6, 60.0), "gumbel": (1.0 + 1e-9, 40.0)}


@lru_cache(maxsize=None)
def calibrate_copula(family: str, rho_g: float) -> float:
    """Dependence parameter giving normal-score correlation rho_g."""
    if family not in _PAR_RANGE:
        raise ValueError(f"unknown copula {family!r}")
    lo, hi = _PAR_RANGE[family]
    r_lo, r_hi = copula_normal_correlation(family, lo), copula_normal_correlation(family, hi)
    if not r_lo < rho_g < r_hi:
        raise ValueError(f"correlation {rho_g} not attainable by the {family} copula "
                         f"(range {r_lo:.4f} to {r_hi:.4f})")
    return float(brentq(lambda p: copula_normal_correlation(family, p) - rho_g, lo, hi, xtol=1e-12))


def _copula_log_uniforms(family: str, par: float, n: int, rng: np.random.Generator):
    e = rng.standard_exponential((n, 2))
    if family == "clayton":
        v = rng.gamma(1.0 / par, 1.0, n)
        return -np.log1p(e / v[:, None]) / par
    a = 1.0 / par
    if a == 1.0:
        return -e
    theta = rng.uniform(0.0, math.pi, n)
    w = rng.standard_exponential(n)
    # positive stable with Laplace transform exp(-t^a)
    s = (np.sin(a * theta) / np.sin(theta) ** (1.0 / a)) * (np.sin((1.0 - a) * theta) / w) ** ((1.0 - a) / a)
    return -(e / s[:, None]) ** a


def sample_copula_pairs(family: str, par: float, n: int, rng: np.random.Generator):
    lu = _copula_log_uniforms(family, par, n, rng)
    lu = np.minimum(lu, -1e-300)
    return ndtri_exp(lu[:, 0]), ndtri_exp(lu[:, 1])


def sample_copula_model(family: str, rho_g: float, thresholds, n: int,
                        rng: np.random.Generator) -> LabeledSample:
    """Draw (X, eta) from a copula with standard normal margins and discretize eta."""
    par = calibrate_copula(family, float(rho_g))
    x, eta = sample_copula_pairs(family, par, n, rng)
    tau = np.asarray(thresholds, float)
    return LabeledSample(Dataset(x, discretize(eta, tau), tau.size + 1), eta, np.zeros(n, bool))


# ---------------------------------------------------------------------------
# metrics

def angle_degrees(a, b) -> float:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("angle undefined for a zero vector")
    c = min(abs(float(a @ b)) / (na * nb), 1.0)
    return math.degrees(math.acos(c))


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator arm of a study."""
    estimator: str = "dpd"
    config: est.DpdConfig = field(default_factory=est.DpdConfig)

    @property
    def label(self) -> str:
        if self.estimator == "dpd":
            return "ml" if self.config.alpha == 0 else f"dpd-{self.config.alpha:g}"
        return self.estimator


def as_spec(item) -> EstimatorSpec:
    if isinstance(item, EstimatorSpec):
        return item
    if isinstance(item, est.DpdConfig):
        return EstimatorSpec("dpd", item)
    raise TypeError("expected EstimatorSpec or DpdConfig")


RECORD_FIELDS = ("rho_hat", "se", "converged", "unstable", "se_fail", "covered", "ci_length",
                 "angle", "point_polyserial", "error")


def _one_fit(sample: LabeledSample, spec: EstimatorSpec, theta_star: np.ndarray, rho_true, gamma):
    data = sample.data
    cfg = spec.config
    if cfg.weights:
        cfg = est.DpdConfig(cfg.alpha, cfg.optimizer, cfg.quadrature, cfg.start, False)
    try:
        res = est.fit(data, spec.estimator, cfg)
    except (ValueError, FloatingPointError):
        return (np.nan, np.nan, False, False, True, False, np.nan, np.nan, np.nan, True)
    rho = res.theta_hat.rho
    th = res.theta_hat.to_array()
    ang = angle_degrees(th, theta_star) if th.size == theta_star.size else np.nan
    pps = res.point_polyserial if res.point_polyserial is not None else np.nan
    cov = inf.fit_covariance(res, data, cfg.quadrature)
    if cov.se is None:
        se, covered, length, fail = np.nan, False, np.nan, True
    else:
        se = float(cov.se[0])
        ci = inf.confidence_interval(rho, se, gamma)
        se, covered, length, fail = se, ci.covers(rho_true), ci.length, False
    return (rho, se, res.converged, res.threshold_instability, fail, covered, length, ang, pps, False)


def _run_reps(args):
    design, specs, gamma, indices = args
    children = np.random.SeedSequence(design.seed).spawn(design.repetitions)
    th = design.theta_star.to_array()
    out = []
    for i in indices:
        rng = np.random.Generator(np.random.PCG64(children[i]))
        sample = sample_contaminated(design, rng)
        out.append([_one_fit(sample, s, th, design.theta_star.rho, gamma) for s in specs])
    return indices, out


@dataclass
class EstimatorSummary:
    label: str
    estimator: str
    alpha: float
    estimate_mean: float
    bias: float
    sd: float
    se_mean: float
    se_bias: float
    coverage: float
    ci_length: float
    angle_rmse: float
    point_polyserial_mean: float
    nonconv_frac: float
    se_fail_frac: float
    n_used: int


CSV_COLUMNS = ("estimator", "alpha", "estimate-mean", "bias", "sd", "se-mean", "se-bias",
               "coverage", "ci-length", "angle-rmse", "point-polyserial-mean", "nonconv-frac",
               "se-fail-frac", "n-used")


@dataclass
class SimReport:
    design: SimDesign
    gamma: float
    summaries: list
    records: dict  # label -> structured array of per-repetition records

    def summary(self, label: str) -> EstimatorSummary:
        for s in self.summaries:
            if s.label == label:
                return s
        raise KeyError(label)

    def to_json(self) -> str:
        d = self.design
        payload = {
            "design": {
                "theta_star": d.theta_star.to_array().tolist(), "n": d.n, "epsilon": d.epsilon,
                "family": d.family, "family_params": {k: list(v) if isinstance(v, tuple) else v
                                                      for k, v in d.params.items()},
                "contamination_thresholds": d.thresholds_h.tolist(), "seed": d.seed,
                "repetitions": d.repetitions,
            },
            "gamma": self.gamma,
            "estimators": [_json_clean(asdict(s)) for s in self.summaries],
        }
        return json.dumps(payload, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for s in self.summaries:
            w.writerow([s.label, _fmt(s.alpha), _fmt(s.estimate_mean), _fmt(s.bias), _fmt(s.sd),
                        _fmt(s.se_mean), _fmt(s.se_bias), _fmt(s.coverage), _fmt(s.ci_length),
                        _fmt(s.angle_rmse), _fmt(s.point_polyserial_mean), _fmt(s.nonconv_frac),
                        _fmt(s.se_fail_frac), s.n_used])
        return buf.getvalue()

    def table(self) -> str:
        cols = ("mean", "bias", "sd", "se", "coverage", "length", "nonconv", "sefail")
        lines = [f"{'estimator':<11}" + "".join(f"{c:>12}" for c in cols)]
        for s in self.summaries:
            vals = (s.estimate_mean, s.bias, s.sd, s.se_mean, s.coverage, s.ci_length,
                    s.nonconv_frac, s.se_fail_frac)
            lines.append(f"{s.label:<11}" + "".join(f"{_fmt(v):>12}" for v in vals))
        return "\n".join(lines)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "nan"
    return f"{v:.6g}"


def _json_clean(d):
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


_DTYPE = np.dtype([("rho_hat", float), ("se", float), ("converged", bool), ("unstable", bool),
                   ("se_fail", bool), ("covered", bool), ("ci_length", float), ("angle", float),
                   ("point_polyserial", float), ("error", bool)])


def _nanmean(v):
    return float(np.mean(v)) if v.size else float("nan")


def summarize(label: str, spec: EstimatorSpec, rec: np.ndarray, rho_true: float) -> EstimatorSummary:
    """Point metrics over converged, stable repetitions; SE metrics also need a computable SE."""
    n = rec.size
    failed = ~rec["converged"] | rec["unstable"] | rec["error"]
    ok = ~failed
    inf_ok = ok & ~rec["se_fail"]
    est_ = rec["rho_hat"][ok]
    mean = _nanmean(est_)
    sd = float(np.std(est_, ddof=1)) if est_.size > 1 else float("nan")
    se_mean = _nanmean(rec["se"][inf_ok])
    alpha = spec.config.alpha if spec.estimator == "dpd" else 0.0
    ang = rec["angle"][ok]
    return EstimatorSummary(
        label=label, estimator=spec.estimator, alpha=float(alpha),
        estimate_mean=mean, bias=mean - rho_true, sd=sd, se_mean=se_mean,
        se_bias=se_mean - sd, coverage=_nanmean(rec["covered"][inf_ok].astype(float)),
        ci_length=_nanmean(rec["ci_length"][inf_ok]),
        angle_rmse=float(np.sqrt(np.mean(ang ** 2))) if ang.size else float("nan"),
        point_polyserial_mean=_nanmean(rec["point_polyserial"][ok]),
        nonconv_frac=float(np.mean(failed)), se_fail_frac=float(np.mean(rec["se_fail"] & ~failed)),
        n_used=int(ok.sum()),
    )


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_study(design: SimDesign, configs: Sequence, gamma: float = 0.05,
              workers: Optional[int] = None) -> SimReport:
    """Run every estimator on each repetition; results are indexed and reduced by repetition."""
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    specs = [as_spec(c) for c in configs]
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ValueError("estimator configurations must be distinct")
    workers = default_workers() if workers is None else max(1, int(workers))
    reps = design.repetitions
    rows: list = [None] * reps
    if workers == 1 or reps == 1:
        _, out = _run_reps((design, specs, gamma, list(range(reps))))
        rows = out
    else:
        chunks = [list(range(i, reps, workers)) for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for idx, out in pool.map(_run_reps, [(design, specs, gamma, c) for c in chunks if c]):
                for i, r in zip(idx, out):
                    rows[i] = r
    records = {}
    summaries = []
    for j, (lab, spec) in enumerate(zip(labels, specs)):
        rec = np.array([tuple(rows[i][j]) for i in range(reps)], dtype=_DTYPE)
        records[lab] = rec
        summaries.append(summarize(lab, spec, rec, design.theta_star.rho))
    return SimReport(design, gamma, summaries, records)


# shorthand used by configs and scripts
MAIN_THETA = ParamVector(0.5, 0.0, 1.0, (-1.5, -0.5, 0.5, 1.5))
COPULA_THETA = ParamVector(0.7, 0.0, 1.0, (0.0, 1.0, 1.5, 2.0))
