"""Command-line interface: fit, weights, efficiency and simulate subcommands."""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import estimators as est
from . import inference as inf
from . import simulation as sim
from .model import Dataset, ParamVector, ScoreSystem, point_polyserial

log = logging.getLogger("polyserial")

EXIT_OK, EXIT_INPUT, EXIT_FLAGGED = 0, 1, 2
REPORT_KEYS = ("theta", "se", "ci", "point_polyserial", "weights_path", "converged", "method_used",
               "threshold_instability", "alpha", "se_singular", "gamma", "n", "category_mapping")


class InputError(Exception):
    """Bad user input; reported on stderr with exit status 1."""


@dataclasses.dataclass
class FitRequest:
    input_path: Path
    x_column: str = "x"
    y_column: str = "y"
    alpha: float = 0.5
    estimator: str = "dpd"
    scores: Optional[tuple] = None
    gamma: float = 0.05
    output_format: str = "json"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InputError("--alpha must lie in [0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise InputError("--gamma must lie in (0, 1)")
        if self.estimator not in ("ml", "two-step", "dpd"):
            raise InputError(f"unknown estimator {self.estimator!r}")


# ---------------------------------------------------------------------------
# input

def _label_key(values):
    try:
        nums = [float(v) for v in values]
    except ValueError:
        return None
    return nums


def factorize(labels: Sequence[str]):
    """Map ordered labels to codes 1..r.

    Numeric labels are sorted numerically and, when all integers, every integer between the
    smallest and largest label is a category, so gaps surface as empty categories.
    """
    uniq = sorted(set(labels))
    nums = _label_key(uniq)
    if nums is None:
        order = uniq
        mapping = {lab: i + 1 for i, lab in enumerate(order)}
        return np.array([mapping[v] for v in labels]), {str(k): v for k, v in mapping.items()}, len(order)
    pairs = sorted(zip(nums, uniq))
    if all(float(n).is_integer() for n, _ in pairs):
        lo, hi = int(pairs[0][0]), int(pairs[-1][0])
        codes = np.array([int(float(v)) - lo + 1 for v in labels])
        names = {}
        for n, lab in pairs:
            names.setdefault(int(n), lab)
        mapping = {names.get(k, str(k)): k - lo + 1 for k in range(lo, hi + 1)}
        return codes, mapping, hi - lo + 1
    mapping = {}
    for i, (n, lab) in enumerate(pairs):
        mapping[lab] = i + 1
    return np.array([mapping[v] for v in labels]), mapping, len(pairs)


def read_dataset(path, x_column="x", y_column="y"):
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise InputError(f"{path}: empty file or missing header row")
            missing = [c for c in (x_column, y_column) if c not in reader.fieldnames]
            if missing:
                raise InputError(f"{path}: missing column(s) {', '.join(missing)}; "
                                 f"found {', '.join(reader.fieldnames)}")
            xs, ys = [], []
            for lineno, row in enumerate(reader, start=2):
                xv, yv = (row[x_column] or "").strip(), (row[y_column] or "").strip()
                if xv == "" or yv == "":
                    raise InputError(f"{path}:{lineno}: missing value")
                try:
                    xs.append(float(xv))
                except ValueError:
                    raise InputError(f"{path}:{lineno}: x value {xv!r} is not numeric") from None
                ys.append(yv)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    if not xs:
        raise InputError(f"{path}: no data rows")
    codes, mapping, r = factorize(ys)
    if r < 2:
        raise InputError("y has a single category; need at least two")
    data = Dataset(np.array(xs), codes, r)
    empty = [lab for lab, k in mapping.items() if data.counts()[k - 1] == 0]
    if empty:
        raise InputError(f"category {', '.join(map(str, empty))} of {y_column!r} has no observations; "
                         "merge it with a neighbouring category")
    return data, mapping, ys


# ---------------------------------------------------------------------------
# fit

def param_names(r: int):
    return ["rho", "mu", "sigma2"] + [f"tau{k}" for k in range(1, r)]


def _num(v):
    return None if v is None or not math.isfinite(v) else float(v)


def run_fit(req: FitRequest):
    data, mapping, labels = read_dataset(req.input_path, req.x_column, req.y_column)
    scores = None
    if req.scores is not None:
        if len(req.scores) != data.r:
            raise InputError(f"--scores needs {data.r} values, got {len(req.scores)}")
        try:
            scores = ScoreSystem(tuple(req.scores))
        except ValueError as exc:
            raise InputError(str(exc)) from None
    config = est.DpdConfig(alpha=req.alpha if req.estimator == "dpd" else 0.0)
    try:
        res = est.fit(data, req.estimator, config)
    except est.EmptyCategoryError as exc:
        raise InputError(str(exc)) from None
    cov = inf.fit_covariance(res, data)
    names = param_names(data.r)
    theta = res.theta_hat.to_array()
    se = [None] * len(names) if cov.se is None else [float(v) for v in cov.se]
    ci = {}
    for nm, t, s in zip(names, theta, se):
        if s is None:
            ci[nm] = None
        else:
            c = inf.confidence_interval(float(t), s, req.gamma)
            ci[nm] = [c.lower, c.upper]
    pps = point_polyserial(res.theta_hat, scores) if scores is not None else res.point_polyserial
    report = {
        "theta": dict(zip(names, map(float, theta))),
        "se": dict(zip(names, se)),
        "ci": ci,
        "point_polyserial": _num(pps),
        "weights_path": None,
        "converged": res.converged,
        "method_used": res.method_used,
        "threshold_instability": res.threshold_instability,
        "alpha": res.alpha,
        "se_singular": cov.singular,
        "gamma": req.gamma,
        "n": data.n,
        "category_mapping": mapping,
    }
    return report, res, data, labels


def _fit_status(report) -> int:
    flagged = (not report["converged"]) or report["threshold_instability"] or report["se_singular"]
    return EXIT_FLAGGED if flagged else EXIT_OK


def _report_csv(report) -> str:
    rows = [("parameter", "estimate", "se", "ci_lower", "ci_upper")]
    for nm, t in report["theta"].items():
        s, c = report["se"][nm], report["ci"][nm]
        rows.append((nm, repr(t), "" if s is None else repr(s),
                     "" if c is None else repr(c[0]), "" if c is None else repr(c[1])))
    pps = report["point_polyserial"]
    rows.append(("point_polyserial", "" if pps is None else repr(pps), "", "", ""))
    return "\n".join(",".join(r) for r in rows) + "\n"


def _write(text: str, out: Optional[str]):
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def weights_rows(res, data, labels, sort=False):
    w = res.weights if res.weights is not None else est.compute_weights(res.theta_hat, data, res.alpha)
    idx = np.argsort(w, kind="stable") if sort else np.arange(data.n)
    rows = ["row_index,x,y,weight"]
    for i in idx:
        rows.append(f"{i},{float(data.x[i])!r},{labels[i]},{float(w[i])!r}")
    return "\n".join(rows) + "\n"


def cmd_fit(args) -> int:
    req = _request(args)
    report, res, data, labels = run_fit(req)
    if args.weights_out:
        Path(args.weights_out).write_text(weights_rows(res, data, labels, sort=False))
        report["weights_path"] = str(args.weights_out)
    if req.output_format == "json":
        _write(json.dumps(report, indent=2) + "\n", args.out)
    else:
        _write(_report_csv(report), args.out)
    status = _fit_status(report)
    if status == EXIT_FLAGGED:
        log.warning("fit flagged: converged=%s threshold_instability=%s se_singular=%s",
                    report["converged"], report["threshold_instability"], report["se_singular"])
    return status


def cmd_weights(args) -> int:
    req = _request(args)
    report, res, data, labels = run_fit(req)
    _write(weights_rows(res, data, labels, sort=args.sort), args.out)
    return _fit_status(report)


def _request(args) -> FitRequest:
    scores = None
    if args.scores:
        try:
            scores = tuple(float(v) for v in args.scores.split(","))
        except ValueError:
            raise InputError("--scores must be a comma-separated list of numbers") from None
    return FitRequest(Path(args.input), args.x_column, args.y_column, args.alpha, args.estimator,
                      scores, args.gamma, getattr(args, "format", "json"))


# ---------------------------------------------------------------------------
# efficiency

def efficiency_table(theta: ParamVector, alphas) -> str:
    vals = [inf.relative_efficiency(theta, a) for a in alphas]
    head = "alpha           " + " ".join(f"{a:>6g}" for a in alphas)
    row = "rel. efficiency " + " ".join(f"{v:>6.3f}" for v in vals)
    return head + "\n" + row + "\n"


def cmd_efficiency(args) -> int:
    try:
        theta = ParamVector.from_array(args.theta)
    except (ValueError, IndexError) as exc:
        raise InputError(f"illegal parameter vector: {exc}") from None
    alphas = []
    for a in args.alphas:
        if not 0.0 <= a <= 1.0:
            raise InputError(f"alpha {a} outside [0, 1]")
        if a in alphas:
            log.warning("duplicate alpha %g ignored", a)
            continue
        alphas.append(a)
    _write(efficiency_table(theta, alphas), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate

CONFIG_KEYS = {
    "design": {"family", "epsilon", "n", "repetitions", "seed", "rho", "mu", "sigma2", "tau",
               "contamination_thresholds"},
    "family": {"loc", "scale", "df", "offset"},
    "study": {"estimators", "gamma", "workers", "output"},
}


def _floats(text: str):
    return tuple(float(v) for v in text.replace(",", " ").split())


def parse_estimators(text: str):
    specs = []
    for tok in (t.strip() for t in text.split(",")):
        if not tok:
            continue
        if tok in ("ml", "two-step"):
            specs.append(sim.EstimatorSpec(tok, est.DpdConfig(0.0)))
        elif tok.startswith("dpd:"):
            specs.append(sim.EstimatorSpec("dpd", est.DpdConfig(float(tok[4:]))))
        else:
            raise InputError(f"unknown estimator entry {tok!r}; use ml, two-step or dpd:<alpha>")
    if not specs:
        raise InputError("no estimators configured")
    return specs


@dataclasses.dataclass
class StudyConfig:
    design: sim.SimDesign
    estimators: list
    gamma: float = 0.05
    workers: Optional[int] = None
    output: Optional[str] = None


def load_study_config(path) -> StudyConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    unknown = [f"[{s}]" for s in cp.sections() if s not in CONFIG_KEYS]
    for s in cp.sections():
        if s in CONFIG_KEYS:
            unknown += [f"{s}.{k}" for k in cp[s] if k not in CONFIG_KEYS[s]]
    if unknown:
        raise InputError(f"unknown config keys: {', '.join(unknown)}")
    if "design" not in cp:
        raise InputError("config needs a [design] section")
    d = cp["design"]
    try:
        theta = ParamVector(d.getfloat("rho", 0.5), d.getfloat("mu", 0.0), d.getfloat("sigma2", 1.0),
                            _floats(d.get("tau", "-1.5, -0.5, 0.5, 1.5")))
        fam_params = {}
        if "family" in cp:
            for k, v in cp["family"].items():
                vals = _floats(v)
                fam_params[k] = vals[0] if len(vals) == 1 else vals
        cth = d.get("contamination_thresholds")
        design = sim.SimDesign(
            theta_star=theta, n=d.getint("n", 500), epsilon=d.getfloat("epsilon", 0.0),
            family=d.get("family", "none"), family_params=fam_params,
            contamination_thresholds=_floats(cth) if cth else None,
            seed=d.getint("seed", 0), repetitions=d.getint("repetitions", 200))
        st = cp["study"] if "study" in cp else {}
        specs = parse_estimators(st.get("estimators", "ml, dpd:0.5"))
        gamma = float(st.get("gamma", 0.05))
        workers = int(st["workers"]) if "workers" in st else None
    except ValueError as exc:
        raise InputError(f"invalid config {path}: {exc}") from None
    return StudyConfig(design, specs, gamma, workers, st.get("output"))


def cmd_simulate(args) -> int:
    cfg = load_study_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.design = dataclasses.replace(cfg.design, seed=args.seed)
    workers = args.workers if args.workers is not None else cfg.workers
    prefix = args.out or cfg.output or Path(args.config).with_suffix("").name
    report = sim.run_study(cfg.design, cfg.estimators, cfg.gamma, workers)
    prefix = Path(prefix)
    if prefix.parent != Path("."):
        prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.json").write_text(report.to_json() + "\n")
    Path(f"{prefix}.csv").write_text(report.to_csv())
    print(report.table())
    print(f"wrote {prefix}.json and {prefix}.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------

def _add_fit_args(p):
    p.add_argument("input", help="CSV file with a header row")
    p.add_argument("--x-column", default="x")
    p.add_argument("--y-column", default="y")
    p.add_argument("--alpha", type=float, default=0.5, help="DPD tuning constant in [0, 1]")
    p.add_argument("--estimator", choices=("ml", "two-step", "dpd"), default="dpd")
    p.add_argument("--scores", help="comma-separated scores for the point polyserial correlation")
    p.add_argument("--gamma", type=float, default=0.05, help="CI level is 1 - gamma")
    p.add_argument("--seed", type=int, default=None, help="accepted for interface symmetry; fits are deterministic")
    p.add_argument("--out", default=None, help="output path, stdout by default")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polyserial", description="Robust polyserial correlation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a polyserial model to a CSV file")
    _add_fit_args(p)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--weights-out", default=None, help="write per-observation weights to this CSV")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("weights", help="per-observation weights from a robust fit")
    _add_fit_args(p)
    p.add_argument("--sort", action="store_true", help="sort by weight, smallest first")
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("efficiency", help="relative efficiency against ML at a parameter vector")
    p.add_argument("--theta", type=float, nargs="+", required=True,
                   help="rho mu sigma2 tau1 ... tau_{r-1}")
    p.add_argument("--alphas", type=float, nargs="+", default=[0, 0.1, 0.25, 0.5, 0.75, 1])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_efficiency)

    p = sub.add_parser("simulate", help="run a Monte Carlo study from a config file")
    p.add_argument("config")
    p.add_argument("--out", default=None, help="output prefix for .json and .csv")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help="override the design seed")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BrokenPipeError:
        # downstream reader closed early, e.g. piping into head
        sys.stderr.close()
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
