"""Run the shipped simulation configs and collect their summary tables.

    python scripts/run_simulations.py                       # every config in configs/
    python scripts/run_simulations.py main_eps005 gross_error --repetitions 50
"""
import argparse
import dataclasses
import time
from pathlib import Path

from polyserial.cli import load_study_config
from polyserial.simulation import run_study

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description="run simulation studies from configs/")
    ap.add_argument("names", nargs="*", help="config names without .cfg (default: all but smoke)")
    ap.add_argument("--repetitions", type=int, default=None, help="override the repetition count")
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--results", default=str(ROOT / "results"))
    args = ap.parse_args()

    cfg_dir = ROOT / "configs"
    paths = [cfg_dir / f"{n}.cfg" for n in args.names] or \
        sorted(p for p in cfg_dir.glob("*.cfg") if p.stem != "smoke")
    out_dir = Path(args.results)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in paths:
        cfg = load_study_config(path)
        design = cfg.design
        if args.repetitions:
            design = dataclasses.replace(design, repetitions=args.repetitions)
        t0 = time.perf_counter()
        rep = run_study(design, cfg.estimators, cfg.gamma, args.workers or cfg.workers)
        elapsed = time.perf_counter() - t0
        (out_dir / f"{path.stem}.csv").write_text(rep.to_csv())
        (out_dir / f"{path.stem}.json").write_text(rep.to_json() + "\n")
        print(f"== {path.stem}: {design.family}, eps={design.epsilon:g}, N={design.n}, "
              f"{design.repetitions} reps, {elapsed:.1f}s")
        print(rep.table())
        print()


if __name__ == "__main__":
    main()
