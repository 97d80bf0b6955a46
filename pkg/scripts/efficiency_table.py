"""Relative efficiency of the minimum-DPD estimator of rho against ML, over alpha and rho."""
import argparse

import numpy as np

from polyserial.inference import relative_efficiency
from polyserial.simulation import MAIN_THETA


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--alphas", type=float, nargs="+", default=[0, 0.1, 0.25, 0.5, 0.75, 1])
    ap.add_argument("--rhos", type=float, nargs="+", default=[0.0, 0.25, 0.5, 0.75, 0.9])
    ap.add_argument("--out", default=None, help="optional CSV path")
    args = ap.parse_args()

    rows = []
    for rho in args.rhos:
        th = MAIN_THETA.replace(rho=rho)
        rows.append([relative_efficiency(th, a) for a in args.alphas])
    table = np.array(rows)

    print("rho \\ alpha " + " ".join(f"{a:>7g}" for a in args.alphas))
    for rho, row in zip(args.rhos, table):
        print(f"{rho:>11g} " + " ".join(f"{v:>7.3f}" for v in row))
    if args.out:
        header = "rho," + ",".join(f"alpha_{a:g}" for a in args.alphas)
        np.savetxt(args.out, np.column_stack([args.rhos, table]), delimiter=",", header=header,
                   comments="", fmt="%.6g")


if __name__ == "__main__":
    main()
