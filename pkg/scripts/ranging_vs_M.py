"""Median and 90th-percentile ranging error against snapshot count M and SNR."""

import argparse
import csv
import sys

import numpy as np

from e3dapp.ranging import RangingConfig, estimate_distance
from e3dapp.ransim import RadioConfig, gen_cir


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--M", type=int, nargs="+", default=[20, 30, 40, 60])
    ap.add_argument("--snr-db", type=float, nargs="+", default=[-20.0, -10.0, 0.0])
    ap.add_argument("--trials", type=int, default=200)
    ap.add_argument("--K", type=int, default=128, help="subcarriers per snapshot")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    radio = RadioConfig()
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["snr_db", "M", "median_err_m", "p90_err_m", "trials"])
    for snr in args.snr_db:
        for M in args.M:
            errs = []
            for t in range(args.trials):
                d = 3 + t % 8  # 3..10 m in 1 m steps
                snaps = gen_cir(radio, d, snr, M, n_subcarriers=args.K, seed=args.seed + t)
                errs.append(abs(estimate_distance(snaps, RangingConfig(M=M)).distance_m - d))
            w.writerow([snr, M, f"{np.median(errs):.4f}", f"{np.percentile(errs, 90):.4f}", args.trials])


if __name__ == "__main__":
    main()
