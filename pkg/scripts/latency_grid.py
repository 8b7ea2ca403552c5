"""Run the 4 x 4 latency grid and write one CSV row per (config, stage)."""

import argparse
from pathlib import Path

from e3dapp import bench


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("results/latency_grid.csv"))
    ap.add_argument("--n-loops", type=int, default=10_000)
    ap.add_argument("--transport", choices=("ipc", "tcp"), default="ipc")
    ap.add_argument("--mode", choices=("process", "thread"), default="process")
    args = ap.parse_args()
    args.out.parent.mkdir(parents=True, exist_ok=True)

    def show(res):
        s = res.summary
        print(f"{res.config.config_id:2d} ind={res.config.indication_bytes:5d}B ctrl={res.config.control_bytes:4d}B "
              + " ".join(f"{k}={s[k].mean_us:7.1f}" for k in bench.STAGES))

    bench.run_grid(bench.grid(args.n_loops, args.transport), args.out, mode=args.mode, progress=show)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
