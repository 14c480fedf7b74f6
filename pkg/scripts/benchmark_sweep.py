#!/usr/bin/env python3
"""Wall-clock scaling sweep over problem sizes.

Times one filter step (measurement update plus propagation) for each
backend at each track count and fits a log-log slope, printing progress as
it goes. The joint filter should come out near slope 1 and the dense
baseline near slope 3 (2 in its measurement-dominated regime).
"""

import argparse

from jtr.simkit import benchmark, write_timing_csv


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", default="10,50,100,300",
                    help="comma-separated ascending track counts")
    ap.add_argument("--trials", type=int, default=5)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", default=None, help="optional timing.csv path")
    args = ap.parse_args()

    n_list = [int(p) for p in args.n.split(",")]

    def progress(algo, n, median):
        print(f"  {algo:>5} n={n:<4d} median {median * 1e3:8.3f} ms")

    rows, medians, slopes = benchmark(n_list, trials=args.trials,
                                      seed=args.seed, progress=progress)
    print("\nlog-log slopes:")
    for algo, slope in slopes.items():
        print(f"  {algo:>5}: {slope:.3f}")
    n_big = n_list[-1]
    ratio = medians["dense"][n_big] / medians["fmap"][n_big]
    print(f"\ndense/fmap at n={n_big}: {ratio:.1f}x")
    if args.out:
        write_timing_csv(args.out, rows)
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
