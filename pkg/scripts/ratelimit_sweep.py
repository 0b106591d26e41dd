#!/usr/bin/env python3
"""How strong must a UDP policer be before tp_bias flags it?

Polices UDP at a fraction of the calibrated TCP throughput and reports the
median tp_bias of each run.  With a 1 s bucket depth, small flows fit inside
the burst allowance, so the sweep is run at a large flow size by default.
"""

import argparse
import statistics

from wireimage.pathlab.harness import harness_run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--fractions", default="0.25,0.5,0.75,1.0,2.0")
    ap.add_argument("--size-iw", type=int, default=300)
    ap.add_argument("--runs", type=int, default=3)
    ap.add_argument("--pairs-per-run", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print("fraction  runs  median-of-run-medians  min    max")
    for f in (float(x) for x in args.fractions.split(",")):
        rep = harness_run("udp-ratelimit", seed=args.seed, fraction=f, size_iw=args.size_iw,
                          runs=args.runs, pairs_per_run=args.pairs_per_run)
        meds = [m for m in rep.observed["run_median_tp_bias"] if m is not None]
        print(f"{f:8.2f}  {len(meds):4d}  {statistics.median(meds):21.1f}  {min(meds):6.1f} {max(meds):6.1f}")


if __name__ == "__main__":
    main()
