#!/usr/bin/env python3
"""Median rtt_bias against extra outbound UDP delay, next to the value expected from the path RTT."""

import argparse
from dataclasses import replace

from wireimage.metrics import rtt_bias
from wireimage.pathlab import ImpairmentProfile, PathConfig
from wireimage.pathlab.harness import SCENARIOS, harness_run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--extra-ms", default="0,5,10,20,40,80")
    ap.add_argument("--pairs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    base = 2 * PathConfig().one_way_delay * 1000.0
    print(f"base RTT {base:.0f} ms")
    print("extra_ms  expected  median_rtt_bias")
    for extra in (float(x) for x in args.extra_ms.split(",")):
        sc = replace(SCENARIOS["udp-latency"], profile=ImpairmentProfile(extra_latency_udp=extra),
                     params={"pairs": {1: args.pairs}})
        rep = harness_run(sc, seed=args.seed)
        print(f"{extra:8.0f}  {rtt_bias(base, base + extra):8.1f}  {rep.observed['median_rtt_bias']:15.2f}")


if __name__ == "__main__":
    main()
