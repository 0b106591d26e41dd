#!/usr/bin/env python3
"""Run emulator scenarios over several seeds and print one line per (scenario, seed)."""

import argparse
import json
import sys
import time

from wireimage.pathlab.harness import SCENARIOS, harness_run


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("scenarios", nargs="*", help="default: all except udp-ratelimit")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--json", help="also write reports as JSONL here")
    args = ap.parse_args()
    names = args.scenarios or [n for n in SCENARIOS if n != "udp-ratelimit"]
    out = open(args.json, "w") if args.json else None
    failed = 0
    for name in names:
        for seed in range(args.seeds):
            t0 = time.perf_counter()
            rep = harness_run(name, seed=seed)
            dt = time.perf_counter() - t0
            failed += not rep.passed
            print(f"{name:18s} seed {seed}  {'PASS' if rep.passed else 'FAIL'}  {dt:6.1f}s  "
                  + "; ".join(f"{c.name}: {c.observed}" for c in rep.checks))
            if out:
                out.write(json.dumps(rep.to_dict()) + "\n")
    if out:
        out.close()
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
