#!/usr/bin/env python3
"""Simultaneous launch of many clones: readiness and wire bytes per host."""

import argparse
import json
import time

from vmstream.reference import scaleout_scenario
from vmstream.sim import run


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--clones", type=int, nargs="+", default=[20, 100, 200])
    p.add_argument("--hosts", type=int, default=4)
    args = p.parse_args(argv)
    for n in args.clones:
        t = time.perf_counter()
        m = run(scaleout_scenario(clones=n, hosts=args.hosts))
        clones = [v for v in m.vms.values() if v["kind"] == "clone"]
        print(json.dumps({
            "clones": n,
            "ready": sum(v["startup_latency_us"] is not None for v in clones),
            "max_startup_us": max(v["startup_latency_us"] or 0 for v in clones),
            "demand_content_bytes": m.content_bytes_by_purpose.get("demand", 0),
            "demand_wire_bytes": m.wire_by_purpose.get("demand", 0),
            "wall_s": round(time.perf_counter() - t, 2),
        }))


if __name__ == "__main__":
    main()
