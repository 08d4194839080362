#!/usr/bin/env python3
"""How many 4 GiB guests one 16 GiB host admits: cold boots versus clones."""

import argparse
import json

from vmstream.reference import density_pair
from vmstream.sim import compare, run


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--attempts", type=int, default=24)
    p.add_argument("--touch", type=float, nargs="+", default=[0.125, 0.25, 0.5])
    args = p.parse_args(argv)
    for touch in args.touch:
        baseline, vms = density_pair(attempts=args.attempts, touch_fraction=touch)
        b, v = run(baseline), run(vms)
        rep = compare(b, v)
        print(json.dumps({"touch_fraction": touch,
                          "booted": sum(r["kind"] == "boot" for r in b.vms.values()),
                          "cloned": sum(r["kind"] == "clone" for r in v.vms.values()),
                          "density_ratio": rep.density_ratio}))


if __name__ == "__main__":
    main()
