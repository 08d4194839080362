#!/usr/bin/env python3
"""Downtime of stop-copy, pre-copy and post-copy migration.

The reference point is a fully resident 4 GiB guest on a 2 Gbit/s link
dirtying pages at 10% of link rate.  ``--sweep`` adds a grid over guest
size, link rate and dirty fraction using smaller guests.
"""

import argparse
import csv
import itertools
import sys

from vmstream.host import GIB
from vmstream.pages import PAGE_SIZE
from vmstream.reference import measure_migration

MODES = ("stopcopy", "precopy", "postcopy")


def grid():
    sizes = [16384, 65536]  # 64 MiB, 256 MiB
    links = [1e9, 2e9]
    dirty = [0.0, 0.05, 0.10, 0.20, 0.30]
    return list(itertools.product(sizes, links, dirty))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--sweep", action="store_true", help="also run the 20-point grid")
    p.add_argument("--skip-reference", action="store_true")
    args = p.parse_args(argv)
    points = [] if args.skip_reference else [(4 * GIB // PAGE_SIZE, 2e9, 0.10)]
    if args.sweep:
        points += grid()
    w = csv.writer(sys.stdout)
    w.writerow(["pages", "nic_gbps", "dirty_fraction", "mode", "rounds", "downtime_us", "total_us", "bytes"])
    for pages, nic, dirty in points:
        for mode in MODES:
            r = measure_migration(mode, page_count=pages, nic_bps=nic, dirty_fraction=dirty)
            w.writerow([pages, nic / 1e9, dirty, mode, r.rounds, r.downtime_us, r.total_us, r.bytes_transferred])
            sys.stdout.flush()


if __name__ == "__main__":
    main()
