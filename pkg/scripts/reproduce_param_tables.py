"""Print parameter and FLOP totals for every structure and rank with published counts."""

import argparse
import csv
import sys

from lrtabl.layers import flop_count
from lrtabl.model import structure_spec, total_param_count

MAX_RANK = {"A": 3, "B": 20, "C": 23}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--structure", choices=sorted(MAX_RANK), action="append")
    args = ap.parse_args()

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["structure", "variant", "K", "params", "flops"])
    for sid in args.structure or sorted(MAX_RANK):
        specs = [structure_spec(sid)] + [structure_spec(sid, "lowrank", k) for k in range(1, MAX_RANK[sid] + 1)]
        for spec in specs:
            flops = sum(sum(flop_count(s).values()) for s in spec.layers)
            w.writerow([sid, spec.variant, spec.rank or "", total_param_count(spec), flops])


if __name__ == "__main__":
    main()
