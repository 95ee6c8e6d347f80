"""Setup step of a toy niche-modelling workflow.

Cleans the occurrence records and assigns each to a cross-validation fold
using a seeded random partition, then writes out/sdmdata.txt.
"""

import argparse
import os

import enmtoy


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--seed", type=int, default=512)
    parser.add_argument("--folds", type=int, default=3)
    parser.add_argument("--occurrences", default="data/occurrences.csv")
    parser.add_argument("--out", default="out/sdmdata.txt")
    args = parser.parse_args()

    records = enmtoy.clean(enmtoy.read_occurrences(args.occurrences))
    folds = enmtoy.partition(len(records), args.folds, args.seed)

    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("species\tlon\tlat\tfold\n")
        for (species, lon, lat), fold in zip(records, folds):
            fh.write(f"{species}\t{lon:.4f}\t{lat:.4f}\t{fold}\n")


if __name__ == "__main__":
    main()
