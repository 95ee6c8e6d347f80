"""Minimal stand-in for a niche-modelling package.

Setting ENMTOY_DRIFT in the environment simulates having a different release
installed: the version string changes and so does the partitioning scheme.
"""

import csv
import os
import random

__version__ = "0.2.0" if os.environ.get("ENMTOY_DRIFT") else "0.1.0"


def read_occurrences(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def clean(rows):
    """Drop records without coordinates and collapse duplicates."""
    seen = set()
    out = []
    for row in rows:
        try:
            lon = round(float(row["lon"]), 4)
            lat = round(float(row["lat"]), 4)
        except (KeyError, TypeError, ValueError):
            continue
        key = (row["species"].strip(), lon, lat)
        if key in seen:
            continue
        seen.add(key)
        out.append(key)
    return out


def partition(n, folds, seed):
    rng = random.Random(seed)
    if __version__ == "0.1.0":
        order = list(range(n))
        rng.shuffle(order)
        assignment = [0] * n
        for rank, index in enumerate(order):
            assignment[index] = rank % folds + 1
        return assignment
    return [rng.randrange(folds) + 1 for _ in range(n)]
