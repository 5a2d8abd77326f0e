#!/usr/bin/env python3
"""Generate the committed 1-D k-means oracle cases.

Each case is a small weighted sample (at most 12 distinct integer codes in the
12-bit activation domain) together with the globally optimal clustering
objective for 2 or 4 clusters. In one dimension the optimal k-means partition
is contiguous over the sorted values, so exhaustive search over contiguous
partitions is a true global oracle and stays tiny at this size (at most
C(11,3) = 165 candidates).

The oracle evaluates candidate partitions with the same float64 expressions
the Lloyd implementation uses, so when Lloyd reaches the optimal partition
the two objectives agree bit for bit; the committed tolerance only has to
absorb genuine arithmetic ties.

The RNG seed is fixed ahead of time and the generated file is committed; the
test suite replays these cases, it never regenerates them.
"""

import itertools
import json
from pathlib import Path

import numpy as np

from actquant.calib import lloyd_1d

ROOT = Path(__file__).resolve().parent.parent
OUT = ROOT / "tests" / "data" / "kmeans_cases.json"
SEED = 20260823
N_CASES = 50
TOL = 1e-9


def partition_objective(v: np.ndarray, w: np.ndarray, bounds) -> float:
    """Weighted SSE of a contiguous partition, float-identical to Lloyd's."""
    cent = np.empty(len(bounds) - 1, dtype=np.float64)
    assign = np.empty(v.size, dtype=np.intp)
    for j, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
        cent[j] = np.sum(w[lo:hi] * v[lo:hi]) / w[lo:hi].sum()
        assign[lo:hi] = j
    return float(np.sum(w * (v - cent[assign]) ** 2))


def oracle_optimum(values, counts, clusters: int) -> float:
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(counts, dtype=np.float64)
    parts = min(clusters, v.size)
    best = np.inf
    for cuts in itertools.combinations(range(1, v.size), parts - 1):
        bounds = (0, *cuts, v.size)
        best = min(best, partition_objective(v, w, bounds))
    return best


def main():
    rng = np.random.default_rng(SEED)
    cases = []
    misses = 0
    for i in range(N_CASES):
        n = int(rng.integers(2, 13))
        values = np.sort(rng.choice(4096, size=n, replace=False)).tolist()
        counts = rng.integers(1, 200, size=n).tolist()
        t = int(rng.integers(1, 3))
        opt = oracle_optimum(values, counts, 1 << t)
        _, lloyd_obj = lloyd_1d(values, counts, 1 << t)
        gap = lloyd_obj - opt
        if abs(gap) > TOL:
            misses += 1
            print(f"case {i}: lloyd {lloyd_obj!r} vs oracle {opt!r} (gap {gap:.3e})"
                  f" n={n} t={t}")
        cases.append({
            "values": values,
            "counts": counts,
            "t": t,
            "oracle_objective": opt,
        })
    payload = {"schema": 1, "seed": SEED, "cases": cases}
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(cases)} cases to {OUT}")
    print(f"lloyd attained the oracle optimum on {N_CASES - misses}/{N_CASES}")


if __name__ == "__main__":
    main()
