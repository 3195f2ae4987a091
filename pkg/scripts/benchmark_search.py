"""Single-query latency benchmark against a large random patch index.

Builds 165 patches x --images random records, then reports build time and
query latency percentiles at the requested probe fraction.

Usage: python scripts/benchmark_search.py [--images 5000] [--dim 64]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from instructmine.index import PatchKey, build_index, default_num_clusters, search


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--images", type=int, default=5000)
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--num-clusters", type=int, default=256)
    parser.add_argument("--probe-fraction", type=float, default=300 / 909,
                        help="fraction of clusters visited per query")
    parser.add_argument("--k", type=int, default=1000)
    parser.add_argument("--queries", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    n_records = args.images * 165
    vecs = rng.standard_normal((n_records, args.dim)).astype(np.float32)
    records = []
    pos = 0
    for i in range(args.images):
        image_id = f"img{i:06d}"
        for g in (1, 3, 5, 7, 9):
            for r in range(g):
                for c in range(g):
                    records.append((PatchKey(image_id, g, r, c), vecs[pos]))
                    pos += 1

    print(f"{n_records} records, dim {args.dim}, "
          f"{args.num_clusters} clusters (sqrt-N default would be "
          f"{default_num_clusters(n_records)})")
    t0 = time.time()
    index = build_index(records, num_clusters=args.num_clusters, seed=args.seed)
    print(f"build: {time.time() - t0:.1f}s")

    nprobe = max(1, round(args.num_clusters * args.probe_fraction))
    queries = rng.standard_normal((args.queries, args.dim))
    search(index, queries[0], k=args.k, nprobe=nprobe)  # warm-up
    times = []
    for q in queries:
        t1 = time.perf_counter()
        search(index, q, k=args.k, nprobe=nprobe)
        times.append((time.perf_counter() - t1) * 1000)
    times = np.asarray(times)
    print(
        f"query @ nprobe={nprobe} ({args.probe_fraction:.0%} of cells), k={args.k}: "
        f"median {np.median(times):.1f} ms, p90 {np.percentile(times, 90):.1f} ms, "
        f"max {times.max():.1f} ms over {args.queries} queries"
    )


if __name__ == "__main__":
    main()
