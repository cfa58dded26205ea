"""Cluster-size PMFs under self-excitation against the Poisson (nu = 0) reference.

    python scripts/clusters.py --segments 100000
"""

import argparse

import numpy as np

from tauhawkes import model_a
from tauhawkes.analytics import DEFAULT_CLUSTER_THRESHOLDS, cluster_pmf, total_variation
from tauhawkes.simulate import simulate_segments


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--segments", type=int, default=100_000)
    ap.add_argument("--end", type=float, default=40.0)
    ap.add_argument("--nu", type=float, default=0.7)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-size", type=int, default=4)
    args = ap.parse_args()

    ends = np.full(args.segments, args.end)
    out = {}
    for label, nu in (("excited", args.nu), ("poisson", 0.0)):
        rng = np.random.default_rng(args.seed)
        out[label] = simulate_segments(model_a(0.1, nu, (), (9.0, 4.5)), ends, np.zeros((args.segments, 0)), rng)
    for th in DEFAULT_CLUSTER_THRESHOLDS:
        p, q = cluster_pmf(out["excited"], th), cluster_pmf(out["poisson"], th)
        sizes = "  ".join(f"{k}: {p.probability(k):.4f}/{q.probability(k):.4f}" for k in range(1, args.max_size + 1))
        print(f"threshold {th:g} min  {sizes}  TV {total_variation(p, q):.4f}")


if __name__ == "__main__":
    main()
