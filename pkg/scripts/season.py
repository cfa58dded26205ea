"""Simulate replicated seasons from a model and summarise them.

    python scripts/season.py --reps 50 --nu 0.7
"""

import argparse

from tauhawkes import model_a
from tauhawkes.analytics import season_summaries
from tauhawkes.simulate import MatchSchedule, SimConfig, simulate_season


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=50)
    ap.add_argument("--matches", type=int, default=233)
    ap.add_argument("--lambda0", type=float, default=0.055)
    ap.add_argument("--nu", type=float, default=0.7)
    ap.add_argument("--beta", type=float, default=-0.12)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    spec = model_a(args.lambda0, args.nu, (args.beta,), (9.0, 4.5))
    cfg = SimConfig(spec, MatchSchedule(n_matches=args.matches), columns=("X2",),
                    replications=args.reps, seed=args.seed, threads=args.threads)
    tables = simulate_season(cfg)
    print(f"{'statistic':28s} {'mean':>8s}  95% band")
    for row in season_summaries(tables):
        print(f"{row.statistic:28s} {row.mean:8.3f}  {row.band}")


if __name__ == "__main__":
    main()
