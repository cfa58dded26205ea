"""Parameter recovery for the constant/proportional model on flat synthetic segments.

    python scripts/recovery.py --reps 5 --segments 2000
"""

import argparse
import time

import numpy as np

from tauhawkes import McemConfig, initial_spec, mcem_fit, model_a
from tauhawkes.simulate import simulate_segments


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--segments", type=int, default=2000)
    ap.add_argument("--end", type=float, default=40.0)
    ap.add_argument("--nu", type=float, default=0.7)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    truth = model_a(0.10, args.nu, (-0.12,), (9.0, 4.5))
    names = truth.parameter_names()
    true = dict(zip(names, truth.natural_parameters()))
    print("rep  " + "  ".join(f"{n:>18s}" for n in names) + "    secs")
    for r in range(args.reps):
        t0 = time.perf_counter()
        rng = np.random.default_rng(args.seed + r)
        z = rng.standard_normal(args.segments)
        segs = simulate_segments(truth, np.full(args.segments, args.end), z, rng)
        fit = mcem_fit(segs, initial_spec(truth, segs), McemConfig(seed=args.seed + r))
        est, se = fit.estimates(), fit.standard_errors
        cells = [f"{est[n]:8.4f} ({se[n]:7.4f})" for n in names]
        print(f"{r:3d}  " + "  ".join(f"{c:>18s}" for c in cells) + f"  {time.perf_counter() - t0:6.1f}")
    print("truth" + "  ".join(f"{true[n]:>18.4f}" for n in names))


if __name__ == "__main__":
    main()
