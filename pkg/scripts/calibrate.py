"""Scan the car's start position and the crossing-response margin.

For every candidate pair the script replays all-mean actions on the easy and
medium presets, and reports whether easy collides (with total reward 0) and
medium does not. It then estimates the uniform-random failure rate on medium
and hard, which decides whether the scenarios are searchable at all. The
frozen preset values (car x0 = -30 m, margin 0.5 m) came out of this scan.

    python3 scripts/calibrate.py [--samples 2000]
"""

import argparse

import numpy as np

from stresslab.core import replay
from stresslab.crosswalk import CrosswalkSim, preset


def mean_replay(cfg):
    sim = CrosswalkSim(cfg)
    return replay(sim, None, [sim.action_model.mean] * cfg.horizon)


def random_failure_rate(cfg, n, seed=0):
    sim = CrosswalkSim(cfg)
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n):
        h = sim.initialize()
        while not h.is_terminal():
            out = h.step(rng.uniform(sim.action_low, sim.action_high))
        hits += out.event
    return hits / n


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=2000)
    ap.add_argument("--x0", type=float, nargs="*", default=[-40.0, -35.0, -30.0, -25.0])
    ap.add_argument("--margin", type=float, nargs="*", default=[0.0, 0.5, 1.0])
    args = ap.parse_args()

    print(f"{'x0':>6} {'margin':>6} {'A easy':>7} {'B medium':>8} {'p(medium)':>9} {'p(hard)':>8}")
    for x0 in args.x0:
        for margin in args.margin:
            over = dict(car_pos0=(x0, 0.0), response_margin=margin)
            easy, med, hard = (preset(n).replace(**over) for n in ("easy", "medium", "hard"))
            te, tm = mean_replay(easy), mean_replay(med)
            prop_a = te.ends_in_failure and te.total_reward == 0.0
            prop_b = not tm.ends_in_failure
            rates = ("", "")
            if prop_a and prop_b:
                rates = (f"{random_failure_rate(med, args.samples):.4f}",
                         f"{random_failure_rate(hard, args.samples):.4f}")
            print(f"{x0:6.1f} {margin:6.2f} {str(prop_a):>7} {str(prop_b):>8} {rates[0]:>9} {rates[1]:>8}")


if __name__ == "__main__":
    main()
