"""Solve a zero-sum payoff matrix (defender rows maximise, attacker columns minimise).

    python scripts/solve_game.py runs/mini/game/payoff.csv
    python scripts/solve_game.py --random 5x4
"""

import argparse
import csv

import numpy as np

from tapm import game


def load(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return game.PayoffMatrix(np.array([[float(v) for v in r[1:]] for r in rows[1:]]),
                             [r[0] for r in rows[1:]], rows[0][1:])


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("csv", nargs="?")
    ap.add_argument("--random", metavar="MxN")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if args.csv:
        R = load(args.csv)
    else:
        m, n = map(int, (args.random or "4x4").split("x"))
        R = game.PayoffMatrix(np.random.default_rng(args.seed).uniform(0, 100, size=(m, n)))
    lp = game.solve_zero_sum_lp(R)
    mwu = game.solve_multiplicative_weights(R)
    lo, hi = game.pure_bounds(R)
    np.set_printoptions(precision=3, suppress=True)
    print(f"pure max-min {lo:.3f} <= value <= pure min-max {hi:.3f}")
    print(f"LP   value {lp.value:.4f}  defender {lp.defender}  attacker {lp.attacker}")
    print(f"MWU  value {mwu.value:.4f}  gap {mwu.gap:.2e} after {mwu.iterations} iterations")
    print("saddle points:", game.pure_saddles(R) or "none")
