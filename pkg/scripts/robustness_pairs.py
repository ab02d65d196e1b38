"""Paired baseline/ATCL robustness runs on the synthetic grammar corpus.

    python scripts/robustness_pairs.py --seeds 5 --steps 1500
"""

import argparse
import json

from atcl.experiments import robustness_pair


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--steps", type=int, default=1500)
    parser.add_argument("--n-train", type=int, default=120)
    parser.add_argument("--samples", type=int, default=400)
    parser.add_argument("--eval-epsilon", type=float, default=None)
    args = parser.parse_args()
    wins = 0
    for seed in range(args.seeds):
        pair = robustness_pair(seed, steps=args.steps, n_train=args.n_train, samples=args.samples,
                               eval_epsilon=args.eval_epsilon)
        wins += pair.atcl_lower
        print(json.dumps(vars(pair)), flush=True)
    print(f"atcl lower in {wins}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
