"""Train baseline and ATCL translation models on the copy-and-reverse task and print BLEU trajectories."""

import argparse
import json

from atcl.experiments import toy_translation


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=1250)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--modes", nargs="+", default=["baseline", "atcl"])
    args = parser.parse_args()
    for mode in args.modes:
        final, trajectory = toy_translation(mode, steps=args.steps, seed=args.seed)
        print(json.dumps({"mode": mode, "bleu": final, "trajectory": trajectory}), flush=True)


if __name__ == "__main__":
    main()
