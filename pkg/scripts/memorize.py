"""Train the baseline LM on a short repeated corpus until its perplexity drops to the target."""

import argparse

from atcl.experiments import memorize


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--target", type=float, default=1.2)
    parser.add_argument("--max-steps", type=int, default=5000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    steps, ppl, seconds = memorize(max_steps=args.max_steps, target=args.target, seed=args.seed)
    print(f"perplexity {ppl:.4f} after {steps} steps ({seconds:.1f}s)")


if __name__ == "__main__":
    main()
