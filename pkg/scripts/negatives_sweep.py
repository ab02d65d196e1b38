"""Sweep training mode and negative-sample count on the desk-scale LM; report losses and held-out perplexity."""

import argparse
import itertools
import json

from atcl.evaluation import perplexity
from atcl.experiments import DESK_LM
from atcl.synthetic import grammar_corpus
from atcl.tasks import lm_task
from atcl.text import make_batches
from atcl.training import TrainConfig, train


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--negatives", type=int, nargs="+", default=[5, 10, 20])
    parser.add_argument("--modes", nargs="+", default=["baseline", "adv-only", "atcl"])
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    train_text, valid_text = grammar_corpus(400, seed=0), grammar_corpus(60, seed=1)
    for mode, n in itertools.product(args.modes, args.negatives):
        if mode != "atcl" and n != args.negatives[0]:
            continue  # n only matters when the contrastive term is on
        config = TrainConfig(**DESK_LM, mode=mode, n_negatives=n, max_steps=args.steps,
                             eval_interval=args.steps, seed=args.seed)
        data = lm_task(config, train_text)
        result = train(config, data)
        valid = make_batches(valid_text, data.vocab, config.batch_size, config.seq_len)
        last = result.records[-1]
        print(json.dumps({"mode": mode, "n_negatives": n, "L": last.L, "L_adv": last.L_adv,
                          "L_cont": last.L_cont, "valid_ppl": perplexity(result.model, result.params, valid)}),
              flush=True)


if __name__ == "__main__":
    main()
