"""Desk-scale experiments shared by the acceptance suite and the scripts in ``scripts/``."""

from __future__ import annotations

import time
from dataclasses import dataclass

from .evaluation import perplexity, robustness_divergence
from .synthetic import copy_reverse_pairs, grammar_corpus, memorizable_corpus
from .tasks import lm_task, nmt_task
from .text import make_batches
from .training import RngStreams, TrainConfig, train

# Small LM used for the robustness and stability runs.  Everything not listed
# keeps the TrainConfig default (epsilon 0.03, alpha = beta = 0.1, tau 0.07).
DESK_LM = dict(d_model=32, n_heads=2, n_layers=2, batch_size=8, seq_len=16, log_wall_time=False)


@dataclass
class PairedRobustness:
    seed: int
    baseline: float
    atcl: float
    baseline_ppl: float
    atcl_ppl: float

    @property
    def atcl_lower(self) -> bool:
        return self.atcl < self.baseline


def robustness_pair(seed: int, steps: int = 1500, n_train: int = 120, n_valid: int = 60, samples: int = 400,
                    eval_epsilon: float | None = None, **overrides) -> PairedRobustness:
    """Train baseline and ATCL models from the same seed; compare held-out divergence and perplexity."""
    train_text = grammar_corpus(n_train, seed=0)
    valid_text = grammar_corpus(n_valid, seed=1)
    out = {}
    for mode in ("baseline", "atcl"):
        config = TrainConfig(**{**DESK_LM, "max_steps": steps, "eval_interval": steps, "seed": seed,
                                "mode": mode, **overrides})
        data = lm_task(config, train_text)
        result = train(config, data)
        valid = make_batches(valid_text, data.vocab, config.batch_size, config.seq_len)
        eps = config.epsilon if eval_epsilon is None else eval_epsilon
        rng = RngStreams(seed).evaluation()
        out[mode] = (robustness_divergence(result.model, result.params, valid, data.vocab.restricted_flag, eps,
                                           samples, rng, config.fgm_sign),
                     perplexity(result.model, result.params, valid))
    return PairedRobustness(seed, out["baseline"][0], out["atcl"][0], out["baseline"][1], out["atcl"][1])


def memorize(max_steps: int = 5000, check_every: int = 250, target: float = 1.2, seed: int = 0,
             **overrides) -> tuple[int, float, float]:
    """Baseline training on a repeated paragraph until training perplexity reaches ``target``.

    Returns ``(steps_run, perplexity, seconds)``.
    """
    corpus = memorizable_corpus(1000)
    config = TrainConfig(**{**DESK_LM, "mode": "baseline", "max_steps": max_steps, "eval_interval": check_every,
                            "seed": seed, **overrides})
    data = lm_task(config, corpus, valid=corpus)
    trace: list[tuple[int, float]] = []

    def check(step, metrics):
        trace.append((step + 1, metrics["ppl"]))
        return metrics["ppl"] <= target

    start = time.perf_counter()
    train(config, data, on_eval=check)
    steps, ppl = trace[-1]
    return steps, ppl, time.perf_counter() - start


def toy_translation(mode: str, steps: int = 1250, seed: int = 0, n_pairs: int = 500, n_test: int = 50,
                    **overrides) -> tuple[float, list[tuple[int, float]]]:
    """Train on copy-and-reverse pairs; return held-out BLEU of the final model and the BLEU trajectory."""
    config = TrainConfig(**{"task": "nmt", "mode": mode, "d_model": 32, "n_heads": 2, "n_enc_layers": 3,
                            "n_dec_layers": 3, "batch_size": 25, "seq_len": 10, "decode_max_len": 12,
                            "max_steps": steps, "eval_interval": 250, "seed": seed, "log_wall_time": False,
                            **overrides})
    test = copy_reverse_pairs(n_test, seed=99)
    data = nmt_task(config, copy_reverse_pairs(n_pairs, seed=0), test)
    result = train(config, data)
    trajectory = [(e["step"] + 1, e["bleu"]) for e in result.evals]
    return trajectory[-1][1], trajectory
