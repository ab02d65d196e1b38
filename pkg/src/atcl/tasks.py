"""Turn raw corpora into vocabularies, batch sources and evaluation hooks for ``train``."""

from __future__ import annotations

from typing import Sequence

from .evaluation import corpus_bleu_for, perplexity
from .text import (MergeTable, Vocabulary, bpe_tokenize, bpe_train, build_vocab, make_batches, read_corpus,
                   read_parallel, word_counts)
from .training import ConfigError, TaskData, TrainConfig


def model_max_len(config: TrainConfig) -> int:
    """Longest sequence the model must position-encode: LM windows, or wrapped targets and decodes."""
    if config.task == "lm":
        return config.seq_len
    return max(config.seq_len, config.decode_max_len) + 2


def lm_task(config: TrainConfig, train: Sequence[str], valid: Sequence[str] | None = None,
            vocab: Vocabulary | None = None) -> TaskData:
    """Language-modelling data; validation perplexity is reported at eval steps when ``valid`` is given."""
    vocab = vocab or build_vocab([s.split() for s in train], config.min_frequency)
    train = list(train)

    def epoch_batches(seed: int):
        return make_batches(train, vocab, config.batch_size, config.seq_len, seed)

    evaluate = None
    if valid:
        valid_batches = make_batches(list(valid), vocab, config.batch_size, config.seq_len)

        def evaluate(model, params):
            return {"ppl": perplexity(model, params, valid_batches)}

    return TaskData(vocab, epoch_batches, evaluate, None, model_max_len(config))


def nmt_task(config: TrainConfig, train: Sequence[tuple[str, str]], valid: Sequence[tuple[str, str]] | None = None,
             vocab: Vocabulary | None = None, merges: MergeTable | None = None) -> TaskData:
    """Translation data over one shared vocabulary; validation BLEU is reported at eval steps."""
    train = list(train)
    if merges is None and config.bpe_merges > 0:
        merges = bpe_train(word_counts([s for pair in train for s in pair]), config.bpe_merges)
    split = (lambda s: bpe_tokenize(s, merges)) if merges is not None else str.split
    if vocab is None:
        vocab = build_vocab([split(s) for pair in train for s in pair], config.min_frequency)

    def epoch_batches(seed: int):
        return make_batches(train, vocab, config.batch_size, config.seq_len, seed, merges)

    evaluate = None
    if valid:
        valid = list(valid)

        def evaluate(model, params):
            return {"bleu": corpus_bleu_for(model, params, vocab, valid, merges, config.decode_max_len)}

    return TaskData(vocab, epoch_batches, evaluate, merges, model_max_len(config))


def task_from_files(config: TrainConfig) -> TaskData:
    """Read the corpora named in ``config`` (paths) and build the matching task."""
    if config.task == "lm":
        if not config.train_corpus:
            raise ConfigError("train_corpus is required for task=lm")
        valid = read_corpus(config.valid_corpus) if config.valid_corpus else None
        return lm_task(config, read_corpus(config.train_corpus), valid)
    if not (config.train_src and config.train_trg):
        raise ConfigError("train_src and train_trg are required for task=nmt")
    valid = read_parallel(config.valid_src, config.valid_trg) if config.valid_src and config.valid_trg else None
    return nmt_task(config, read_parallel(config.train_src, config.train_trg), valid)
