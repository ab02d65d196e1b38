"""Small generated corpora for convergence, robustness and toy translation experiments."""

from __future__ import annotations

import itertools
import string

import numpy as np


def made_up_words(count: int, rng: np.random.Generator, min_len: int = 3, max_len: int = 7) -> list[str]:
    """Distinct lowercase pseudo-words, consonant-vowel alternating so they read like words."""
    consonants, vowels = "bcdfghjklmnprstvz", "aeiou"
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < count:
        n = int(rng.integers(min_len, max_len + 1))
        w = "".join(rng.choice(list(consonants if i % 2 == 0 else vowels)) for i in range(n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def memorizable_corpus(n_tokens: int = 1000, paragraph_len: int = 100, seed: int = 0) -> list[str]:
    """A fixed paragraph of mostly distinct words repeated until ``n_tokens`` words are reached.

    Every word but the paragraph's last is followed by the same successor each
    time, so a model can drive perplexity close to one.
    """
    rng = np.random.default_rng(seed)
    words = made_up_words(paragraph_len, rng)
    sentences, line, total = [], [], 0
    for w in itertools.cycle(words):
        if total >= n_tokens:
            break
        line.append(w)
        total += 1
        if len(line) == 10:
            sentences.append(" ".join(line))
            line = []
    if line:
        sentences.append(" ".join(line))
    return sentences


def grammar_corpus(n_sentences: int, seed: int = 0, n_nouns: int = 12, n_verbs: int = 8,
                   n_adjectives: int = 6) -> list[str]:
    """Sentences from a tiny template grammar with punctuation, digits and single letters mixed in.

    The non-alphabetic and single-character tokens never qualify for perturbation,
    which keeps the candidate mask non-trivial.
    """
    rng = np.random.default_rng(seed)
    lex = made_up_words(n_nouns + n_verbs + n_adjectives, np.random.default_rng(12345))
    nouns, verbs, adjs = lex[:n_nouns], lex[n_nouns : n_nouns + n_verbs], lex[n_nouns + n_verbs :]
    dets = ["the", "a"]
    out = []
    for _ in range(n_sentences):
        def noun_phrase():
            parts = [str(rng.choice(dets))]
            if rng.random() < 0.5:
                parts.append(str(rng.choice(adjs)))
            parts.append(str(rng.choice(nouns)))
            return parts

        words = noun_phrase() + [str(rng.choice(verbs))] + noun_phrase()
        if rng.random() < 0.3:
            words += ["with", str(int(rng.integers(2, 10)))] + [str(rng.choice(nouns))]
        words.append("." if rng.random() < 0.8 else "!")
        out.append(" ".join(words))
    return out


def copy_reverse_pairs(n_pairs: int, seed: int = 0, vocab_size: int = 20, min_len: int = 3,
                       max_len: int = 8) -> list[tuple[str, str]]:
    """Source sentences over a small alphabetic lexicon with their word-reversed translations."""
    rng = np.random.default_rng(seed)
    lex = made_up_words(vocab_size, np.random.default_rng(777))
    pairs = []
    for _ in range(n_pairs):
        n = int(rng.integers(min_len, max_len + 1))
        words = [lex[i] for i in rng.integers(0, vocab_size, size=n)]
        pairs.append((" ".join(words), " ".join(reversed(words))))
    return pairs


def letter_words(n: int) -> list[str]:
    """``aa``, ``ab``, ... : deterministic two-letter alphabetic tokens."""
    return ["".join(p) for p in itertools.islice(itertools.product(string.ascii_lowercase, repeat=2), n)]
