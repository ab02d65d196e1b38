"""Corpus ingestion, vocabularies, byte-pair encoding and batching."""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = range(4)

END_OF_WORD = "</w>"
CONT = "@@"


def is_restricted_token(token: str) -> bool:
    """True iff ``token`` may carry an adversarial perturbation.

    Complete alphabetic words of length >= 2 only: lone characters, symbols,
    numbers, mixed tokens such as ``Z.``, BPE pieces and special tokens are out.
    """
    if token in SPECIALS:
        return False
    if CONT in token:
        return False
    return len(token) >= 2 and token.isalpha()


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    frequencies: tuple[int, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)
    restricted_flag: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        if len(self.frequencies) != len(self.tokens):
            raise ValueError("one frequency per token required")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})
        object.__setattr__(self, "restricted_flag", restricted_mask(self))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: str | Path) -> None:
        lines = [f"{t}\t{f}" for t, f in zip(self.tokens, self.frequencies)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        tokens, freqs = [], []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            tok, _, freq = line.partition("\t")
            tokens.append(tok)
            freqs.append(int(freq) if freq else 0)
        return cls(tuple(tokens), tuple(freqs))


def restricted_mask(vocabulary: Vocabulary) -> np.ndarray:
    return np.array([is_restricted_token(t) for t in vocabulary.tokens], dtype=bool)


def build_vocab(corpus: Sequence[Sequence[str] | str], min_frequency: int = 1) -> Vocabulary:
    """Count whitespace tokens (or pre-split token lists) and order by frequency.

    Tokens below ``min_frequency`` are dropped and later map to ``<unk>``.
    Ties in frequency are broken lexicographically.
    """
    if min_frequency < 1:
        raise ValueError("min_frequency must be >= 1")
    counts: collections.Counter[str] = collections.Counter()
    for sentence in corpus:
        counts.update(sentence.split() if isinstance(sentence, str) else sentence)
    if not counts:
        raise ValueError("build_vocab: empty corpus")
    special_counts = [counts.pop(s, 0) for s in SPECIALS]
    kept = sorted(((t, c) for t, c in counts.items() if c >= min_frequency), key=lambda tc: (-tc[1], tc[0]))
    special_counts[UNK_ID] += sum(c for c in counts.values() if c < min_frequency)
    tokens = SPECIALS + tuple(t for t, _ in kept)
    freqs = tuple(special_counts) + tuple(c for _, c in kept)
    return Vocabulary(tokens, freqs)


# ---------------------------------------------------------------------------
# byte-pair encoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MergeTable:
    merges: tuple[tuple[str, str], ...]
    ranks: dict[tuple[str, str], int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ranks = {pair: i for i, pair in enumerate(self.merges)}
        if len(ranks) != len(self.merges):
            raise ValueError("merge pairs must be unique")
        object.__setattr__(self, "ranks", ranks)

    def __len__(self) -> int:
        return len(self.merges)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> MergeTable:
        merges = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                left, right = line.split(" ")
                merges.append((left, right))
        return cls(tuple(merges))


def _merge_symbols(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(symbols[i] + symbols[i + 1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word) + (END_OF_WORD,) if word else ()


def bpe_train(word_counts: dict[str, int] | Iterable[str], num_merges: int) -> MergeTable:
    """Greedy BPE: repeatedly merge the most frequent adjacent symbol pair.

    Ties go to the lexicographically smallest pair.  Stops early when no pair
    is left to merge.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    if not isinstance(word_counts, dict):
        word_counts = collections.Counter(word_counts)
    words = {word_symbols(w): c for w, c in sorted(word_counts.items()) if w}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        stats: collections.Counter[tuple[str, str]] = collections.Counter()
        for symbols, count in words.items():
            for pair in zip(symbols, symbols[1:]):
                stats[pair] += count
        if not stats:
            break
        best = min(stats, key=lambda p: (-stats[p], p))
        merges.append(best)
        merged: dict[tuple[str, ...], int] = {}
        for symbols, count in words.items():
            key = _merge_symbols(symbols, best)
            merged[key] = merged.get(key, 0) + count
        words = merged
    return MergeTable(tuple(merges))


def bpe_segment(word: str, merges: MergeTable) -> tuple[str, ...]:
    """Internal symbols of ``word`` (last one carries the end-of-word marker)."""
    symbols = word_symbols(word)
    ranks = merges.ranks
    while len(symbols) > 1:
        candidates = [(ranks[p], p) for p in zip(symbols, symbols[1:]) if p in ranks]
        if not candidates:
            break
        _, pair = min(candidates)
        symbols = _merge_symbols(symbols, pair)
    return symbols


def bpe_encode(word: str, merges: MergeTable) -> list[str]:
    """Split ``word`` into subword tokens.

    A piece that continues into the next carries a trailing ``@@``; a piece
    that continues a previous one carries a leading ``@@``.  Unsplit words
    carry no marker.
    """
    pieces = list(bpe_segment(word, merges))
    if not pieces:
        return []
    last = pieces[-1][: -len(END_OF_WORD)]
    if last:
        pieces[-1] = last
    else:
        pieces.pop()
    n = len(pieces)
    return [(CONT if i > 0 else "") + p + (CONT if i < n - 1 else "") for i, p in enumerate(pieces)]


def bpe_decode(tokens: Sequence[str]) -> str:
    """Inverse of :func:`bpe_encode` for the pieces of one word."""
    n = len(tokens)
    out = []
    for i, tok in enumerate(tokens):
        if i > 0:
            tok = tok[len(CONT):]
        if i < n - 1:
            tok = tok[: -len(CONT)]
        out.append(tok)
    return "".join(out)


def bpe_tokenize(sentence: str, merges: MergeTable) -> list[str]:
    return [piece for word in sentence.split() for piece in bpe_encode(word, merges)]


def bpe_detokenize(tokens: Sequence[str]) -> str:
    words, current = [], []
    for tok in tokens:
        current.append(tok)
        if not tok.endswith(CONT) or len(tok) <= len(CONT):
            words.append(bpe_decode(current))
            current = []
    if current:
        words.append(bpe_decode(current + [CONT]))
    return " ".join(words)


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------


def read_corpus(path: str | Path) -> list[str]:
    """One sentence per line; blank lines are skipped."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    return [line.strip() for line in text.splitlines() if line.strip()]


def read_parallel(src_path: str | Path, trg_path: str | Path) -> list[tuple[str, str]]:
    src = Path(src_path).read_text(encoding="utf-8").splitlines()
    trg = Path(trg_path).read_text(encoding="utf-8").splitlines()
    if len(src) != len(trg):
        raise ValueError(f"parallel corpus line counts differ: {src_path} has {len(src)}, {trg_path} has {len(trg)}")
    return [(s.strip(), t.strip()) for s, t in zip(src, trg) if s.strip() and t.strip()]


def word_counts(sentences: Iterable[str]) -> dict[str, int]:
    counts: collections.Counter[str] = collections.Counter()
    for s in sentences:
        counts.update(s.split())
    return dict(counts)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    """One training unit.

    ``pad_mask`` is True at padding.  For language modelling ``targets`` holds
    the next token for every input position; for translation ``target_ids``
    holds ``<bos> y <eos>`` rows with their own padding mask.
    """

    token_ids: np.ndarray
    pad_mask: np.ndarray
    targets: np.ndarray | None = None
    target_ids: np.ndarray | None = None
    target_pad_mask: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def is_translation(self) -> bool:
        return self.target_ids is not None

    def rows(self, index) -> Batch:
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return Batch(pick(self.token_ids), pick(self.pad_mask), pick(self.targets),
                     pick(self.target_ids), pick(self.target_pad_mask))


def lm_stream(sentences: Iterable[str], vocab: Vocabulary) -> np.ndarray:
    """Whitespace tokens with ``<eos>`` closing every sentence."""
    ids: list[int] = []
    for s in sentences:
        ids.extend(vocab.encode(s.split()))
        ids.append(EOS_ID)
    return np.asarray(ids, dtype=np.int64)


def lm_windows(stream: np.ndarray, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping windows of ``seq_len`` inputs with shifted targets; remainder dropped."""
    if seq_len < 2:
        raise ValueError("seq_len must be >= 2")
    n = (len(stream) - 1) // seq_len
    if n < 1:
        raise ValueError(f"corpus of {len(stream)} tokens is shorter than one window of {seq_len}")
    inputs = stream[: n * seq_len].reshape(n, seq_len)
    targets = stream[1 : n * seq_len + 1].reshape(n, seq_len)
    return inputs, targets


def _chunks(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def make_lm_batches(stream: np.ndarray, batch_size: int, seq_len: int, shuffle_seed: int | None = None) -> list[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    inputs, targets = lm_windows(stream, seq_len)
    order = np.arange(len(inputs))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(inputs))
    return [Batch(inputs[idx], np.zeros(inputs[idx].shape, dtype=bool), targets[idx]) for idx in _chunks(order, batch_size)]


def pad_rows(rows: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
    return ids, ids == PAD_ID


def encode_pair(src: Sequence[str], trg: Sequence[str], vocab: Vocabulary, max_len: int) -> tuple[list[int], list[int]]:
    """Source ends with ``<eos>``; target is wrapped as ``<bos> ... <eos>``. Sides are truncated to ``max_len`` tokens."""
    s = vocab.encode(src[:max_len]) + [EOS_ID]
    t = [BOS_ID] + vocab.encode(trg[:max_len]) + [EOS_ID]
    return s, t


def make_nmt_batches(
    pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
    batch_size: int,
    shuffle_seed: int | None = None,
) -> list[Batch]:
    """Bucket encoded (source, target) pairs by length, pad, optionally shuffle batch order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not pairs:
        raise ValueError("make_nmt_batches: no sentence pairs")
    order = sorted(range(len(pairs)), key=lambda i: (len(pairs[i][0]), len(pairs[i][1]), i))
    groups = _chunks(np.asarray(order), batch_size)
    if shuffle_seed is not None:
        perm = np.random.default_rng(shuffle_seed).permutation(len(groups))
        groups = [groups[i] for i in perm]
    batches = []
    for g in groups:
        src, src_pad = pad_rows([pairs[i][0] for i in g])
        trg, trg_pad = pad_rows([pairs[i][1] for i in g])
        batches.append(Batch(src, src_pad, None, trg, trg_pad))
    return batches


def make_batches(corpus, vocabulary: Vocabulary, batch_size: int, seq_len: int,
                 shuffle_seed: int | None = None, merges: MergeTable | None = None) -> list[Batch]:
    """Dispatch on corpus shape: sentences give LM windows, (src, trg) pairs give translation batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if seq_len < 2:
        raise ValueError("seq_len must be >= 2")
    corpus = list(corpus)
    if corpus and isinstance(corpus[0], tuple):
        split = (lambda s: bpe_tokenize(s, merges)) if merges is not None else str.split
        encoded = [encode_pair(split(s), split(t), vocabulary, seq_len) for s, t in corpus]
        return make_nmt_batches(encoded, batch_size, shuffle_seed)
    return make_lm_batches(lm_stream(corpus, vocabulary), batch_size, seq_len, shuffle_seed)
