import collections
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atcl.text import (BOS_ID, EOS_ID, PAD_ID, SPECIALS, UNK_ID, MergeTable, Vocabulary, bpe_decode, bpe_detokenize,
                       bpe_encode, bpe_tokenize, bpe_train, build_vocab, encode_pair, is_restricted_token,
                       lm_stream, lm_windows, make_batches, make_lm_batches, read_parallel, restricted_mask)


# -- restricted mask -----------------------------------------------------------

@pytest.mark.parametrize("token", ["a", "Z.", "!", "@", "#", "42", "3.14", "x2", "@@ing", "walk@@", "don't",
                                   "e-mail", "<pad>", "<unk>", "<bos>", "<eos>", ""])
def test_excluded_tokens(token):
    assert not is_restricted_token(token)


@pytest.mark.parametrize("token", ["friend", "Paris", "ok", "Über", "cousin", "THE"])
def test_included_tokens(token):
    assert is_restricted_token(token)


def test_restricted_mask_aligns_with_vocabulary():
    vocab = build_vocab([["friend", "a", "!", "friend", "walk@@", "@@ing"]])
    flags = restricted_mask(vocab)
    assert flags.dtype == bool and flags.shape == (len(vocab),)
    assert [t for t, f in zip(vocab.tokens, flags) if f] == ["friend"]


# -- vocabulary ----------------------------------------------------------------

def test_vocab_orders_by_frequency_then_token():
    vocab = build_vocab(["b a c a", "c b a"])
    assert vocab.tokens[: len(SPECIALS)] == SPECIALS
    assert vocab.tokens[len(SPECIALS):] == ("a", "b", "c")
    assert vocab.encode(["a", "zzz"]) == [4, UNK_ID]


def test_vocab_min_frequency_drops_rare_tokens():
    vocab = build_vocab(["x x y"], min_frequency=2)
    assert "y" not in vocab and vocab.id("y") == UNK_ID


def test_vocab_empty_corpus_rejected():
    with pytest.raises(ValueError):
        build_vocab([])


def test_vocab_save_load_roundtrip(tmp_path):
    vocab = build_vocab(["the cat sat", "the dog"])
    vocab.save(tmp_path / "v.txt")
    loaded = Vocabulary.load(tmp_path / "v.txt")
    assert loaded.tokens == vocab.tokens
    np.testing.assert_array_equal(loaded.restricted_flag, vocab.restricted_flag)


# -- BPE -----------------------------------------------------------------------

def reference_bpe(word_counts: dict[str, int], num_merges: int) -> list[tuple[str, str]]:
    """Regex-substitution BPE learner over space-joined symbols (classic formulation)."""
    vocab = {" ".join(w) + " </w>": c for w, c in word_counts.items()}
    merges = []
    for _ in range(num_merges):
        pairs = collections.Counter()
        for word, freq in vocab.items():
            symbols = word.split()
            for i in range(len(symbols) - 1):
                pairs[symbols[i], symbols[i + 1]] += freq
        if not pairs:
            break
        best = min(pairs, key=lambda p: (-pairs[p], p))
        pattern = re.compile(r"(?<!\S)" + re.escape(" ".join(best)) + r"(?!\S)")
        vocab = {pattern.sub("".join(best), w): f for w, f in vocab.items()}
        merges.append(best)
    return merges


def test_bpe_matches_regex_reference_on_textbook_corpus():
    counts = {"low": 5, "lower": 2, "newest": 6, "widest": 3}
    assert list(bpe_train(counts, 10).merges) == reference_bpe(counts, 10)
    assert bpe_train(counts, 4).merges[:4] == (("e", "s"), ("es", "t"), ("est", "</w>"), ("l", "o"))


words = st.text(alphabet="abcde", min_size=1, max_size=7)


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(words, st.integers(1, 9), min_size=1, max_size=12), st.integers(0, 25))
def test_bpe_matches_regex_reference(counts, n):
    assert list(bpe_train(counts, n).merges) == reference_bpe(counts, n)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.text(alphabet="abcxyz'-.", min_size=1, max_size=9), min_size=1, max_size=15),
       st.integers(0, 30))
def test_bpe_roundtrip_every_word(corpus, n):
    merges = bpe_train(corpus, n)
    for word in corpus:
        assert bpe_decode(bpe_encode(word, merges)) == word
    sentence = " ".join(corpus)
    assert bpe_detokenize(bpe_tokenize(sentence, merges)) == sentence


def test_bpe_markers_exclude_subwords_from_candidates():
    merges = bpe_train({"walking": 1, "talking": 1}, 4)
    pieces = bpe_encode("walking", merges)
    assert len(pieces) > 1
    assert all(not is_restricted_token(p) for p in pieces)
    assert pieces[0].endswith("@@") and pieces[-1].startswith("@@")


def test_merge_table_save_load(tmp_path):
    merges = bpe_train({"banana": 3, "bandana": 2}, 6)
    merges.save(tmp_path / "m.txt")
    assert MergeTable.load(tmp_path / "m.txt").merges == merges.merges


# -- batching ------------------------------------------------------------------

def test_lm_stream_appends_eos():
    vocab = build_vocab(["a b", "c"])
    assert lm_stream(["a b", "c"], vocab).tolist() == [vocab.id("a"), vocab.id("b"), EOS_ID, vocab.id("c"), EOS_ID]


def test_lm_windows_shift_targets_and_drop_remainder():
    stream = np.arange(11)
    inputs, targets = lm_windows(stream, 3)
    assert inputs.tolist() == [[0, 1, 2], [3, 4, 5], [6, 7, 8]]
    np.testing.assert_array_equal(targets, inputs + 1)


def test_lm_windows_rejects_short_corpus():
    with pytest.raises(ValueError):
        lm_windows(np.arange(3), 4)


def test_lm_batches_cover_all_windows_and_keep_partial_batch():
    batches = make_lm_batches(np.arange(41), batch_size=3, seq_len=4, shuffle_seed=7)
    assert [b.size for b in batches] == [3, 3, 3, 1]
    seen = sorted(int(b.token_ids[i, 0]) for b in batches for i in range(b.size))
    assert seen == list(range(0, 40, 4))
    again = make_lm_batches(np.arange(41), batch_size=3, seq_len=4, shuffle_seed=7)
    assert all(np.array_equal(a.token_ids, b.token_ids) for a, b in zip(batches, again))


def test_encode_pair_wraps_target_and_truncates():
    vocab = build_vocab(["a b c d"])
    src, trg = encode_pair("a b c d".split(), "d c".split(), vocab, max_len=3)
    assert src == vocab.encode(["a", "b", "c"]) + [EOS_ID]
    assert trg == [BOS_ID] + vocab.encode(["d", "c"]) + [EOS_ID]


def test_nmt_batches_pad_and_mask():
    pairs = [("a b c", "c b a"), ("a", "a"), ("b c", "c b")]
    vocab = build_vocab([s for p in pairs for s in p])
    batches = make_batches(pairs, vocab, batch_size=3, seq_len=10)
    (batch,) = batches
    assert batch.is_translation
    assert np.array_equal(batch.pad_mask, batch.token_ids == PAD_ID)
    assert np.array_equal(batch.target_pad_mask, batch.target_ids == PAD_ID)
    assert (batch.target_ids[:, 0] == BOS_ID).all()


def test_read_parallel_rejects_unequal_files(tmp_path):
    (tmp_path / "s").write_text("a\nb\n")
    (tmp_path / "t").write_text("a\n")
    with pytest.raises(ValueError):
        read_parallel(tmp_path / "s", tmp_path / "t")
