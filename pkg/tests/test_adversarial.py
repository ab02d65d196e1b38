import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from atcl.adversarial import (CLASSIC_PLUS, NO_CANDIDATE, PAPER_MINUS, AdversarialPlan, ConsistencyError,
                              build_adversarial_batch, fgm_perturb, perturb_full, select_candidates)
from atcl.autodiff import Tensor
from atcl.text import build_vocab


@pytest.mark.parametrize("e, g, eps, expected", [
    ((3, 4), (0, 2), 0.03, (3, 3.97)),
    ((1, 0), (3, 4), 0.5, (0.7, -0.4)),
])
def test_fgm_worked_examples(e, g, eps, expected):
    out, degenerate = fgm_perturb(np.array(e, float), np.array(g, float), eps)
    np.testing.assert_allclose(out, expected, rtol=1e-12)
    assert not degenerate


def test_classic_plus_flips_direction():
    out, _ = fgm_perturb(np.array([3.0, 4.0]), np.array([0.0, 2.0]), 0.03, CLASSIC_PLUS)
    np.testing.assert_allclose(out, [3.0, 4.03], rtol=1e-12)


def test_zero_gradient_is_degenerate_and_leaves_embedding():
    e = np.array([1.0, -2.0, 0.5])
    out, degenerate = fgm_perturb(e, np.zeros(3), 0.03)
    assert degenerate
    np.testing.assert_array_equal(out, e)


def test_unknown_sign_rejected():
    with pytest.raises(ValueError):
        fgm_perturb(np.ones(2), np.ones(2), 0.1, "sideways")


vectors = arrays(np.float64, 6, elements=st.floats(-100, 100))


@settings(max_examples=200, deadline=None)
@given(vectors, vectors, st.floats(1e-4, 10))
def test_fgm_step_has_norm_epsilon_and_opposes_gradient(e, g, eps):
    if np.linalg.norm(g) < 1e-6:
        return
    out, _ = fgm_perturb(e, g, eps, PAPER_MINUS)
    step = out - e
    assert np.linalg.norm(step) == pytest.approx(eps, rel=1e-9)
    assert g @ step == pytest.approx(-eps * np.linalg.norm(g), rel=1e-9)


# -- candidate selection ---------------------------------------------------------

def _ids(vocab, sentences):
    width = max(len(s.split()) for s in sentences)
    ids = np.zeros((len(sentences), width), dtype=np.int64)
    for i, s in enumerate(sentences):
        toks = vocab.encode(s.split())
        ids[i, : len(toks)] = toks
    return ids, ids == 0


def test_sentence_of_excluded_tokens_gets_no_candidate():
    vocab = build_vocab(["! 42 a", "the friend arrived"])
    ids, pad = _ids(vocab, ["! 42 a"])
    plan = select_candidates(ids, pad, vocab.restricted_flag, np.random.default_rng(0))
    assert plan.positions.tolist() == [NO_CANDIDATE]
    assert plan.rows.size == 0


def test_candidates_come_from_qualifying_positions_and_are_seeded():
    vocab = build_vocab(["the friend arrived !", "x 7 ok"])
    ids, pad = _ids(vocab, ["the friend arrived !", "x 7 ok"])
    picks = {int(select_candidates(ids, pad, vocab.restricted_flag, np.random.default_rng(s)).positions[0])
             for s in range(50)}
    assert picks == {0, 1, 2}
    a = select_candidates(ids, pad, vocab.restricted_flag, np.random.default_rng(3))
    b = select_candidates(ids, pad, vocab.restricted_flag, np.random.default_rng(3))
    np.testing.assert_array_equal(a.positions, b.positions)
    assert a.positions[1] == 2


def test_at_most_one_candidate_per_sentence_in_a_batch_of_45():
    rng = np.random.default_rng(0)
    vocab = build_vocab(["alpha beta gamma delta , . 3"])
    ids = rng.integers(4, len(vocab), size=(45, 12))
    plan = select_candidates(ids, np.zeros(ids.shape, dtype=bool), vocab.restricted_flag, rng)
    assert plan.positions.shape == (45,)
    assert all(vocab.restricted_flag[ids[k, j]] for k, j in enumerate(plan.positions) if j != NO_CANDIDATE)


def test_padding_is_never_a_candidate():
    vocab = build_vocab(["hello world"])
    ids = np.array([[vocab.id("hello"), 0, 0]])
    pad = np.array([[False, True, True]])
    for s in range(20):
        assert select_candidates(ids, pad, vocab.restricted_flag, np.random.default_rng(s)).positions[0] == 0


# -- batch construction ----------------------------------------------------------

def test_plan_without_candidates_is_identity():
    emb = np.random.default_rng(0).normal(size=(2, 3, 4))
    plan = AdversarialPlan(np.array([NO_CANDIDATE, NO_CANDIDATE]), 0.03)
    np.testing.assert_array_equal(perturb_full(emb, plan, np.zeros((0, 4))), emb)
    built = build_adversarial_batch(Tensor(emb), plan, np.zeros((0, 4)))
    assert built.rows.size == 0


def test_single_candidate_changes_exactly_one_row_by_epsilon():
    rng = np.random.default_rng(1)
    emb = rng.normal(size=(2, 5, 4))
    plan = AdversarialPlan(np.array([NO_CANDIDATE, 3]), 0.03)
    out = perturb_full(emb, plan, rng.normal(size=(1, 4)))
    changed = np.argwhere(np.any(out != emb, axis=-1))
    assert changed.tolist() == [[1, 3]]
    assert np.linalg.norm(out[1, 3] - emb[1, 3]) == pytest.approx(0.03, rel=1e-12)


def test_misaligned_gradients_raise():
    plan = AdversarialPlan(np.array([1, 2]), 0.03)
    with pytest.raises(ConsistencyError):
        build_adversarial_batch(Tensor(np.zeros((2, 3, 4))), plan, np.ones((1, 4)))


def test_degenerate_rows_are_dropped_from_adversarial_batch():
    plan = AdversarialPlan(np.array([0, 1]), 0.03)
    grads = np.array([[0.0, 0.0], [1.0, 0.0]])
    built = build_adversarial_batch(Tensor(np.zeros((2, 3, 2))), plan, grads)
    assert built.rows.tolist() == [1]
    assert built.degenerate_rows.tolist() == [0]


def test_perturbation_is_a_constant_in_the_graph():
    from atcl import autodiff as ad
    emb = Tensor(np.ones((1, 2, 2)), requires_grad=True)
    plan = AdversarialPlan(np.array([1]), 0.5)
    built = build_adversarial_batch(emb, plan, np.array([[3.0, 4.0]]))
    ad.backward(built.embedded.sum())
    np.testing.assert_array_equal(emb.grad, np.ones((1, 2, 2)))
