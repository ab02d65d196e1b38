"""Candidate selection and fast-gradient perturbation of token embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

PAPER_MINUS = "paper-minus"
CLASSIC_PLUS = "classic-plus"
SIGNS = {PAPER_MINUS: -1.0, CLASSIC_PLUS: 1.0}
NO_CANDIDATE = -1
ZERO_GRADIENT = 1e-12


class ConsistencyError(RuntimeError):
    """Plan and gradients disagree about which sentences carry a candidate."""


def sign_value(sign: str) -> float:
    try:
        return SIGNS[sign]
    except KeyError:
        raise ValueError(f"unknown FGM sign {sign!r}; expected one of {sorted(SIGNS)}") from None


@dataclass(frozen=True)
class AdversarialPlan:
    """One candidate position per sentence, or ``NO_CANDIDATE``."""

    positions: np.ndarray
    epsilon: float
    sign: str = PAPER_MINUS

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        sign_value(self.sign)

    @property
    def has_candidate(self) -> np.ndarray:
        return self.positions != NO_CANDIDATE

    @property
    def rows(self) -> np.ndarray:
        return np.flatnonzero(self.has_candidate)


def candidate_mask(token_ids: np.ndarray, pad_mask: np.ndarray, restricted_flag: np.ndarray) -> np.ndarray:
    return restricted_flag[token_ids] & ~pad_mask


def select_candidates(token_ids: np.ndarray, pad_mask: np.ndarray, restricted_flag: np.ndarray,
                      rng: np.random.Generator, epsilon: float = 0.03, sign: str = PAPER_MINUS) -> AdversarialPlan:
    """Pick one qualifying position uniformly per sentence, in sentence order."""
    eligible = candidate_mask(token_ids, pad_mask, restricted_flag)
    positions = np.full(token_ids.shape[0], NO_CANDIDATE, dtype=np.int64)
    for k, row in enumerate(eligible):
        choices = np.flatnonzero(row)
        if choices.size:
            positions[k] = choices[rng.integers(choices.size)]
    return AdversarialPlan(positions, epsilon, sign)


def fgm_directions(grads: np.ndarray, epsilon: float, sign: str = PAPER_MINUS) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``sign * epsilon * g / ||g||``; zero rows (and a True flag) where ``||g|| < 1e-12``."""
    grads = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    norms = np.linalg.norm(grads, axis=-1, keepdims=True)
    degenerate = norms[:, 0] < ZERO_GRADIENT
    safe = np.where(degenerate[:, None], 1.0, norms)
    deltas = np.where(degenerate[:, None], 0.0, sign_value(sign) * epsilon * grads / safe)
    return deltas, degenerate


def fgm_perturb(e: np.ndarray, g: np.ndarray, epsilon: float, sign: str = PAPER_MINUS) -> tuple[np.ndarray, bool]:
    """Return ``(e', degenerate)``. With the default sign ``e' = e - epsilon * g / ||g||``."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    delta, degenerate = fgm_directions(np.asarray(g)[None], epsilon, sign)
    return np.asarray(e, dtype=np.float64) + delta[0], bool(degenerate[0])


def candidate_gradients(embedded_grad: np.ndarray, plan: AdversarialPlan) -> np.ndarray:
    """Gradient vectors at each planned position, one row per sentence with a candidate."""
    rows = plan.rows
    return embedded_grad[rows, plan.positions[rows]]


@dataclass
class AdversarialBatch:
    embedded: Tensor
    rows: np.ndarray
    positions: np.ndarray
    deltas: np.ndarray
    degenerate_rows: np.ndarray


def build_adversarial_batch(embedded: Tensor, plan: AdversarialPlan, grads: np.ndarray) -> AdversarialBatch:
    """Apply the perturbation at each planned position.

    ``grads`` has one row per sentence in ``plan.rows``.  Rows whose gradient
    vanishes are dropped.  The perturbation enters as a constant, so no
    gradient flows through its direction; gradients still reach the clean
    embedding underneath.
    """
    rows = plan.rows
    grads = np.asarray(grads, dtype=np.float64)
    grads = grads.reshape(-1, embedded.shape[-1]) if grads.size else np.zeros((0, embedded.shape[-1]))
    if grads.shape[0] != rows.size:
        raise ConsistencyError(f"plan has {rows.size} candidates but {grads.shape[0]} gradient rows were given")
    step, degenerate = fgm_directions(grads, plan.epsilon, plan.sign)
    keep = ~degenerate
    rows, step = rows[keep], step[keep]
    positions = plan.positions[rows]
    deltas = np.zeros((rows.size,) + embedded.shape[1:])
    deltas[np.arange(rows.size), positions] = step
    perturbed = embedded[rows] + Tensor(deltas) if rows.size else embedded[rows]
    return AdversarialBatch(perturbed, rows, positions, deltas, plan.rows[degenerate])


def perturb_full(embedded: np.ndarray, plan: AdversarialPlan, grads: np.ndarray) -> np.ndarray:
    """Array version over the whole batch: untouched rows are returned unchanged."""
    out = np.array(embedded, dtype=np.float64, copy=True)
    rows = plan.rows
    grads = np.asarray(grads, dtype=np.float64)
    if grads.size == 0 and rows.size == 0:
        return out
    grads = grads.reshape(-1, out.shape[-1])
    if grads.shape[0] != rows.size:
        raise ConsistencyError("plan/gradient misalignment")
    step, _ = fgm_directions(grads, plan.epsilon, plan.sign)
    out[rows, plan.positions[rows]] += step
    return out
