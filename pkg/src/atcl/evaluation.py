"""Perplexity, BLEU, embedding-neighbour and targeted-attack probes, robustness divergence."""

from __future__ import annotations

import collections
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adversarial import PAPER_MINUS, AdversarialPlan, NO_CANDIDATE, candidate_mask, fgm_directions
from .autodiff import Tensor
from .model import ModelParameters, Seq2SeqTransformer, TransformerLM, TransformerModel
from .text import EOS_ID, SPECIALS, Batch, MergeTable, Vocabulary, bpe_detokenize, bpe_tokenize, encode_pair, pad_rows

ATTACK_MAX_NEW = 20


# ---------------------------------------------------------------------------
# perplexity
# ---------------------------------------------------------------------------


def mean_nll(model: TransformerModel, params: ModelParameters, batches: Sequence[Batch]) -> float:
    total, count = 0.0, 0
    with ad.no_grad():
        for batch in batches:
            out = model.forward(params, batch)
            total -= float(out.target_log_probs[out.loss_mask].sum())
            count += int(out.loss_mask.sum())
    if count == 0:
        raise ValueError("perplexity: empty corpus")
    return total / count


def perplexity(model: TransformerModel, params: ModelParameters, batches: Sequence[Batch]) -> float:
    """``exp`` of the mean per-token negative log-probability over all unpadded targets."""
    return math.exp(mean_nll(model, params, batches))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


@dataclass
class BleuResult:
    score: float
    unsmoothed: float
    precisions: list[float]
    brevity_penalty: float
    hyp_length: int
    ref_length: int


def _ngrams(tokens: Sequence[str], n: int) -> collections.Counter:
    return collections.Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _as_tokens(s) -> list[str]:
    return s.split() if isinstance(s, str) else list(s)


def bleu_stats(hypotheses: Sequence, references: Sequence, max_n: int = 4) -> BleuResult:
    """Corpus BLEU with a single reference per hypothesis.

    ``score`` applies add-one smoothing to every order n >= 2 whenever one of
    those orders has zero matches; ``unsmoothed`` never smooths.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"bleu: {len(hypotheses)} hypotheses but {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = _as_tokens(hyp), _as_tokens(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0 or matches[0] == 0:
        return BleuResult(0.0, 0.0, [0.0] * max_n, 0.0 if hyp_len == 0 else _bp(hyp_len, ref_len), hyp_len, ref_len)
    bp = _bp(hyp_len, ref_len)
    raw = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    unsmoothed = bp * math.exp(sum(math.log(p) for p in raw) / max_n) if min(raw) > 0 else 0.0
    smooth_needed = any(m == 0 for m in matches[1:])
    if smooth_needed:
        prec = [raw[0]] + [(m + 1) / (t + 1) for m, t in zip(matches[1:], totals[1:])]
    else:
        prec = raw
    score = bp * math.exp(sum(math.log(p) for p in prec) / max_n)
    return BleuResult(score, unsmoothed, prec, bp, hyp_len, ref_len)


def _bp(hyp_len: int, ref_len: int) -> float:
    return 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)


def bleu(hypotheses: Sequence, references: Sequence, smooth: bool = True) -> float:
    result = bleu_stats(hypotheses, references)
    return result.score if smooth else result.unsmoothed


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


@dataclass
class ProbeReport:
    kind: str
    inputs: dict
    outputs: dict
    checkpoint: str = ""

    def to_record(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_record())

    def to_text(self) -> str:
        lines = [f"# {self.kind}" + (f" ({self.checkpoint})" if self.checkpoint else "")]
        for k, v in self.inputs.items():
            lines.append(f"{k}: {v}")
        if self.kind == "neighbors":
            lines.append(f"{'rank':>4}  {'token':<20} distance")
            for i, (tok, dist) in enumerate(self.outputs["neighbors"], 1):
                lines.append(f"{i:>4}  {tok:<20} {dist:.6f}")
        else:
            for k, v in self.outputs.items():
                lines.append(f"{k}: {' '.join(v) if isinstance(v, list) and v and isinstance(v[0], str) else v}")
        return "\n".join(lines)


def nearest_neighbors(params: ModelParameters, vocab: Vocabulary, word: str, k: int) -> list[tuple[str, float]]:
    """Exact top-``k`` embedding rows by Euclidean distance; query and special tokens excluded.

    Ties are broken by token id.
    """
    if word not in vocab:
        raise ValueError(f"{word!r} is not in the vocabulary")
    candidates = len(vocab) - len(SPECIALS) - (0 if word in SPECIALS else 1)
    if not 1 <= k <= candidates:
        raise ValueError(f"k must lie in [1, {candidates}]")
    emb = params["embedding"].data
    q = vocab.index[word]
    dist = np.sqrt(((emb - emb[q]) ** 2).sum(axis=1))
    keep = np.ones(len(vocab), dtype=bool)
    keep[: len(SPECIALS)] = False
    keep[q] = False
    ids = np.flatnonzero(keep)
    order = ids[np.argsort(dist[ids], kind="stable")[:k]]
    return [(vocab.tokens[i], float(dist[i])) for i in order]


def neighbors_report(params, vocab, word, k, checkpoint: str = "") -> ProbeReport:
    return ProbeReport("neighbors", {"word": word, "k": k},
                       {"neighbors": [[t, d] for t, d in nearest_neighbors(params, vocab, word, k)]}, checkpoint)


def _embedding_gradient(model: TransformerLM, params: ModelParameters, ids: np.ndarray) -> np.ndarray:
    """Gradient of the mean next-token loss of each row w.r.t. its input embeddings."""
    targets = np.concatenate([ids[:, 1:], np.full((ids.shape[0], 1), EOS_ID)], axis=1)
    batch = Batch(ids, np.zeros(ids.shape, dtype=bool), targets)
    detached = ModelParameters({k: Tensor(t.data) for k, t in params.items()})
    embedded = Tensor(model.embed(detached, ids).data, requires_grad=True)
    out = model.forward_embedded(detached, batch, embedded)
    ad.backward(out.loss)
    return embedded.grad


def targeted_attack_completion(model: TransformerLM, params: ModelParameters, vocab: Vocabulary,
                               sentence: str | Sequence[str], target_position: int, epsilon: float,
                               sign: str = PAPER_MINUS, max_new: int = ATTACK_MAX_NEW,
                               checkpoint: str = "") -> ProbeReport:
    """Perturb the target word's embedding and greedily complete the sentence after it.

    The perturbation direction is the gradient of the sentence's LM loss at the
    target embedding.  Reports the continuation and its perplexity under the
    perturbed model input.
    """
    tokens = _as_tokens(sentence)
    if not 0 <= target_position < len(tokens):
        raise ValueError("target_position outside the sentence")
    ids = np.asarray([vocab.encode(tokens)], dtype=np.int64)
    if not vocab.restricted_flag[ids[0, target_position]]:
        raise ValueError(f"target token {tokens[target_position]!r} is excluded by the candidate mask")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    delta = np.zeros((1, model.config.max_len, model.config.d_model))
    if epsilon > 0:
        g = _embedding_gradient(model, params, ids)[0, target_position]
        step, _ = fgm_directions(g, epsilon, sign)
        delta[0, target_position] = step[0]
    prefix = list(ids[0, : target_position + 1])
    generated, logps = [], []
    with ad.no_grad():
        for _ in range(max_new):
            if len(prefix) >= model.config.max_len:
                break
            logp = model.next_log_probs(params, np.asarray([prefix]), delta)[0, -1]
            nxt = int(np.argmax(logp))
            generated.append(nxt)
            logps.append(float(logp[nxt]))
            prefix.append(nxt)
            if nxt == EOS_ID:
                break
    ppl = math.exp(-sum(logps) / len(logps)) if logps else float("nan")
    return ProbeReport(
        "attack",
        {"sentence": " ".join(tokens), "target_position": target_position, "target": tokens[target_position],
         "epsilon": epsilon, "sign": sign},
        {"continuation": vocab.decode(generated), "log_probs": logps, "perplexity": ppl},
        checkpoint,
    )


def robustness_divergence(model: TransformerLM, params: ModelParameters, batches: Sequence[Batch],
                          restricted_flag: np.ndarray, epsilon: float, n_samples: int, rng: np.random.Generator,
                          sign: str = PAPER_MINUS, return_samples: bool = False):
    """Mean KL(clean || perturbed) of the next-token distribution right after a perturbed candidate.

    Samples ``n_samples`` (row, candidate) pairs uniformly from all eligible
    positions of ``batches``, perturbs one candidate per sampled row with the
    fast-gradient step, and compares the distributions at that position.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    ids = np.concatenate([b.token_ids for b in batches])
    pads = np.concatenate([b.pad_mask for b in batches])
    eligible = np.argwhere(candidate_mask(ids, pads, restricted_flag))
    if len(eligible) == 0:
        raise ValueError("no eligible candidate in the corpus")
    picks = eligible[rng.choice(len(eligible), size=n_samples, replace=n_samples > len(eligible))]
    rows_ids = ids[picks[:, 0]]
    positions = picks[:, 1]
    k = np.arange(n_samples)
    grads = _embedding_gradient(model, params, rows_ids)
    plan = AdversarialPlan(positions, epsilon, sign)
    step, _ = fgm_directions(grads[k, positions], epsilon, sign)
    with ad.no_grad():
        emb = model.embed(params, rows_ids).data
        no_pad = np.zeros(rows_ids.shape, dtype=bool)
        clean = ad.log_softmax(model.head(params, model.encode(params, Tensor(emb), no_pad))).data[k, positions]
        perturbed_emb = emb.copy()
        perturbed_emb[k, plan.positions] += step
        pert = ad.log_softmax(model.head(params, model.encode(params, Tensor(perturbed_emb), no_pad))).data[k, positions]
    kl = (np.exp(clean) * (clean - pert)).sum(axis=-1)
    kl = np.maximum(kl, 0.0)
    mean = float(kl.mean())
    return (mean, kl) if return_samples else mean


# ---------------------------------------------------------------------------
# translation
# ---------------------------------------------------------------------------


def translate(model: Seq2SeqTransformer, params: ModelParameters, vocab: Vocabulary, sentences: Sequence[str],
              merges: MergeTable | None = None, max_len: int = 50, batch_size: int = 64) -> list[str]:
    """Greedy translation; inputs are whitespace text, outputs are detokenised text."""
    split = (lambda s: bpe_tokenize(s, merges)) if merges is not None else str.split
    out: list[str] = []
    with ad.no_grad():
        for start in range(0, len(sentences), batch_size):
            chunk = sentences[start : start + batch_size]
            src = [encode_pair(split(s), [], vocab, model.config.max_len - 2)[0] for s in chunk]
            ids, pad = pad_rows(src)
            for row in model.greedy_translate(params, ids, pad, max_len=max_len):
                out.append(bpe_detokenize(vocab.decode(row)))
    return out


def corpus_bleu_for(model, params, vocab, pairs: Sequence[tuple[str, str]], merges=None, max_len: int = 50) -> float:
    hyps = translate(model, params, vocab, [s for s, _ in pairs], merges, max_len)
    return bleu(hyps, [t for _, t in pairs])
