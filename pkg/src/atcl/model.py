"""Pre-LN transformer language model and encoder-decoder translation model.

Both models expose the same surface to the training loop: ``embed`` produces
the perturbable input embeddings, ``forward_embedded`` runs the network from
those embeddings and returns the task loss together with the representations
taken right before the output projection.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .text import BOS_ID, EOS_ID, Batch

MAGIC = b"ATCL1\n"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    task: str = "lm"
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    n_enc_layers: int = 3
    n_dec_layers: int = 3
    d_ff: int = 0
    max_len: int = 512
    dropout: float = 0.0
    contrast_side: str = "encoder"

    def __post_init__(self):
        if self.task not in ("lm", "nmt"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.contrast_side not in ("encoder", "decoder"):
            raise ValueError(f"unknown contrast_side {self.contrast_side!r}")

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d_model


class ModelParameters:
    """Named tensors in a fixed canonical order."""

    def __init__(self, tensors: "OrderedDict[str, Tensor] | dict[str, Tensor]"):
        self._tensors = OrderedDict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, t.shape) for k, t in self._tensors.items()]

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self._tensors.items())

    def copy(self) -> ModelParameters:
        return ModelParameters(OrderedDict((k, Tensor(t.data.copy(), requires_grad=True)) for k, t in self._tensors.items()))

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.size for t in self._tensors.values())


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return table


def _attention_shapes(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.{w}", (d, d) if w.startswith("w") else (d,)) for w in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def _norm_shapes(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.gain", (d,)), (f"{prefix}.shift", (d,))]


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f, v = config.d_model, config.ff_dim, config.vocab_size
    ff = lambda p: [(f"{p}.ff.w1", (d, f)), (f"{p}.ff.b1", (f,)), (f"{p}.ff.w2", (f, d)), (f"{p}.ff.b2", (d,))]  # noqa: E731
    shapes = [("embedding", (v, d))]
    if config.task == "lm":
        for i in range(config.n_layers):
            p = f"layers.{i}"
            shapes += _norm_shapes(f"{p}.ln1", d) + _attention_shapes(f"{p}.attn", d) + _norm_shapes(f"{p}.ln2", d) + ff(p)
        shapes += _norm_shapes("final_ln", d)
    else:
        for i in range(config.n_enc_layers):
            p = f"encoder.{i}"
            shapes += _norm_shapes(f"{p}.ln1", d) + _attention_shapes(f"{p}.attn", d) + _norm_shapes(f"{p}.ln2", d) + ff(p)
        shapes += _norm_shapes("encoder.final_ln", d)
        for i in range(config.n_dec_layers):
            p = f"decoder.{i}"
            shapes += (_norm_shapes(f"{p}.ln1", d) + _attention_shapes(f"{p}.self_attn", d)
                       + _norm_shapes(f"{p}.ln2", d) + _attention_shapes(f"{p}.cross_attn", d)
                       + _norm_shapes(f"{p}.ln3", d) + ff(p))
        shapes += _norm_shapes("decoder.final_ln", d)
    shapes += [("head.weight", (d, v)), ("head.bias", (v,))]
    return shapes


def init_parameters(config: ModelConfig, rng: np.random.Generator) -> ModelParameters:
    """Weights uniform in +-1/sqrt(d_model); biases and shifts zero; gains one."""
    bound = 1.0 / np.sqrt(config.d_model)
    tensors = OrderedDict()
    for name, shape in parameter_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            data = np.ones(shape)
        elif leaf in ("shift", "bias") or leaf.startswith("b"):
            data = np.zeros(shape)
        else:
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParameters(tensors)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _layer_norm(params: ModelParameters, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.shift"])


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def multi_head_attention(params: ModelParameters, prefix: str, x_q: Tensor, x_kv: Tensor,
                         allowed: np.ndarray, n_heads: int) -> Tensor:
    """``allowed`` is a (B, Nq, Nk) boolean matrix of permitted query->key links."""
    b, nq, d = x_q.shape
    p = lambda w: params[f"{prefix}.{w}"]  # noqa: E731
    q = _split_heads(ad.linear(x_q, p("wq"), p("bq")), n_heads)
    k = _split_heads(ad.linear(x_kv, p("wk"), p("bk")), n_heads)
    v = _split_heads(ad.linear(x_kv, p("wv"), p("bv")), n_heads)
    mixed = ad.scaled_dot_product_attention(q, k, v, allowed[:, None, :, :])
    merged = mixed.transpose(0, 2, 1, 3).reshape(b, nq, d)
    return ad.linear(merged, p("wo"), p("bo"))


def _feed_forward(params: ModelParameters, prefix: str, x: Tensor) -> Tensor:
    h = ad.gelu(ad.linear(x, params[f"{prefix}.ff.w1"], params[f"{prefix}.ff.b1"]))
    return ad.linear(h, params[f"{prefix}.ff.w2"], params[f"{prefix}.ff.b2"])


def causal_allowed(pad_mask: np.ndarray) -> np.ndarray:
    n = pad_mask.shape[1]
    return np.tril(np.ones((n, n), dtype=bool))[None] & ~pad_mask[:, None, :]


def key_allowed(pad_mask: np.ndarray, n_queries: int) -> np.ndarray:
    return np.broadcast_to(~pad_mask[:, None, :], (pad_mask.shape[0], n_queries, pad_mask.shape[1]))


@dataclass
class ForwardResult:
    loss: Tensor
    logits: Tensor
    reps: Tensor
    rep_pad_mask: np.ndarray
    target_log_probs: np.ndarray
    loss_mask: np.ndarray


class TransformerModel:
    """Shared machinery; subclasses define the network body."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.positions = sinusoidal_positions(config.max_len, config.d_model)

    def init_params(self, rng: np.random.Generator) -> ModelParameters:
        return init_parameters(self.config, rng)

    def embed(self, params: ModelParameters, ids: np.ndarray) -> Tensor:
        """Row lookup into the embedding matrix plus the sinusoidal position term."""
        n = ids.shape[-1]
        if n > self.config.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        return ad.embedding(params["embedding"], ids) + Tensor(self.positions[:n])

    def _self_block(self, params, prefix, x, allowed, rng):
        cfg = self.config
        n = _layer_norm(params, f"{prefix}.ln1", x)
        x = x + ad.dropout(multi_head_attention(params, f"{prefix}.attn", n, n, allowed, cfg.n_heads), cfg.dropout, rng)
        n = _layer_norm(params, f"{prefix}.ln2", x)
        return x + ad.dropout(_feed_forward(params, prefix, n), cfg.dropout, rng)

    def head(self, params: ModelParameters, reps: Tensor) -> Tensor:
        return ad.linear(reps, params["head.weight"], params["head.bias"])

    @staticmethod
    def _scored(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
        loss = ad.cross_entropy(logits, targets, mask)
        logp = ad.log_softmax(logits.detach()).data
        picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        return loss, picked


class TransformerLM(TransformerModel):
    def encode(self, params: ModelParameters, embedded: Tensor, pad_mask: np.ndarray,
               rng: np.random.Generator | None = None) -> Tensor:
        """Causal transformer stack; returns final-normalised representations H."""
        allowed = causal_allowed(pad_mask)
        x = embedded
        for i in range(self.config.n_layers):
            x = self._self_block(params, f"layers.{i}", x, allowed, rng)
        return _layer_norm(params, "final_ln", x)

    def lm_loss(self, params: ModelParameters, reps: Tensor, targets: np.ndarray,
                mask: np.ndarray) -> tuple[Tensor, Tensor, np.ndarray]:
        """Mean next-token NLL over unmasked positions, plus per-position target log-probs."""
        logits = self.head(params, reps)
        loss, picked = self._scored(logits, targets, mask)
        return loss, logits, picked

    def forward_embedded(self, params: ModelParameters, batch: Batch, embedded: Tensor,
                         rng: np.random.Generator | None = None) -> ForwardResult:
        reps = self.encode(params, embedded, batch.pad_mask, rng)
        mask = ~batch.pad_mask
        loss, logits, picked = self.lm_loss(params, reps, batch.targets, mask)
        return ForwardResult(loss, logits, reps, batch.pad_mask, picked, mask)

    def forward(self, params: ModelParameters, batch: Batch, rng=None) -> ForwardResult:
        return self.forward_embedded(params, batch, self.embed(params, batch.token_ids), rng)

    def anchor_positions(self, batch: Batch, positions: np.ndarray) -> np.ndarray:
        return positions

    def next_log_probs(self, params: ModelParameters, ids: np.ndarray, delta: np.ndarray | None = None) -> np.ndarray:
        """Log-distribution over the token following each prefix position (no graph kept)."""
        ids = np.atleast_2d(ids)
        emb = self.embed(params, ids).data
        if delta is not None:
            emb = emb + delta[:, : ids.shape[1]]
        reps = self.encode(params, Tensor(emb), np.zeros(ids.shape, dtype=bool))
        return ad.log_softmax(self.head(params, reps)).data


class Seq2SeqTransformer(TransformerModel):
    def encode(self, params: ModelParameters, embedded: Tensor, pad_mask: np.ndarray, rng=None) -> Tensor:
        allowed = key_allowed(pad_mask, pad_mask.shape[1])
        x = embedded
        for i in range(self.config.n_enc_layers):
            x = self._self_block(params, f"encoder.{i}", x, allowed, rng)
        return _layer_norm(params, "encoder.final_ln", x)

    def decode(self, params: ModelParameters, memory: Tensor, src_pad: np.ndarray, trg_in: np.ndarray,
               trg_pad: np.ndarray, rng=None) -> Tensor:
        cfg = self.config
        self_allowed = causal_allowed(trg_pad)
        cross_allowed = key_allowed(src_pad, trg_in.shape[1])
        x = self.embed(params, trg_in)
        for i in range(cfg.n_dec_layers):
            p = f"decoder.{i}"
            n = _layer_norm(params, f"{p}.ln1", x)
            x = x + ad.dropout(multi_head_attention(params, f"{p}.self_attn", n, n, self_allowed, cfg.n_heads), cfg.dropout, rng)
            n = _layer_norm(params, f"{p}.ln2", x)
            x = x + ad.dropout(multi_head_attention(params, f"{p}.cross_attn", n, memory, cross_allowed, cfg.n_heads), cfg.dropout, rng)
            n = _layer_norm(params, f"{p}.ln3", x)
            x = x + ad.dropout(_feed_forward(params, p, n), cfg.dropout, rng)
        return _layer_norm(params, "decoder.final_ln", x)

    def forward_embedded(self, params: ModelParameters, batch: Batch, embedded: Tensor, rng=None) -> ForwardResult:
        """Teacher-forced loss: mean NLL of ``y_m`` given ``y_<m`` and the source."""
        if batch.target_ids is None:
            raise ValueError("translation batch requires target_ids")
        if batch.target_ids.shape[0] != batch.token_ids.shape[0]:
            raise ValueError("source and target batch sizes differ")
        memory = self.encode(params, embedded, batch.pad_mask, rng)
        trg_in = batch.target_ids[:, :-1]
        trg_out = batch.target_ids[:, 1:]
        out_mask = ~batch.target_pad_mask[:, 1:]
        dec = self.decode(params, memory, batch.pad_mask, trg_in, batch.target_pad_mask[:, :-1], rng)
        logits = self.head(params, dec)
        loss, picked = self._scored(logits, trg_out, out_mask)
        if self.config.contrast_side == "encoder":
            reps, rep_pad = memory, batch.pad_mask
        else:
            reps, rep_pad = dec, batch.target_pad_mask[:, :-1]
        return ForwardResult(loss, logits, reps, rep_pad, picked, out_mask)

    def forward(self, params: ModelParameters, batch: Batch, rng=None) -> ForwardResult:
        return self.forward_embedded(params, batch, self.embed(params, batch.token_ids), rng)

    def anchor_positions(self, batch: Batch, positions: np.ndarray) -> np.ndarray:
        """Source candidate index -> representation index on the contrasted side."""
        if self.config.contrast_side == "encoder":
            return positions
        last = (~batch.target_pad_mask[:, :-1]).sum(axis=1) - 1
        return np.minimum(positions, last)

    def greedy_translate(self, params: ModelParameters, src_ids: np.ndarray, src_pad: np.ndarray,
                         max_len: int = 50, delta: np.ndarray | None = None) -> list[list[int]]:
        emb = self.embed(params, src_ids).data
        if delta is not None:
            emb = emb + delta
        memory = self.encode(params, Tensor(emb), src_pad)
        b = src_ids.shape[0]
        out = np.full((b, 1), BOS_ID, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for _ in range(max_len):
            dec = self.decode(params, memory, src_pad, out, np.zeros(out.shape, dtype=bool))
            logits = self.head(params, dec[:, -1:, :]).data[:, 0]
            nxt = np.where(done, EOS_ID, logits.argmax(axis=-1))
            out = np.concatenate([out, nxt[:, None]], axis=1)
            done |= nxt == EOS_ID
            if done.all():
                break
        results = []
        for row in out[:, 1:]:
            ids = list(row)
            results.append(ids[: ids.index(EOS_ID)] if EOS_ID in ids else ids)
        return results


def build_model(config: ModelConfig) -> TransformerModel:
    return TransformerLM(config) if config.task == "lm" else Seq2SeqTransformer(config)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def save_arrays(path: str | Path, arrays: "OrderedDict[str, np.ndarray]") -> None:
    """``ATCL1\\n``, a count line, one ``name<TAB>d1,d2`` line per array, then little-endian float64 data."""
    header = [f"{len(arrays)}\n"]
    for name, arr in arrays.items():
        if "\t" in name or "\n" in name:
            raise ValueError(f"invalid tensor name {name!r}")
        header.append(f"{name}\t{','.join(str(s) for s in arr.shape)}\n")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write("".join(header).encode("utf-8"))
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_arrays(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not an ATCL checkpoint")
    pos = len(MAGIC)
    end = raw.index(b"\n", pos)
    count = int(raw[pos:end])
    pos = end + 1
    entries = []
    for _ in range(count):
        end = raw.index(b"\n", pos)
        name, _, dims = raw[pos:end].decode("utf-8").partition("\t")
        entries.append((name, tuple(int(d) for d in dims.split(",")) if dims else ()))
        pos = end + 1
    arrays = OrderedDict()
    for name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        if pos + nbytes > len(raw):
            raise ValueError(f"{path}: truncated data for {name}")
        arrays[name] = np.frombuffer(raw[pos : pos + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes after tensor data")
    return arrays


def save_checkpoint(path: str | Path, params: ModelParameters, extra: "OrderedDict[str, np.ndarray] | None" = None) -> None:
    arrays = params.arrays()
    if extra:
        arrays.update(extra)
    save_arrays(path, arrays)


def load_checkpoint(path: str | Path, config: ModelConfig) -> tuple[ModelParameters, "OrderedDict[str, np.ndarray]"]:
    """Load model parameters, verifying names and shapes exactly; returns leftover arrays too."""
    arrays = load_arrays(path)
    expected = parameter_shapes(config)
    got = [(k, v.shape) for k, v in list(arrays.items())[: len(expected)]]
    if got != expected:
        raise ValueError(f"{path}: parameter layout does not match the model configuration")
    tensors = OrderedDict((k, Tensor(arrays.pop(k).copy(), requires_grad=True)) for k, _ in expected)
    return ModelParameters(tensors), arrays
