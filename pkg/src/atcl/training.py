"""The adversarial-contrastive training step, optimizer and checkpointed runs."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .adversarial import PAPER_MINUS, SIGNS, build_adversarial_batch, candidate_gradients, select_candidates
from .autodiff import Tensor
from .contrastive import NegativeSample, batched_contrastive_loss, sample_negatives
from .model import ForwardResult, ModelConfig, ModelParameters, TransformerModel, build_model, load_checkpoint, save_checkpoint
from .text import Batch

log = logging.getLogger(__name__)

MODES = ("baseline", "adv-only", "atcl")
TASKS = ("lm", "nmt")


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


class NonFiniteLossError(FloatingPointError):
    def __init__(self, record: "StepRecord"):
        super().__init__(f"non-finite objective at step {record.step}: J={record.J}")
        self.record = record


@dataclass
class TrainConfig:
    task: str = "lm"
    mode: str = "atcl"
    epsilon: float = 0.03
    alpha: float = 0.1
    beta: float = 0.1
    tau: float = 0.07
    n_negatives: int = 10
    batch_size: int = 45
    seq_len: int = 32
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = 0
    grad_clip: float = 0.0
    max_steps: int = 1000
    eval_interval: int = 100
    seed: int = 0
    fgm_sign: str = PAPER_MINUS
    include_positive: bool = False
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    n_enc_layers: int = 3
    n_dec_layers: int = 3
    d_ff: int = 0
    dropout: float = 0.0
    contrast_side: str = "encoder"
    min_frequency: int = 1
    bpe_merges: int = 0
    decode_max_len: int = 50
    train_corpus: str = ""
    valid_corpus: str = ""
    train_src: str = ""
    train_trg: str = ""
    valid_src: str = ""
    valid_trg: str = ""
    out_dir: str = "run"
    log_wall_time: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not 0.0 <= self.alpha <= 1.0 or not 0.0 <= self.beta <= 1.0:
            raise ConfigError("alpha and beta must lie in [0, 1]")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.fgm_sign not in SIGNS:
            raise ConfigError(f"fgm_sign must be one of {sorted(SIGNS)}")
        if self.n_negatives < 1 or self.batch_size < 1 or self.seq_len < 2:
            raise ConfigError("n_negatives and batch_size must be >= 1, seq_len >= 2")
        if self.max_steps < 0 or self.eval_interval < 1:
            raise ConfigError("max_steps must be >= 0 and eval_interval >= 1")
        if self.contrast_side not in ("encoder", "decoder"):
            raise ConfigError("contrast_side must be 'encoder' or 'decoder'")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def effective_beta(self) -> float:
        return 0.0 if self.mode == "adv-only" else self.beta

    @property
    def adversarial_enabled(self) -> bool:
        return self.mode != "baseline" and (self.alpha > 0 or self.effective_beta > 0)

    def model_config(self, vocab_size: int, max_len: int = 512) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, task=self.task, d_model=self.d_model, n_heads=self.n_heads,
                           n_layers=self.n_layers, n_enc_layers=self.n_enc_layers, n_dec_layers=self.n_dec_layers,
                           d_ff=self.d_ff, max_len=max_len, dropout=self.dropout, contrast_side=self.contrast_side)

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # -- flat "key = value" files -----------------------------------------
    @classmethod
    def from_mapping(cls, values: dict[str, str | object]) -> TrainConfig:
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, types[key], raw)
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path: str | Path, overrides: Sequence[str] = ()) -> TrainConfig:
        values = parse_config_text(Path(path).read_text(encoding="utf-8"))
        values.update(parse_overrides(overrides))
        return cls.from_mapping(values)

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
        return "\n".join(lines) + "\n"


def _coerce(key: str, typ, raw):
    if not isinstance(raw, str):
        return raw
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None
    return raw.strip()


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected 'key = value'")
        values[key.strip()] = value.strip()
    return values


def parse_overrides(overrides: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------


class RngStreams:
    """Independent generators derived from one seed, keyed by purpose and index.

    Deriving a fresh generator per (stream, step) keeps every draw a function of
    the step counter, which makes resumed runs replay exactly.
    """

    INIT, BATCHING, ADVERSARIAL, DROPOUT, EVAL = range(5)

    def __init__(self, seed: int):
        self.seed = int(seed)

    def _get(self, stream: int, index: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream, index])

    def init(self) -> np.random.Generator:
        return self._get(self.INIT)

    def batching(self, epoch: int) -> np.random.Generator:
        return self._get(self.BATCHING, epoch)

    def adversarial(self, step: int) -> np.random.Generator:
        return self._get(self.ADVERSARIAL, step)

    def dropout(self, step: int) -> np.random.Generator:
        return self._get(self.DROPOUT, step)

    def evaluation(self, index: int = 0) -> np.random.Generator:
        return self._get(self.EVAL, index)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParameters) -> AdamState:
        return cls(OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items()),
                   OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items()))

    def to_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for k, a in self.m.items():
            out[f"optim.m.{k}"] = a
        for k, a in self.v.items():
            out[f"optim.v.{k}"] = a
        out["optim.step"] = np.array([float(self.step)])
        return out

    @classmethod
    def from_arrays(cls, params: ModelParameters, arrays: "OrderedDict[str, np.ndarray]") -> AdamState:
        try:
            m = OrderedDict((k, arrays[f"optim.m.{k}"].copy()) for k in params.names())
            v = OrderedDict((k, arrays[f"optim.v.{k}"].copy()) for k in params.names())
            step = int(arrays["optim.step"][0])
        except KeyError as exc:
            raise ValueError(f"checkpoint lacks optimizer entry {exc}") from None
        return cls(m, v, step)


def optimizer_update(params: ModelParameters, grads: dict[str, np.ndarray], state: AdamState, learning_rate: float,
                     beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected adaptive-moment update, in place."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# the step
# ---------------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    L: float
    L_adv: float = 0.0
    L_cont: float = 0.0
    J: float = 0.0
    candidate_positions: list[int] = field(default_factory=list)
    grad_norm: float = 0.0
    degenerate_count: int = 0
    short_negatives: int = 0
    wall_ms: float | None = None

    def log_record(self) -> dict:
        return {"step": self.step, "L": self.L, "L_adv": self.L_adv, "L_cont": self.L_cont, "J": self.J,
                "wall_ms": self.wall_ms}


@dataclass
class AdversarialInputs:
    """Everything the objective needs beyond parameters, frozen before differentiation."""

    rows: np.ndarray
    positions: np.ndarray
    deltas: np.ndarray
    anchor_positions: np.ndarray
    negatives: NegativeSample | None
    candidate_positions: np.ndarray
    degenerate: int = 0


@dataclass
class Objective:
    J: Tensor
    L: Tensor
    L_adv: Tensor | None
    L_cont: Tensor | None
    clean: ForwardResult


def weighted_objective(L, L_adv, L_cont, alpha: float, beta: float):
    """``L + alpha * L_adv + beta * L_cont``; zero weights and missing terms are skipped, not multiplied."""
    J = L
    if L_adv is not None and alpha > 0:
        J = J + alpha * L_adv
    if L_cont is not None and beta > 0:
        J = J + beta * L_cont
    return J


def compose_objective(model: TransformerModel, params: ModelParameters, batch: Batch, config: TrainConfig,
                      adv: AdversarialInputs | None, clean: ForwardResult | None = None,
                      embedded: Tensor | None = None, rng: np.random.Generator | None = None) -> Objective:
    """``J = L + alpha * L_adv + beta * L_cont`` with the perturbation held constant."""
    if clean is None:
        embedded = model.embed(params, batch.token_ids)
        clean = model.forward_embedded(params, batch, embedded, rng)
    L = clean.loss
    if adv is None or adv.rows.size == 0:
        return Objective(L, L, None, None, clean)
    perturbed = embedded[adv.rows] + Tensor(adv.deltas)
    adv_out = model.forward_embedded(params, batch.rows(adv.rows), perturbed, rng)
    L_adv = adv_out.loss
    L_cont = None
    beta = config.effective_beta
    if beta > 0 and adv.negatives is not None:
        d = clean.reps.shape[-1]
        k = adv.rows.size
        anchors = clean.reps[adv.rows, adv.anchor_positions]
        positives = adv_out.reps[np.arange(k), adv.anchor_positions]
        flat = clean.reps.reshape(-1, d)
        negatives = flat[np.where(adv.negatives.mask, adv.negatives.indices, 0)]
        per_anchor = batched_contrastive_loss(anchors, positives, negatives, config.tau,
                                              adv.negatives.mask, config.include_positive)
        L_cont = per_anchor.mean()
    J = weighted_objective(L, L_adv, L_cont, config.alpha, beta)
    return Objective(J, L, L_adv, L_cont, clean)


def prepare_adversarial(model: TransformerModel, batch: Batch, config: TrainConfig, embedded: Tensor,
                        clean: ForwardResult, restricted_flag: np.ndarray,
                        rng: np.random.Generator) -> AdversarialInputs:
    """Choose candidates, differentiate the clean loss, and freeze perturbations and negatives."""
    plan = select_candidates(batch.token_ids, batch.pad_mask, restricted_flag, rng, config.epsilon, config.fgm_sign)
    grads = np.zeros((0, embedded.shape[-1]))
    if plan.rows.size:
        ad.backward(clean.loss)
        grads = candidate_gradients(embedded.grad, plan)
    built = build_adversarial_batch(embedded.detach(), plan, grads)
    anchor_pos = model.anchor_positions(batch.rows(built.rows), built.positions)
    negatives = None
    if config.effective_beta > 0 and built.rows.size:
        anchors = np.stack([built.rows, anchor_pos], axis=1)
        negatives = sample_negatives(clean.rep_pad_mask, anchors, config.n_negatives, rng)
    return AdversarialInputs(built.rows, built.positions, built.deltas, anchor_pos, negatives,
                             plan.positions.copy(), len(built.degenerate_rows))


def learning_rate_at(config: TrainConfig, step: int) -> float:
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return config.learning_rate * (step + 1) / config.warmup_steps
    return config.learning_rate


def atcl_step(model: TransformerModel, params: ModelParameters, opt: AdamState, batch: Batch, config: TrainConfig,
              restricted_flag: np.ndarray, rngs: RngStreams, step: int) -> StepRecord:
    """One optimisation step; parameters and optimizer state are updated in place."""
    start = time.perf_counter()
    drop_rng = rngs.dropout(step) if config.dropout > 0 else None
    embedded = model.embed(params, batch.token_ids)
    clean = model.forward_embedded(params, batch, embedded, drop_rng)
    adv = None
    if config.adversarial_enabled:
        adv = prepare_adversarial(model, batch, config, embedded, clean, restricted_flag, rngs.adversarial(step))
    obj = compose_objective(model, params, batch, config, adv, clean, embedded, drop_rng)
    record = StepRecord(
        step=step,
        L=obj.L.item(),
        L_adv=obj.L_adv.item() if obj.L_adv is not None else 0.0,
        L_cont=obj.L_cont.item() if obj.L_cont is not None else 0.0,
        J=obj.J.item(),
        candidate_positions=[] if adv is None else adv.candidate_positions.tolist(),
        degenerate_count=0 if adv is None else adv.degenerate,
        short_negatives=0 if adv is None or adv.negatives is None else adv.negatives.short,
    )
    if not np.isfinite(record.J):
        raise NonFiniteLossError(record)
    params.zero_grad()
    ad.backward(obj.J)
    grads = OrderedDict((k, np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in params.items())
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if config.grad_clip > 0 and norm > config.grad_clip:
        scale = config.grad_clip / norm
        grads = OrderedDict((k, g * scale) for k, g in grads.items())
    record.grad_norm = norm
    optimizer_update(params, grads, opt, learning_rate_at(config, step), config.adam_beta1, config.adam_beta2,
                     config.adam_eps)
    if config.log_wall_time:
        record.wall_ms = round((time.perf_counter() - start) * 1000.0, 3)
    return record


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


@dataclass
class TaskData:
    """Vocabulary plus a batch source; ``epoch_batches(shuffle_seed)`` must be deterministic."""

    vocab: object
    epoch_batches: Callable[[int], list[Batch]]
    evaluate: Callable[[TransformerModel, ModelParameters], dict[str, float]] | None = None
    merges: object = None
    max_len: int = 512


@dataclass
class TrainResult:
    model: TransformerModel
    params: ModelParameters
    optimizer: AdamState
    records: list[StepRecord]
    evals: list[dict]


CHECKPOINT_NAME = "checkpoint.atcl"
METRICS_NAME = "metrics.jsonl"


def _dump(obj) -> str:
    return json.dumps(obj, separators=(", ", ": "))


class BatchSchedule:
    """Maps a global step to its batch; epoch order is reseeded per epoch."""

    def __init__(self, data: TaskData, rngs: RngStreams):
        self.data = data
        self.rngs = rngs
        self._epoch = -1
        self._batches: list[Batch] = []

    def __call__(self, step: int) -> Batch:
        first = self.data.epoch_batches(0) if self._epoch < 0 else self._batches
        n = len(first)
        if n == 0:
            raise ValueError("no training batches")
        epoch, index = divmod(step, n)
        if epoch != self._epoch:
            self._batches = self.data.epoch_batches(int(self.rngs.batching(epoch).integers(2**31)))
            self._epoch = epoch
        return self._batches[index]


def train(config: TrainConfig, data: TaskData, out_dir: str | Path | None = None, resume: bool = False,
          overrides: dict | None = None, on_eval: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Run ``config.max_steps`` steps; with ``out_dir`` write metrics and checkpoints there.

    With ``resume`` the latest checkpoint in ``out_dir`` (parameters, optimizer
    moments and step counter) is restored and the metrics log is appended to.
    ``on_eval(step, metrics)`` runs at every evaluation; returning True ends the run early.
    """
    rngs = RngStreams(config.seed)
    model = build_model(config.model_config(len(data.vocab), data.max_len))
    out = Path(out_dir) if out_dir is not None else None
    start_step = 0
    if resume:
        if out is None:
            raise ValueError("resume requires out_dir")
        params, extra = load_checkpoint(out / CHECKPOINT_NAME, model.config)
        opt = AdamState.from_arrays(params, extra)
        start_step = opt.step
    else:
        params = model.init_params(rngs.init())
        opt = AdamState.zeros(params)
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume:
            log_fh = open(out / METRICS_NAME, "a", encoding="utf-8")
            log_fh.write(_dump({"resume": start_step}) + "\n")
        else:
            log_fh = open(out / METRICS_NAME, "w", encoding="utf-8")
            log_fh.write(_dump({"config": config.to_dict(), "overrides": overrides or {}}) + "\n")
    schedule = BatchSchedule(data, rngs)
    flags = data.vocab.restricted_flag
    records: list[StepRecord] = []
    evals: list[dict] = []
    try:
        for step in range(start_step, config.max_steps):
            record = atcl_step(model, params, opt, schedule(step), config, flags, rngs, step)
            records.append(record)
            entry = record.log_record()
            stop = False
            done = step + 1
            if done % config.eval_interval == 0 or done == config.max_steps:
                metrics = data.evaluate(model, params) if data.evaluate is not None else {}
                entry.update(metrics)
                evals.append({"step": step, **metrics})
                stop = bool(on_eval(step, metrics)) if on_eval is not None else False
                if out is not None:
                    save_checkpoint(out / CHECKPOINT_NAME, params, opt.to_arrays())
            if log_fh is not None:
                log_fh.write(_dump(entry) + "\n")
            if stop:
                break
    except NonFiniteLossError as exc:
        if log_fh is not None:
            log_fh.write(_dump({**exc.record.log_record(), "error": "non-finite objective"}) + "\n")
        raise
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(model, params, opt, records, evals)
