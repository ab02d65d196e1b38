import json
import math

import numpy as np
import pytest

from atcl.autodiff import Tensor, grad_check
from atcl.model import ModelParameters
from atcl.synthetic import copy_reverse_pairs, grammar_corpus
from atcl.tasks import lm_task, nmt_task
from atcl.training import (AdamState, ConfigError, NonFiniteLossError, RngStreams, TrainConfig, atcl_step,
                           compose_objective, optimizer_update, prepare_adversarial, train, weighted_objective)

SMALL = dict(d_model=8, n_heads=2, n_layers=2, batch_size=4, seq_len=8, log_wall_time=False)


def small_lm(**changes):
    config = TrainConfig(**{**SMALL, **changes})
    return config, lm_task(config, grammar_corpus(60, seed=4))


# -- optimizer -------------------------------------------------------------------

def scalar_params(value):
    return ModelParameters({"w": Tensor(np.array([value]), requires_grad=True)})


def test_adam_matches_hand_recomputation():
    params = scalar_params(1.0)
    state = AdamState.zeros(params)
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    w, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate([0.5, -0.2, 0.3], start=1):
        optimizer_update(params, {"w": np.array([g])}, state, lr, b1, b2, eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert params["w"].data[0] == pytest.approx(w, rel=1e-14)
    assert state.step == 3


def test_adam_first_steps_by_hand():
    # step 1 moves by lr * g/|g| (up to eps); step 2 with the same g does the same
    params = scalar_params(0.0)
    state = AdamState.zeros(params)
    optimizer_update(params, {"w": np.array([2.0])}, state, 0.01)
    assert params["w"].data[0] == pytest.approx(-0.01, rel=1e-6)
    optimizer_update(params, {"w": np.array([2.0])}, state, 0.01)
    assert params["w"].data[0] == pytest.approx(-0.02, rel=1e-6)


def test_adam_zero_gradient_leaves_parameters():
    params = scalar_params(0.7)
    state = AdamState.zeros(params)
    for _ in range(5):
        optimizer_update(params, {"w": np.zeros(1)}, state, 0.1)
    assert params["w"].data[0] == 0.7


def test_adam_constant_gradient_steps_approach_learning_rate():
    params = scalar_params(0.0)
    state = AdamState.zeros(params)
    prev = 0.0
    for _ in range(200):
        optimizer_update(params, {"w": np.array([-3.0])}, state, 0.01)
        step, prev = params["w"].data[0] - prev, params["w"].data[0]
    assert step == pytest.approx(0.01, rel=1e-6)


def test_adam_state_roundtrip():
    params = scalar_params(1.0)
    state = AdamState.zeros(params)
    optimizer_update(params, {"w": np.array([1.0])}, state, 0.1)
    again = AdamState.from_arrays(params, state.to_arrays())
    assert again.step == 1 and again.m["w"].tolist() == state.m["w"].tolist()


# -- objective -------------------------------------------------------------------

def test_weighted_objective_example():
    assert weighted_objective(2.0, 1.0, 0.5, 0.1, 0.1) == pytest.approx(2.15, abs=1e-12)
    assert weighted_objective(2.0, None, None, 0.1, 0.1) == 2.0


def test_adv_only_mode_drops_contrastive_term():
    assert TrainConfig(mode="adv-only", beta=0.5).effective_beta == 0.0
    assert not TrainConfig(mode="atcl", alpha=0.0, beta=0.0).adversarial_enabled
    assert not TrainConfig(mode="baseline").adversarial_enabled


@pytest.mark.parametrize("seed", range(3))
def test_composite_objective_gradient_with_frozen_perturbation(seed):
    config, data = small_lm(alpha=0.5, beta=0.5, n_negatives=3)
    rngs = RngStreams(seed)
    model_config = config.model_config(len(data.vocab), config.seq_len)
    from atcl.model import build_model
    model = build_model(model_config)
    params = model.init_params(rngs.init())
    batch = data.epoch_batches(0)[0].rows(np.arange(2))
    embedded = model.embed(params, batch.token_ids)
    clean = model.forward_embedded(params, batch, embedded)
    adv = prepare_adversarial(model, batch, config, embedded, clean, data.vocab.restricted_flag,
                              rngs.adversarial(0))
    assert adv.rows.size > 0 and adv.negatives is not None
    fn = lambda: compose_objective(model, params, batch, config, adv).J  # noqa: E731
    report = grad_check(fn, dict(params.items()), max_entries=6, rng=np.random.default_rng(seed))
    assert report.ok, report.max_rel_error


# -- steps and runs --------------------------------------------------------------

def test_step_records_satisfy_the_objective_identity():
    config, data = small_lm(max_steps=15, eval_interval=100)
    result = train(config, data)
    for r in result.records:
        assert r.J == pytest.approx(r.L + 0.1 * r.L_adv + 0.1 * r.L_cont, abs=1e-9)
        assert all(np.isfinite([r.L, r.L_adv, r.L_cont, r.J]))


def test_zero_weights_reproduce_baseline_bit_for_bit():
    base, data = small_lm(mode="baseline", max_steps=20, eval_interval=100)
    zero = base.replace(mode="atcl", alpha=0.0, beta=0.0)
    a, b = train(base, data), train(zero, data)
    for (n, x), (_, y) in zip(a.params.arrays().items(), b.params.arrays().items()):
        assert x.tobytes() == y.tobytes(), n


def test_identical_runs_write_identical_artifacts(tmp_path):
    config, data = small_lm(max_steps=12, eval_interval=5)
    train(config, data, tmp_path / "a")
    train(config, data, tmp_path / "b")
    for name in ("metrics.jsonl", "checkpoint.atcl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path):
    config, data = small_lm(max_steps=12, eval_interval=6)
    train(config, data, tmp_path / "full")
    train(config.replace(max_steps=6), data, tmp_path / "part")
    resumed = train(config, data, tmp_path / "part", resume=True)
    assert resumed.records[0].step == 6
    assert (tmp_path / "full" / "checkpoint.atcl").read_bytes() == (tmp_path / "part" / "checkpoint.atcl").read_bytes()
    full = (tmp_path / "full" / "metrics.jsonl").read_text().splitlines()
    part = [line for line in (tmp_path / "part" / "metrics.jsonl").read_text().splitlines() if '"resume"' not in line]
    assert full[1:] == part[1:]


def test_metrics_header_records_config_and_overrides(tmp_path):
    config, data = small_lm(max_steps=2, eval_interval=1)
    train(config, data, tmp_path, overrides={"mode": "atcl"})
    lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert lines[0]["config"]["d_model"] == 8 and lines[0]["overrides"] == {"mode": "atcl"}
    assert set(lines[1]) >= {"step", "L", "L_adv", "L_cont", "J", "wall_ms"}


def test_non_finite_loss_aborts_with_a_record(tmp_path):
    config, data = small_lm(max_steps=50, eval_interval=100, learning_rate=1e300)
    with np.errstate(all="ignore"), pytest.raises(NonFiniteLossError) as info:
        train(config, data, tmp_path)
    last = json.loads((tmp_path / "metrics.jsonl").read_text().splitlines()[-1])
    assert last["error"] == "non-finite objective"
    assert info.value.record.step == last["step"]


def test_step_updates_parameters_in_place():
    config, data = small_lm()
    from atcl.model import build_model
    model = build_model(config.model_config(len(data.vocab), config.seq_len))
    rngs = RngStreams(0)
    params = model.init_params(rngs.init())
    before = params["embedding"].data.copy()
    record = atcl_step(model, params, AdamState.zeros(params), data.epoch_batches(0)[0], config,
                       data.vocab.restricted_flag, rngs, 0)
    assert record.grad_norm > 0
    assert not np.array_equal(before, params["embedding"].data)


# -- configuration ---------------------------------------------------------------

def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# comment\nmode = baseline\nepsilon = 0.05\ninclude_positive = yes\n")
    config = TrainConfig.from_file(path, ["mode=atcl", "n_negatives=20"])
    assert (config.mode, config.epsilon, config.include_positive, config.n_negatives) == ("atcl", 0.05, True, 20)
    assert TrainConfig.from_file(_write(tmp_path, config.to_text())) == config


def _write(tmp_path, text):
    p = tmp_path / "round.txt"
    p.write_text(text)
    return p


@pytest.mark.parametrize("entry", ["unknown=1", "alpha=2", "tau=0", "epsilon=-1", "mode=fancy",
                                   "n_negatives=x", "fgm_sign=up", "include_positive=maybe"])
def test_bad_config_entries_rejected(entry):
    from atcl.training import parse_overrides
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping(parse_overrides([entry]))


@pytest.mark.slow
def test_copy_task_reaches_high_token_accuracy():
    config = TrainConfig(task="nmt", mode="baseline", d_model=32, n_heads=2, batch_size=25, seq_len=10,
                         max_steps=900, eval_interval=900, learning_rate=1e-3, log_wall_time=False)
    pairs = [(s, s) for s, _ in copy_reverse_pairs(200, seed=11)]
    data = nmt_task(config, pairs)
    result = train(config, data)
    correct = total = 0
    for batch in data.epoch_batches(0):
        out = result.model.forward(result.params, batch)
        pred = out.logits.data.argmax(-1)
        gold = batch.target_ids[:, 1:]
        correct += int(((pred == gold) & out.loss_mask).sum())
        total += int(out.loss_mask.sum())
    assert correct / total > 0.99
