import json
import subprocess
import sys

import pytest

from atcl.cli import EXIT_CONFIG, EXIT_INPUT, EXIT_IO, EXIT_NAN, EXIT_USAGE, main
from atcl.synthetic import copy_reverse_pairs, grammar_corpus

TINY = ["d_model=8", "n_heads=2", "n_layers=1", "n_enc_layers=1", "n_dec_layers=1", "batch_size=4", "seq_len=8",
        "max_steps=4", "eval_interval=2", "log_wall_time=false"]


def sets(items):
    return [arg for item in items for arg in ("--set", item)]


@pytest.fixture(scope="module")
def lm_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("lm")
    (root / "train.txt").write_text("\n".join(grammar_corpus(40)) + "\n")
    (root / "valid.txt").write_text("\n".join(grammar_corpus(10, seed=1)) + "\n")
    (root / "cfg.txt").write_text(f"task = lm\ntrain_corpus = {root / 'train.txt'}\nvalid_corpus = {root / 'valid.txt'}\n")
    code = main(["train", "--config", str(root / "cfg.txt"), "--out", str(root / "run"), "--seed", "3",
                 *sets(TINY + ["mode=atcl", "n_negatives=10"])])
    assert code == 0
    return root


def test_train_writes_artifacts_and_records_overrides(lm_run):
    run = lm_run / "run"
    for name in ("checkpoint.atcl", "vocab.txt", "config.txt", "metrics.jsonl"):
        assert (run / name).is_file()
    header = json.loads((run / "metrics.jsonl").read_text().splitlines()[0])
    assert header["overrides"]["n_negatives"] == "10" and header["overrides"]["seed"] == "3"
    assert header["config"]["n_negatives"] == 10 and header["config"]["seed"] == 3


def test_eval_ppl_prints_one_number(lm_run, capsys):
    assert main(["eval-ppl", "--checkpoint", str(lm_run / "run" / "checkpoint.atcl"),
                 "--corpus", str(lm_run / "valid.txt")]) == 0
    out = capsys.readouterr().out.strip()
    assert float(out) >= 1.0 and "\n" not in out


def test_probe_neighbors_lists_k_rows(lm_run, capsys):
    word = grammar_corpus(1)[0].split()[-2]
    assert main(["probe-neighbors", "--checkpoint", str(lm_run / "run"), "--word", word, "--k", "4"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4 + 4 and lines[1] == f"word: {word}"
    assert main(["probe-neighbors", "--checkpoint", str(lm_run / "run"), "--word", word, "--k", "4", "--json"]) == 0
    record = json.loads(capsys.readouterr().out)
    assert record["kind"] == "neighbors" and len(record["outputs"]["neighbors"]) == 4


def test_attack_and_robustness(lm_run, capsys):
    sentence = grammar_corpus(1)[0]
    assert main(["attack", "--checkpoint", str(lm_run / "run"), "--sentence", sentence, "--position", "1",
                 "--epsilon", "0.5", "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["kind"] == "attack"
    assert main(["robustness", "--checkpoint", str(lm_run / "run"), "--corpus", str(lm_run / "valid.txt"),
                 "--samples", "20"]) == 0
    assert json.loads(capsys.readouterr().out)["robustness_divergence"] >= 0


def test_identical_invocations_give_identical_artifacts(lm_run, tmp_path):
    args = ["train", "--config", str(lm_run / "cfg.txt"), "--seed", "3", *sets(TINY + ["mode=atcl", "n_negatives=10"])]
    assert main(args + ["--out", str(tmp_path / "again")]) == 0
    for name in ("checkpoint.atcl", "metrics.jsonl", "vocab.txt", "config.txt"):
        assert (tmp_path / "again" / name).read_bytes() == (lm_run / "run" / name).read_bytes()


def test_nmt_train_translate_and_bleu(tmp_path, capsys):
    pairs = copy_reverse_pairs(30)
    (tmp_path / "s.txt").write_text("\n".join(s for s, _ in pairs) + "\n")
    (tmp_path / "t.txt").write_text("\n".join(t for _, t in pairs) + "\n")
    overrides = TINY + ["task=nmt", f"train_src={tmp_path / 's.txt'}", f"train_trg={tmp_path / 't.txt'}",
                        "bpe_merges=20", "decode_max_len=10"]
    assert main(["train", "--out", str(tmp_path / "run"), *sets(overrides)]) == 0
    assert (tmp_path / "run" / "merges.txt").is_file()
    capsys.readouterr()
    assert main(["translate", "--checkpoint", str(tmp_path / "run"), "--input", str(tmp_path / "s.txt")]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 30
    assert main(["eval-bleu", "--checkpoint", str(tmp_path / "run"), "--src", str(tmp_path / "s.txt"),
                 "--ref", str(tmp_path / "t.txt")]) == 0
    assert 0 <= json.loads(capsys.readouterr().out)["bleu"] <= 1
    assert main(["eval-bleu", "--hyp", str(tmp_path / "t.txt"), "--ref", str(tmp_path / "t.txt")]) == 0
    assert json.loads(capsys.readouterr().out)["bleu"] == pytest.approx(1.0)


def test_bpe_train_and_vocab_build(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("lower lowest newer newest\nwidest wider\n")
    assert main(["bpe-train", "--corpus", str(tmp_path / "c.txt"), "--merges", "8",
                 "--output", str(tmp_path / "m.txt")]) == 0
    assert len((tmp_path / "m.txt").read_text().splitlines()) == 8
    assert main(["vocab-build", "--corpus", str(tmp_path / "c.txt"), "--bpe", str(tmp_path / "m.txt"),
                 "--output", str(tmp_path / "v.txt")]) == 0
    info = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert info["size"] == len((tmp_path / "v.txt").read_text().splitlines())


def _error(capsys):
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1
    return err


def test_missing_file_exit_code(tmp_path, capsys):
    assert main(["eval-ppl", "--checkpoint", str(tmp_path / "nope"), "--corpus", "x"]) == EXIT_IO
    assert _error(capsys).startswith(f"error {EXIT_IO} io:")


def test_unknown_config_key_exit_code(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "nonsense=1"]) == EXIT_CONFIG
    assert "nonsense" in _error(capsys)


def test_usage_error_exit_code(capsys):
    assert main(["fly"]) == EXIT_USAGE
    _error(capsys)


def test_rejected_input_exit_code(lm_run, capsys):
    assert main(["probe-neighbors", "--checkpoint", str(lm_run / "run"), "--word", "zzzz"]) == EXIT_INPUT
    assert _error(capsys).startswith(f"error {EXIT_INPUT} rejected-input:")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_abort_exit_code(lm_run, tmp_path, capsys):
    code = main(["train", "--config", str(lm_run / "cfg.txt"), "--out", str(tmp_path / "nan"),
                 *sets(TINY + ["learning_rate=1e300", "max_steps=40"])])
    assert code == EXIT_NAN
    assert "non-finite" in _error(capsys)


def test_console_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "atcl.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for sub in ("train", "eval-ppl", "eval-bleu", "translate", "probe-neighbors", "attack", "robustness",
                "bpe-train", "vocab-build"):
        assert sub in out.stdout
    assert "non-finite" in out.stdout
