import csv
import hashlib
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from dubflow.cli import build_parser, main
from dubflow.denoiser import TabularDenoiser
from dubflow.tokens import GenerativeTarget
from dubflow.toyworld import ToyConfig


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def corpus_file(tmp_path):
    assert main(["gen", "--count", "12", "--seed", "3", "--out", str(tmp_path / "gen")]) == 0
    return tmp_path / "gen" / "corpus.toyc.jsonl"


def test_gen_default(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "corpus.toyc.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    assert len(lines) == 1 + 64 and header["count"] == 64 and header["schema_version"] == 1
    assert "64 samples" in capsys.readouterr().out


def test_gen_uses_config_and_flags_override(tmp_path):
    cfg = tmp_path / "toy.json"
    cfg.write_text(json.dumps({"schema_version": 1, "speakers": 2, "count": 5, "seed": 9}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    header = json.loads((tmp_path / "a" / "corpus.toyc.jsonl").read_text().splitlines()[0])
    assert header["count"] == 5 and header["config"]["speakers"] == 2 and header["config"]["seed"] == 9
    assert main(["gen", "--config", str(cfg), "--count", "7", "--seed", "1", "--out", str(tmp_path / "b")]) == 0
    header = json.loads((tmp_path / "b" / "corpus.toyc.jsonl").read_text().splitlines()[0])
    assert header["count"] == 7 and header["config"]["seed"] == 1


def test_gen_invalid_config_names_invariant(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"schema_version": 1, "layout": {"m": 1, "n": 2, "k": 3, "v": 4}}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path)]) == 3
    assert "v >= max(P, E, S) + 2" in capsys.readouterr().err


def test_gen_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen", "--out", str(blocker / "sub")]) == 2


@pytest.mark.parametrize("argv", [["gen", "--seed", "-1"], ["gen", "--seed", str(2**64)], ["gen", "--bogus"], ["frobnicate"]])
def test_invalid_arguments_exit_3(argv, tmp_path):
    assert main(argv + (["--out", str(tmp_path)] if argv[0] == "gen" else [])) == 3


def test_config_schema_version_checked(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"schema_version": 7}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path)]) == 3


def test_train_outputs(corpus_file, tmp_path):
    out = tmp_path / "train"
    assert main(["train", "--corpus", str(corpus_file), "--steps", "40", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "trace.csv").open()))
    assert len(rows) == 40 and list(rows[0]) == ["step", "loss"]
    assert all(math.isfinite(float(r["loss"])) for r in rows)
    TabularDenoiser.load(out / "denoiser.json")


def test_train_zero_steps_is_initialization(corpus_file, tmp_path):
    out = tmp_path / "t0"
    assert main(["train", "--corpus", str(corpus_file), "--steps", "0", "--out", str(out)]) == 0
    d = TabularDenoiser.load(out / "denoiser.json")
    assert d.same_parameters(TabularDenoiser(ToyConfig().layout))
    assert (out / "trace.csv").read_text().splitlines() == ["step,loss"]


def test_train_default_run_reduces_loss(corpus_file, tmp_path):
    out = tmp_path / "t"
    assert main(["train", "--corpus", str(corpus_file), "--out", str(out)]) == 0
    losses = [float(r["loss"]) for r in csv.DictReader((out / "trace.csv").open())]
    assert len(losses) == 2000
    assert np.mean(losses[-100:]) < np.mean(losses[:100])


def test_train_corpus_parse_error(tmp_path):
    bad = tmp_path / "bad.toyc.jsonl"
    bad.write_text("{not json\n")
    assert main(["train", "--corpus", str(bad), "--out", str(tmp_path)]) == 4


def test_train_missing_corpus(tmp_path):
    assert main(["train", "--corpus", str(tmp_path / "missing.toyc.jsonl"), "--out", str(tmp_path)]) == 2


def test_sample_oracle(corpus_file, tmp_path):
    out = tmp_path / "s"
    assert main(["sample", "--corpus", str(corpus_file), "--oracle", "--nfe", "1", "--count", "10", "--out", str(out)]) == 0
    lines = (out / "samples.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    assert header["count"] == 10 and header["nfe"] == 1 and len(lines) == 11
    for line in lines[1:]:
        target = GenerativeTarget.from_json(json.loads(line)["target"])
        assert (target.tokens < target.layout.v).all()


def test_sample_with_trained_denoiser(corpus_file, tmp_path):
    assert main(["train", "--corpus", str(corpus_file), "--steps", "20", "--out", str(tmp_path / "t")]) == 0
    out = tmp_path / "s"
    argv = ["sample", "--corpus", str(corpus_file), "--denoiser", str(tmp_path / "t" / "denoiser.json"), "--nfe", "4", "--count", "3", "--out", str(out)]
    assert main(argv) == 0
    assert json.loads((out / "samples.jsonl").read_text().splitlines()[0])["denoiser"] == "denoiser.json"


def test_sample_bad_nfe(corpus_file, tmp_path):
    assert main(["sample", "--corpus", str(corpus_file), "--oracle", "--nfe", "0", "--out", str(tmp_path)]) == 3


def test_sample_needs_a_denoiser(corpus_file, tmp_path):
    assert main(["sample", "--corpus", str(corpus_file), "--out", str(tmp_path)]) == 3


def test_sample_bad_denoiser_file(corpus_file, tmp_path):
    bad = tmp_path / "d.json"
    bad.write_text("[]")
    assert main(["sample", "--corpus", str(corpus_file), "--denoiser", str(bad), "--out", str(tmp_path)]) == 4


def _align_files(tmp_path, scores, durations):
    s = tmp_path / "scores.csv"
    s.write_text("\n".join(",".join(str(x) for x in row) for row in scores) + "\n")
    d = tmp_path / "durations.json"
    d.write_text(json.dumps(durations))
    return ["--scores", str(s), "--durations", str(d)]


def test_eval_align_uniform_fixture(tmp_path, capsys):
    args = _align_files(tmp_path, np.zeros((4, 2)), {"counts": [2, 2]})
    assert main(["eval-align", *args]) == 0
    report = json.loads(capsys.readouterr().out)
    assert abs(report["loss"] - 6 * math.log(2)) < 1e-9
    assert report["loss_name"] == "l_vt" and report["mas_durations"] == [1, 3]


def test_eval_align_saturated_beats(tmp_path, capsys):
    M = np.repeat(np.eye(2), 16, axis=0)
    args = _align_files(tmp_path, 50 * M, {"beats": [1, 1]})
    assert main(["eval-align", "--unit", "tokens", "--out", str(tmp_path / "o"), *args]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["loss"] < 1e-6 and report["loss_name"] == "l_st" and report["mas_durations"] == [16, 16]
    assert json.loads((tmp_path / "o" / "eval_align.json").read_text()) == report


def test_eval_align_indivisible_tokens(tmp_path):
    args = _align_files(tmp_path, np.zeros((4, 2)), {"counts": [2, 2]})
    assert main(["eval-align", "--unit", "tokens", *args]) == 3


def test_eval_align_shape_mismatch(tmp_path):
    args = _align_files(tmp_path, np.zeros((5, 2)), {"counts": [2, 2]})
    assert main(["eval-align", *args]) == 3


def test_eval_align_parse_error(tmp_path):
    s = tmp_path / "scores.csv"
    s.write_text("a,b\n")
    d = tmp_path / "d.json"
    d.write_text('{"counts": [1]}')
    assert main(["eval-align", "--scores", str(s), "--durations", str(d)]) == 4


def test_sweep_default_rows(tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", "--oracle", "--count", "20", "--contexts", "1", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert [int(r["nfe"]) for r in rows] == [1, 2, 4, 8, 16, 32, 64, 128]
    assert json.loads((out / "sweep.json").read_text())["kind"] == "nfe_sweep"


def test_sweep_highlighted_settings(tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", "--oracle", "--nfe-list", "8,10", "--count", "20", "--out", str(out)]) == 0
    assert [int(r["nfe"]) for r in csv.DictReader((out / "sweep.csv").open())] == [8, 10]


@pytest.mark.parametrize("nfe_list", ["", "0,1", "4,2", "a,b"])
def test_sweep_bad_nfe_list(nfe_list, tmp_path):
    assert main(["sweep", "--oracle", "--nfe-list", nfe_list, "--out", str(tmp_path)]) == 3


def test_two_stage_cli(tmp_path, capsys):
    cfg = tmp_path / "ts.json"
    cfg.write_text(json.dumps({"schema_version": 1, "corpus_size": 16, "eval_repeats": 1, "toy": {"speakers": 2}}))
    out = tmp_path / "ts"
    assert main(["two-stage", "--config", str(cfg), "--steps", "20", "--out", str(out)]) == 0
    report = json.loads((out / "two_stage.json").read_text())
    assert report["config"]["pretrain_steps"] == 20 and report["config"]["toy"]["speakers"] == 2
    assert "pretrain_adapt" in capsys.readouterr().out


def test_two_stage_invalid_steps(tmp_path):
    assert main(["two-stage", "--pretrain-steps", "0", "--out", str(tmp_path)]) == 3


def test_help_lists_flags_with_defaults(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            if action.option_strings and action.dest != "help":
                assert action.option_strings[-1] in text, (name, action.dest)
                if action.default is not None:
                    assert "default" in (action.help or "") or "(default:" in text
    with pytest.raises(SystemExit) as info:
        main(["sample", "--help"])
    assert info.value.code == 0 and "--nfe N" in capsys.readouterr().out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "dubflow", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("dubflow ")
