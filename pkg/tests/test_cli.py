import hashlib
import json

import numpy as np
import pytest

from rinq.cli import main
from rinq.evaluation import QuantitativeMap


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["schedule", "--n-reps", "60", "--seed", "1", "--out", str(d / "sched.json")]) == 0
    for i in range(2):
        assert main(["phantom", "--size", "12", "12", "--regions", "5", "--seed", str(i), "--out", str(d / f"ph{i}")]) == 0
        assert main(["simulate", "--phantom", str(d / f"ph{i}"), "--schedule", str(d / "sched.json"),
                     "--out", str(d / f"clean{i}.mrfs")]) == 0
        assert main(["corrupt", "--stack", str(d / f"clean{i}.mrfs"), "--seed", str(i),
                     "--out", str(d / f"noisy{i}.mrfs")]) == 0
    return d


def train_args(d, out, seed=0, epochs=2):
    return ["train", "--preset", "rnn1-complex", "--n-reps", "60", "--size", "desk",
            "--train", str(d / "noisy0.mrfs"), str(d / "ph0"), "--val", str(d / "noisy1.mrfs"), str(d / "ph1"),
            "--epochs", str(epochs), "--seed", str(seed), "--batch-size", "16", "--out", str(out)]


def test_train_infer_evaluate(work, tmp_path):
    assert main(train_args(work, tmp_path / "run")) == 0
    assert (tmp_path / "run" / "history.csv").read_text().count("\n") == 4  # header + epochs 0..2
    assert main(["infer", "--checkpoint", str(tmp_path / "run" / "checkpoint.rnqc"), "--stack", str(work / "noisy1.mrfs"),
                 "--out", str(tmp_path / "p.mrfm"), "--render", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "p_t1.pgm").exists()
    assert main(["evaluate", "--pred", str(tmp_path / "p.mrfm"), "--gt", str(work / "ph1"),
                 "--out", str(tmp_path / "m.json")]) == 0
    metrics = json.loads((tmp_path / "m.json").read_text())
    assert set(metrics) == {"t1", "t2", "run"}


def test_training_is_byte_deterministic(work, tmp_path):
    for name in ("a", "b"):
        assert main(train_args(work, tmp_path / name, seed=5)) == 0
    assert sha(tmp_path / "a" / "checkpoint.rnqc") == sha(tmp_path / "b" / "checkpoint.rnqc")
    assert main(train_args(work, tmp_path / "c", seed=6)) == 0
    assert sha(tmp_path / "a" / "checkpoint.rnqc") != sha(tmp_path / "c" / "checkpoint.rnqc")


def test_zero_epochs(work, tmp_path):
    assert main(train_args(work, tmp_path / "z", epochs=0)) == 0
    assert (tmp_path / "z" / "history.csv").read_text().count("\n") == 2


def test_match_against_dictionary(work, tmp_path):
    grid = {"t1_segments": [[100, 100, 2000]], "t2_segments": [[10, 10, 300]]}
    (tmp_path / "grid.json").write_text(json.dumps(grid))
    assert main(["--workers", "2", "dict-gen", "--grid", str(tmp_path / "grid.json"), "--schedule",
                 str(work / "sched.json"), "--rank", "10", "--out", str(tmp_path / "d.mrfd")]) == 0
    for flag in ([], ["--compressed"]):
        assert main(["match", "--dictionary", str(tmp_path / "d.mrfd"), "--stack", str(work / "clean0.mrfs"),
                     "--out", str(tmp_path / "m.mrfm"), *flag]) == 0
        m = QuantitativeMap.load(tmp_path / "m.mrfm")
        assert m.valid.any()


def test_identity_corruption_preserves_bytes(work, tmp_path):
    out = tmp_path / "same.mrfs"
    assert main(["corrupt", "--stack", str(work / "clean0.mrfs"), "--noise-sigma", "0", "--interference-k", "0",
                 "--interference-scale", "0", "--out", str(out)]) == 0
    assert sha(out) == sha(work / "clean0.mrfs")


def test_split(tmp_path):
    assert main(["split", "a", "b", "c", "d", "--ratios", "2", "1", "1", "--out", str(tmp_path / "s.json")]) == 0
    doc = json.loads((tmp_path / "s.json").read_text())
    assert len(doc["train"]) == 2 and len(doc["test"]) == 1


def test_describe(capsys):
    assert main(["describe", "--preset", "rnn3-complex"]) == 0
    out = capsys.readouterr().out
    assert "(30, 1800)" in out and "7.7 M" in out


def test_usage_errors_exit_2(work, tmp_path, capsys):
    assert main(["simulate", "--phantom", str(work / "ph0"), "--schedule", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "x.mrfs")]) == 2
    assert main(["describe", "--preset", "rnn1-complex", "--n-reps", "1000"]) == 2
    with pytest.raises(SystemExit) as e:
        main(["train", "--preset", "rnn1-complex", "--out", str(tmp_path)])  # --seed is required
    assert e.value.code == 2


def test_numeric_failure_exit_3(work, tmp_path):
    bad = QuantitativeMap(np.full((12, 12), np.nan), np.full((12, 12), 50.0), np.ones((12, 12), bool))
    bad.save(tmp_path / "bad.mrfm")
    args = train_args(work, tmp_path / "n")
    args[args.index(str(work / "ph0"))] = str(tmp_path / "bad.mrfm")
    assert main(args) == 3


def test_small_experiment(tmp_path):
    manifest = {
        "schedule": {"n_reps": 60},
        "phantoms": {"count": 3, "height": 10, "width": 10, "n_regions": 4},
        "training": {"epochs": 1, "overrides": {"rnn3-complex": {"batch_size": 8}}},
    }
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    for name in ("a", "b"):
        assert main(["experiment", "exp3-quantile", "--manifest", str(tmp_path / "m.json"), "--seed", "1",
                     "--out", str(tmp_path / name)]) == 0
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert [r["model"] for r in report["rows"]] == ["rnn1-complex", "rnn3-complex"]
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert (tmp_path / "a" / "report.md").exists()
