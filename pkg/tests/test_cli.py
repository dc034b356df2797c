import csv
import io
import json
import subprocess
import sys

import pytest

from butlerlab.bench import bundled_corpus_text
from butlerlab.cli import main
from butlerlab.host import split_corpus

TINY_CONFIG = """\
# small enough to train in seconds
seed = 3
host.n_layers = 2
host.n_heads = 2
host.embed_dim = 16
host.head_dim = 8
host.max_len = 256
host.steps = 20
host.batch_size = 2
host.seq_len = 64
butler.reduced_dim = 4
butler.inter_dim = 4
butler.hidden = 6
train.steps = 5
train.batch_size = 2
train.seq_len = 64
train.block_size = 16
"""


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY_CONFIG)
    (d / "heldout.txt").write_text(split_corpus(bundled_corpus_text())["heldout"])
    return d


@pytest.fixture(scope="module")
def checkpoints(workdir):
    cfg = workdir / "tiny.cfg"
    assert main(["train-host", "--config", str(cfg), "--out", str(workdir / "host.btlr")]) == 0
    assert main(["train-butler", "--config", str(cfg), "--host", str(workdir / "host.btlr"), "--out", str(workdir / "butler.btlr")]) == 0
    return workdir / "host.btlr", workdir / "butler.btlr"


def test_training_writes_manifests(checkpoints):
    host, butler = checkpoints
    for path in (host, butler):
        man = json.loads(path.with_name(path.name + ".manifest.json").read_text())
        assert man["outputs"] == [str(path)]
        assert man["config"]["seed"] == 3
        assert set(man) == {"command", "config", "seeds", "inputs", "outputs", "version"}
        assert all(len(v) == 64 for v in man["inputs"].values())


def test_training_is_byte_identical(checkpoints, workdir):
    host, butler = checkpoints
    cfg = workdir / "tiny.cfg"
    assert main(["train-host", "--config", str(cfg), "--out", str(workdir / "host2.btlr")]) == 0
    assert main(["train-butler", "--config", str(cfg), "--host", str(host), "--out", str(workdir / "butler2.btlr")]) == 0
    assert (workdir / "host2.btlr").read_bytes() == host.read_bytes()
    assert (workdir / "butler2.btlr").read_bytes() == butler.read_bytes()


def test_simulate_full_budget(checkpoints, workdir, capsys):
    host, _ = checkpoints
    out = workdir / "sim0.jsonl"
    argv = ["simulate", "--host", host, "--policy", "h2o", "--sparsity", 0.0, "--input", workdir / "heldout.txt"]
    code, stdout, _ = run(argv + ["--sequences", 2, "--length", 64, "--out", out], capsys)
    assert code == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(recs) == 2
    assert all(r["ppl_masked"] == r["ppl_dense"] for r in recs)
    assert list(recs[0]) == ["policy", "sparsity", "net_sparsity", "ppl_masked", "ppl_dense", "seed", "length"]


def test_simulate_butler_and_rerun(checkpoints, workdir, capsys):
    host, butler = checkpoints
    argv = ["simulate", "--host", host, "--butler", butler, "--policy", "butler", "--sparsity", 0.5]
    argv += ["--input", workdir / "heldout.txt", "--sequences", 2, "--length", 64]
    assert run(argv + ["--out", workdir / "simb1.jsonl"], capsys)[0] == 0
    assert run(argv + ["--out", workdir / "simb2.jsonl"], capsys)[0] == 0
    assert (workdir / "simb1.jsonl").read_bytes() == (workdir / "simb2.jsonl").read_bytes()


def test_bench_rows_and_determinism(checkpoints, workdir, capsys, monkeypatch):
    host, _ = checkpoints
    argv = ["bench", "--host", host, "--policy", "oracle", "--sparsity", 0.5, "--samples", 4, "--seed", 7]
    assert run(argv + ["--out", workdir / "b1.csv"], capsys)[0] == 0
    monkeypatch.setenv("BUTLER_THREADS", "3")
    assert run(argv + ["--out", workdir / "b2.csv"], capsys)[0] == 0
    text = (workdir / "b1.csv").read_text()
    assert text == (workdir / "b2.csv").read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == 5
    assert [r["sample_seed"] for r in rows] == ["7", "8", "9", "10", "summary"]
    assert list(rows[0]) == ["sample_seed", "policy", "sparsity", "accuracy", "coverage"]
    for r in rows[:-1]:
        assert r["accuracy"] == "0" or float(r["coverage"]) == 1.0


def test_report_aggregates(checkpoints, workdir, capsys):
    host, _ = checkpoints
    rep = workdir / "rep"
    rep.mkdir(exist_ok=True)
    for policy in ("oracle", "streaming"):
        argv = ["bench", "--host", host, "--policy", policy, "--sparsity", 0.5, "--samples", 2, "--out", rep / f"{policy}.csv"]
        assert run(argv, capsys)[0] == 0
    code, stdout, _ = run(["report", "--glob", str(rep / "*.csv"), "--out", workdir / "summary.csv"], capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO((workdir / "summary.csv").read_text())))
    assert [r["policy"] for r in rows] == ["oracle", "streaming"]
    assert all(r["count"] == "2" for r in rows)
    assert "Accuracy" in stdout and "Coverage" in stdout
    first = (workdir / "summary.csv").read_bytes()
    assert run(["report", "--glob", str(rep / "*.csv"), "--out", workdir / "summary.csv"], capsys)[0] == 0
    assert (workdir / "summary.csv").read_bytes() == first


def test_eval_classify_and_consensus(checkpoints, workdir, capsys):
    host, butler = checkpoints
    argv = ["eval-classify", "--host", host, "--butler", butler, "--split", workdir / "heldout.txt", "--windows", 2, "--length", 64]
    code, stdout, _ = run(argv, capsys)
    assert code == 0
    assert 0.0 <= json.loads(stdout)["topk_accuracy"] <= 1.0
    argv = ["consensus", "--host", host, "--input", workdir / "heldout.txt", "--sequences", 3, "--length", 64]
    code, stdout, _ = run(argv + ["--out", workdir / "cons.json", "--grid", workdir / "grid.csv"], capsys)
    assert code == 0
    res = json.loads(stdout)
    assert res["heads"] == 4 and -1 <= res["mean"] <= 1
    assert len((workdir / "grid.csv").read_text().splitlines()) == 4


def _error(stderr):
    lines = stderr.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def test_unknown_policy_error(checkpoints, capsys):
    host, _ = checkpoints
    code, _, err = run(["bench", "--host", host, "--policy", "lru", "--sparsity", 0.5, "--samples", 1], capsys)
    assert code != 0
    assert _error(err)["error"] == "PolicyError"


def test_butler_without_predictor_error(checkpoints, workdir, capsys):
    host, _ = checkpoints
    argv = ["simulate", "--host", host, "--policy", "butler", "--sparsity", 0.5, "--input", workdir / "heldout.txt"]
    code, _, err = run(argv, capsys)
    assert code != 0
    assert "butler" in _error(err)["message"]


def test_truncated_checkpoint_error(checkpoints, workdir, capsys):
    host, butler = checkpoints
    bad = workdir / "bad.btlr"
    bad.write_bytes(host.read_bytes()[:-5])
    argv = ["simulate", "--host", bad, "--policy", "oracle", "--sparsity", 0.5, "--input", workdir / "heldout.txt"]
    code, _, err = run(argv, capsys)
    assert code != 0
    assert _error(err)["error"] == "CheckpointFormatError"


def test_bad_config_key(workdir, capsys):
    cfg = workdir / "bad.cfg"
    cfg.write_text("host.layers = 3\n")
    code, _, err = run(["train-host", "--config", cfg, "--out", workdir / "x.btlr"], capsys)
    assert code != 0
    assert _error(err)["error"] == "ConfigError"


def test_console_script_exit_code(workdir):
    proc = subprocess.run(
        [sys.executable, "-m", "butlerlab.cli", "report", "--glob", str(workdir / "nothing*.csv"), "--out", str(workdir / "r.csv")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 2
    assert json.loads(proc.stderr.strip())["error"] == "CliError"
