import json
import subprocess
import sys

import pytest

from ntknas.cli import main, replay
from ntknas.io import RunRecord, read_json

SEARCH_CFG = {"T": 5, "b": 32, "nu_samples": 4, "seed": 2}


def run(*args, env=None):
    return subprocess.run([sys.executable, "-m", "ntknas.cli", *args], capture_output=True, text=True, env=env)


def tiny_space(d):
    p = d / "tiny.json"
    p.write_text(json.dumps({"nodes": 4, "catalog": ["zero", "conv1x1-relu"], "input": [8, 8, 3], "output": 4, "width": 4}))
    return p


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--kind", "image_patches", "--m", "96", "--seed", "0", "--param", "color_shift=0.1", "--out", str(d / "data")]) == 0
    (d / "cfg.json").write_text(json.dumps(SEARCH_CFG))
    return d


def test_enumerate_count(capsys):
    assert main(["enumerate", "--count-only"]) == 0
    assert capsys.readouterr().out.strip() == "96"


def test_enumerate_lists_architectures(capsys):
    main(["enumerate"])
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 97 and lines[1].startswith("0\t")


def test_verify_chain_exits_zero():
    r = run("verify", "--suite", "chain")
    assert r.returncode == 0, r.stderr
    assert "PASS" in r.stdout


def test_usage_errors_exit_two(tmp_path):
    assert run("enumerate", "--bogus").returncode == 2
    assert run("--threads", "0", "enumerate").returncode == 2
    r = run("score", "--arch", "o0i0-o0i0", "--data", str(tmp_path / "missing"))
    assert r.returncode == 2 and "error" in r.stderr


def test_bad_arch_exits_two(workdir):
    assert main(["score", "--arch", "o9i0-o0i0", "--data", str(workdir / "data")]) == 2


def test_score_prints_json(workdir, capsys):
    assert main(["score", "--arch", "o2i0-o3i1", "--data", str(workdir / "data"), "--method", "exact"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["trace"] > 0 and rec["arch"] == "o2i0-o3i1"


def test_search_is_byte_reproducible(workdir):
    outs = []
    for k in range(2):
        out = workdir / f"s{k}"
        assert main(["search", "--data", str(workdir / "data"), "--config", str(workdir / "cfg.json"), "--out", str(out)]) == 0
        outs.append((out / "selected.json").read_bytes())
    assert outs[0] == outs[1]
    sel = read_json(workdir / "s0" / "selected.json")
    assert set(sel) == {"arch", "describe", "space"}


def test_replay_reproduces_selection(workdir):
    out = workdir / "r"
    main(["search", "--data", str(workdir / "data"), "--config", str(workdir / "cfg.json"), "--out", str(out)])
    rec = RunRecord.load(out / "run.jsonl")
    again = replay(rec)
    assert again.selection["arch"] == rec.selection["arch"]
    assert again.steps == rec.steps


def test_seed_env_override(workdir, monkeypatch):
    monkeypatch.setenv("NTKNAS_SEED", "5")
    out = workdir / "env"
    main(["search", "--data", str(workdir / "data"), "--config", str(workdir / "cfg.json"), "--out", str(out)])
    assert RunRecord.load(out / "run.jsonl").seed == 5


def test_rank_and_correlate(workdir, capsys):
    cache = workdir / "scores.jsonl"
    assert main(["rank", "--data", str(workdir / "data"), "--cap", "20", "--out", str(workdir / "x.jsonl")]) == 2
    assert main(["rank", "--space", str(tiny_space(workdir)), "--data", str(workdir / "data"), "--scorers", "exact", "approx", "params", "--batch-size", "16", "--out", str(cache)]) == 0
    capsys.readouterr()
    assert main(["correlate", "--a", f"{cache}:trace_exact", "--b", f"{cache}:trace_approx"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["n"] == 24 and rep["pearson"] > 0.5
    assert main(["correlate", "--a", f"{cache}:trace_exact", "--b", f"{cache}:nope"]) == 2


def test_train_all_with_verify(workdir, capsys):
    args = ["train-all", "--data", str(workdir / "data"), "--epochs", "1", "--lr", "1", "--train-size", "64"]
    space = tiny_space(workdir)
    out = workdir / "gt.jsonl"
    assert main([*args, "--space", str(space), "--out", str(out)]) == 0
    assert main([*args, "--space", str(space), "--out", str(out), "--verify", "2"]) == 0
    assert "verified 2" in capsys.readouterr().out
