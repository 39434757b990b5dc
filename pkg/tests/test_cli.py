import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import pytest

from procdiff.cli import main

TINY = """seed: 1
corpus:
  grammars: b1
  sequences_per_grammar: 24
model:
  layers: 1
  hidden: 32
pretrain:
  epochs: 2
  batch_size: 16
probe:
  epochs: 1
forecast:
  epochs: 1
  batch_size: 16
  contexts_per_sequence: 1
activity:
  epochs: 1
inference:
  samples: 4
"""


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY)
    assert run("gen-corpus", "--config", cfg, "--out", root / "corpus") == 0
    assert run("pretrain", "--config", cfg, "--corpus", root / "corpus", "--out", root / "pre") == 0
    return root, cfg


def _manifest(d):
    return json.loads((d / "manifest.json").read_text())


def test_gen_corpus_manifest_and_determinism(work, tmp_path):
    root, cfg = work
    files = _manifest(root / "corpus")["files"]
    assert sorted(files) == ["config.yaml", "corpus.jsonl", "phrase_table.json"]
    assert run("gen-corpus", "--config", cfg, "--out", tmp_path / "again") == 0
    assert _manifest(tmp_path / "again")["files"] == files


def test_malformed_config_exit_2_no_files(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\ncorpus:\n  colour: blue\n")
    assert run("gen-corpus", "--config", bad, "--out", tmp_path / "out") == 2
    assert "line 3" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_stale_corpus_exit_4(work, tmp_path):
    root, cfg = work
    stale = tmp_path / "corpus"
    stale.mkdir()
    for p in (root / "corpus").iterdir():
        (stale / p.name).write_bytes(p.read_bytes())
    with open(stale / "corpus.jsonl", "a") as fh:
        fh.write("\n")
    assert run("pretrain", "--config", cfg, "--corpus", stale, "--out", tmp_path / "p") == 4


def test_corrupted_checkpoint_exit_4(work, tmp_path, capsys):
    root, cfg = work
    data = bytearray((root / "pre" / "checkpoint.bin").read_bytes())
    data[-1] ^= 1
    (tmp_path / "c.bin").write_bytes(bytes(data))
    code = run("eval", "--config", cfg, "--corpus", root / "corpus",
               "--checkpoint", tmp_path / "c.bin", "--out", tmp_path / "e")
    assert code == 4 and "checksum" in capsys.readouterr().err


def test_resume_gives_identical_checkpoint(work, tmp_path):
    root, cfg = work
    assert run("pretrain", "--config", cfg, "--corpus", root / "corpus", "--out", tmp_path / "half",
               "--max-steps", 3) == 0
    assert run("pretrain", "--config", cfg, "--corpus", root / "corpus", "--out", tmp_path / "rest",
               "--checkpoint", tmp_path / "half" / "checkpoint.bin") == 0
    assert ((tmp_path / "rest" / "checkpoint.bin").read_bytes()
            == (root / "pre" / "checkpoint.bin").read_bytes())
    other = tmp_path / "other.yaml"
    other.write_text(TINY.replace("epochs: 2", "epochs: 3"))
    assert run("pretrain", "--config", other, "--corpus", root / "corpus", "--out", tmp_path / "x",
               "--checkpoint", tmp_path / "half" / "checkpoint.bin") == 4


def test_probe_and_eval_provenance(work, tmp_path, capsys):
    root, cfg = work
    pre_hash = _manifest(root / "pre")["files"]["checkpoint.bin"]
    assert run("probe", "--config", cfg, "--corpus", root / "corpus", "--checkpoint",
               root / "pre" / "checkpoint.bin", "--out", tmp_path / "probe") == 0
    assert _manifest(tmp_path / "probe")["inputs"]["checkpoint"] == pre_hash
    capsys.readouterr()
    assert run("eval", "--config", cfg, "--corpus", root / "corpus", "--task", "classify",
               "--checkpoint", tmp_path / "probe" / "checkpoint.bin", "--out", tmp_path / "ev") == 0
    printed = capsys.readouterr().out.strip().splitlines()[-1].split()
    report = json.loads((tmp_path / "ev" / "classify.json").read_text())
    assert float(printed[-1]) == pytest.approx(report["top1"], abs=5e-5)
    assert report["provenance"]["checkpoint_sha256"] == _manifest(tmp_path / "probe")["files"]["checkpoint.bin"]


def test_forecast_eval_determinism_and_oracle(work, tmp_path):
    root, cfg = work
    ck = root / "pre" / "checkpoint.bin"
    base = ("eval", "--config", cfg, "--corpus", root / "corpus", "--checkpoint", ck, "--task", "forecast")
    for d in ("a", "b"):
        assert run(*base, "--out", tmp_path / d) == 0
    assert ((tmp_path / "a" / "forecast_approximate.per_category.csv").read_bytes()
            == (tmp_path / "b" / "forecast_approximate.per_category.csv").read_bytes())
    ra, rb = (json.loads((tmp_path / d / "forecast_approximate.json").read_text()) for d in "ab")
    assert ra["canonical_hash"] == rb["canonical_hash"]
    assert run(*base, "--mode", "oracle", "--k", 1, "--out", tmp_path / "k1") == 0
    assert run(*base, "--mode", "oracle", "--k", 5, "--out", tmp_path / "k5") == 0
    k1, k5 = (json.loads((tmp_path / d / "forecast_oracle.json").read_text())["top1"] for d in ("k1", "k5"))
    assert k5 >= k1
    assert run("report", tmp_path / "a" / "forecast_approximate.json", tmp_path / "k1" / "forecast_oracle.json",
               tmp_path / "k5" / "forecast_oracle.json", "--out", tmp_path / "rep") == 0
    rows = (tmp_path / "rep" / "comparison.csv").read_text().strip().splitlines()
    assert len(rows) == 4
    ET.fromstring((tmp_path / "rep" / "comparison.svg").read_text())


def test_finetune_verbs(work, tmp_path):
    root, cfg = work
    ck = root / "pre" / "checkpoint.bin"
    for verb in ("finetune-forecast", "finetune-activity"):
        assert run(verb, "--config", cfg, "--corpus", root / "corpus", "--checkpoint", ck,
                   "--out", tmp_path / verb, "--max-steps", 2) == 0
    assert run("eval", "--config", cfg, "--corpus", root / "corpus", "--task", "activity",
               "--checkpoint", tmp_path / "finetune-activity" / "checkpoint.bin", "--out", tmp_path / "ev") == 0
    assert run("probe", "--config", cfg, "--corpus", root / "corpus", "--out", tmp_path / "np") == 2


def test_console_entry_point(tmp_path):
    done = subprocess.run([sys.executable, "-m", "procdiff.cli", "report", str(tmp_path / "missing.json"),
                           "--out", str(tmp_path / "r")], capture_output=True, text=True)
    assert done.returncode == 3
