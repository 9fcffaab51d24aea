import csv
import json

import pytest

from shatterlab.cli import main
from shatterlab.config import ABLATION_LABELS, ABLATION_LADDER

TINY = "model:\n  preset: {preset}\n  num_layers: 1\n  hidden: 16\n  ffn: 32\n  max_len: 16\ntrain:\n  batch_size: 4\n  eval_every: 2\n  eval_batches: 1\n"


@pytest.fixture
def tiny(tmp_path):
    def make(preset="shatter"):
        f = tmp_path / f"{preset}.yaml"
        f.write_text(TINY.format(preset=preset))
        return str(f)

    return make


def test_pretrain_zero_steps(tmp_path):
    out = tmp_path / "run"
    assert main(["pretrain", "--config", "shatter_toy", "--steps", "0", "--out", str(out), "--deterministic"]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["checkpoint.bin", "manifest.json", "metrics.csv", "tokens.bin"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["partition"]["parts"] == 4 and manifest["seed"] == 0


def test_manifest_rerun_identical(tmp_path, tiny):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["pretrain", "--config", tiny(), "--steps", "4", "--seed", "2", "--out", str(a), "--deterministic"]) == 0
    assert main(["pretrain", "--manifest", str(a / "manifest.json"), "--out", str(b), "--deterministic"]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert json.loads((b / "manifest.json").read_text())["seed"] == 2


def test_config_error_exit(tmp_path, capsys):
    f = tmp_path / "bad.yaml"
    f.write_text("model:\n  preset: shatter\n  hidden: 10\n")
    assert main(["pretrain", "--config", str(f), "--out", str(tmp_path / "x")]) == 2
    assert "parts" in capsys.readouterr().err


def test_data_error_exit(tmp_path):
    assert main(["pretrain", "--config", "shatter_toy", "--corpus", str(tmp_path / "none.txt"), "--out", str(tmp_path)]) == 3


def test_custom_corpus(tmp_path, tiny):
    corpus = tmp_path / "c.txt"
    corpus.write_text("\n".join("the cat sat on the mat number %d" % i for i in range(30)))
    out = tmp_path / "r"
    assert main(["pretrain", "--config", tiny(), "--corpus", str(corpus), "--steps", "2", "--out", str(out)]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert len(m["corpus"]["sha256"]) == 64


def test_ablate_header(tmp_path, tiny):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", tiny(), "--steps", "2", "--out", str(out), "--deterministic"]) == 0
    with open(out / "ablation.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["step"] + [ABLATION_LABELS[n] for n in ABLATION_LADDER]


def test_finetune_toy_records_strategy(tmp_path, tiny):
    out = tmp_path / "ft"
    args = ["finetune-toy", "--config", tiny(), "--steps", "2", "--strategy", "cls", "--out", str(out)]
    assert main(args + ["--train-size", "32", "--dev-size", "32"]) == 0
    report = json.loads((out / "manifest.json").read_text())
    assert report["strategy"] == "cls" and 0 <= report["dev_accuracy"] <= 1


def test_finetune_rejects_bad_strategy(tmp_path):
    assert main(["finetune-toy", "--strategy", "mean", "--out", str(tmp_path)]) == 2
    assert main(["finetune-toy", "--task", "copy_mlm", "--out", str(tmp_path)]) == 2


def test_finetune_from_checkpoint(tmp_path, tiny):
    run = tmp_path / "run"
    main(["pretrain", "--config", tiny(), "--steps", "2", "--out", str(run)])
    out = tmp_path / "ft"
    args = ["finetune-toy", "--checkpoint", str(run / "checkpoint.bin"), "--steps", "1", "--out", str(out)]
    assert main(args + ["--train-size", "16", "--dev-size", "16"]) == 0
    assert json.loads((out / "manifest.json").read_text())["init"]["checkpoint"].endswith("checkpoint.bin")


@pytest.mark.parametrize("name,human", [("bert", "84.9M"), ("shatter", "78.0M")])
def test_params(name, human, tmp_path, capsys):
    out = tmp_path / "p.json"
    assert main(["params", "--config", name, "--out", str(out)]) == 0
    assert human in capsys.readouterr().out
    assert json.loads(out.read_text())["human"] == human


def test_bench_report(tmp_path):
    out = tmp_path / "b.json"
    assert main(["bench", "--config", "shatter", "--length", "512", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["flops"]["delta_vs_reference"]["key_projection"] == -2 * 512 * 768**2


def test_partition_plot(tmp_path):
    out = tmp_path / "pp.csv"
    assert main(["partition-plot", "--parts", "4", "--layers", "2", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 2 * 4 * 129
    sums = {}
    for r in rows:
        key = (r["layer"], r["x"])
        sums[key] = sums.get(key, 0.0) + float(r["weight"])
    assert max(abs(v - 1) for v in sums.values()) < 1e-9


def test_extend(tmp_path, tiny, capsys):
    run = tmp_path / "run"
    main(["pretrain", "--config", tiny(), "--steps", "0", "--out", str(run)])
    out = tmp_path / "ext.bin"
    assert main(["extend", "--checkpoint", str(run / "checkpoint.bin"), "--length", "32", "--out", str(out)]) == 0
    assert "added 0 parameters" in capsys.readouterr().out
