import csv
import json

import numpy as np
import pytest

from ivtlr.checkpoint import save_checkpoint
from ivtlr.cli import METRICS_HEADER, ConfigError, main, parse_config
from ivtlr.model import init_params


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--task", "grid-sum", "--n", "40", "--seed", "7", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    from ivtlr.model import ModelConfig
    path = tmp_path_factory.mktemp("ck") / "stage0.ivtl"
    save_checkpoint(init_params(ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=16), 0), path, {"stage": 0})
    return path


def test_gen_data_manifest_and_determinism(data_dir, tmp_path):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    for split in ("train", "test"):
        lines = (data_dir / f"{split}.jsonl").read_text().splitlines()
        assert manifest["counts"][split] == len(lines)
    again = tmp_path / "again"
    assert main(["gen-data", "--n", "40", "--seed", "7", "--out", str(again)]) == 0
    assert json.loads((again / "manifest.json").read_text())["content_hash"] == manifest["content_hash"]


def test_gen_data_bad_n_writes_nothing(tmp_path):
    out = tmp_path / "none"
    assert main(["gen-data", "--n", "0", "--out", str(out)]) == 2
    assert not out.exists()


def test_usage_errors_exit_1(tmp_path):
    assert main([]) == 1
    assert main(["gen-data", "--n", "x", "--out", str(tmp_path)]) == 1
    assert main(["frobnicate"]) == 1


def test_config_unknown_key_and_malformed():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config('{"train": {"learning_rate": 1e-4, "bogus": 1}}')
    with pytest.raises(ConfigError, match="unknown"):
        parse_config('{"extra": 1}')
    with pytest.raises(ConfigError, match="line 2 column"):
        parse_config('{"seed": 1,\n  "train": }')


def test_config_defaults_and_overrides():
    cfg = parse_config('{"seed": 5, "latent": {"k": 2}, "train": {"epochs_per_stage": 1}}')
    assert cfg.train.seed == 5 and cfg.train.k == 2 and cfg.train.learning_rate == 4e-5
    assert cfg.train.n_stages == 4 and cfg.train.batch_size == 4 and cfg.train.beta1 == 0.9
    with pytest.raises(ConfigError):
        parse_config('{"latent": {"k": 2}, "train": {"k": 3}}')


def test_train_bad_config_exit_2(tmp_path, data_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"train": {"n_stages": 2,}}')
    assert main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path / "o")]) == 2


def test_train_writes_checkpoints_and_is_deterministic(tmp_path, data_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "model": {"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 16},
        "train": {"n_stages": 4, "epochs_per_stage": 1, "batch_size": 8},
        "latent": {"k": 2}, "seed": 3}))
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(out)]) == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].glob("*.ivtl"))
    assert names == ["stage0.ivtl", "stage1.ivtl", "stage2.ivtl", "stage3.ivtl"]
    for n in names:
        assert (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()
    final = json.loads((outs[0] / "final_config.json").read_text())
    assert final["train"]["learning_rate"] == 4e-5 and final["latent"]["k"] == 2
    log = [json.loads(l) for l in (outs[0] / "train_log.jsonl").read_text().splitlines()]
    assert [r["stage"] for r in log] == [0, 1, 2, 3]


def test_train_divergence_exit_3(tmp_path, data_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 16},
                               "train": {"n_stages": 1, "epochs_per_stage": 1, "learning_rate": 1e30}}))
    code = main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path / "o")])
    assert code == 3


def test_eval_row_and_dump(tmp_path, data_dir, ckpt):
    report, dump = tmp_path / "m.csv", tmp_path / "per.jsonl"
    args = ["eval", "--ckpt", str(ckpt), "--data", str(data_dir / "test.jsonl"), "--n-latent", "0",
            "--report", str(report), "--max-answer-len", "5", "--dump-per-sample", str(dump)]
    assert main(args) == 0
    lines = report.read_text().splitlines()
    assert lines[0] == ",".join(METRICS_HEADER)
    row = read_csv(report)[0]
    assert len(read_csv(report)) == 1
    assert row["stage"] == "0" and row["n_latent"] == "0" and row["split"] == "test"
    assert 0.0 <= float(row["accuracy"]) <= 1.0 and len(row["accuracy"].split(".")[1]) == 6
    per = [json.loads(l) for l in dump.read_text().splitlines()]
    assert int(row["n_samples"]) == len(per)
    assert row["ar_steps_mean"] == f"{np.mean([p['ar_steps'] for p in per]):.6f}"


def test_eval_bad_checkpoint_exit_2(tmp_path, data_dir):
    bad = tmp_path / "bad.ivtl"
    bad.write_bytes(b"IVTL\x09\x00")
    assert main(["eval", "--ckpt", str(bad), "--data", str(data_dir), "--n-latent", "0",
                 "--report", str(tmp_path / "r.csv")]) == 2


def test_analyze_attention_rows_and_bounds(tmp_path, data_dir, ckpt):
    report = tmp_path / "att.csv"
    assert main(["analyze", "--mode", "attention", "--ckpt", str(ckpt), "--data", str(data_dir / "test.jsonl"),
                 "--n-latent", "3", "--report", str(report), "--max-answer-len", "2"]) == 0
    rows = read_csv(report)
    from ivtlr.tasks import load_jsonl
    samples = load_jsonl(data_dir / "test.jsonl")
    assert len(rows) == sum(min(3, s.n_steps) for s in samples)
    for r in rows:
        assert 0.0 < float(r["F"]) <= 1e6


def test_analyze_sweep_stage(tmp_path, data_dir):
    from ivtlr.model import ModelConfig
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=16)
    for n in (1, 2, 3):
        save_checkpoint(init_params(cfg, n), tmp_path / f"stage{n}.ivtl", {"stage": n})
    report = tmp_path / "sweep.csv"
    assert main(["analyze", "--mode", "sweep-stage", "--ckpt-dir", str(tmp_path), "--data",
                 str(data_dir / "test.jsonl"), "--report", str(report), "--max-answer-len", "4"]) == 0
    assert [r["stage"] for r in read_csv(report)] == ["1", "2", "3"]


def test_analyze_unknown_mode_exit_2(tmp_path):
    assert main(["analyze", "--mode", "nope", "--report", str(tmp_path / "x.csv")]) == 2
