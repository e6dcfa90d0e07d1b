import json

import pytest

from idle_adapter.cli import main

SMALL = ["--id-dim", "8", "--llm-dim", "8", "--llm-layers", "2", "--seed", "4"]


def run(argv, capsys):
    code = main(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def json_lines(text):
    return [json.loads(line) for line in text.splitlines() if line.startswith("{")]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--out", str(root / "data"), "--users", "30", "--items", "15",
                 "--cycle-len", "5", "--seed", "2"]) == 0
    assert main(["pretrain", "--data", str(root / "data" / "dataset.jsonl"), "--out", str(root / "pre"),
                 "--steps", "20"] + SMALL) == 0
    return root


def train_args(ws, out, *extra):
    return ["train", "--data", str(ws / "data" / "dataset.jsonl"), "--id-checkpoint",
            str(ws / "pre" / "id_model.ckpt"), "--epochs", "1", "--out", str(ws / out)] + SMALL + list(extra)


def test_generate_is_idempotent_and_guards_overwrite(tmp_path, capsys):
    args = ["generate", "--out", str(tmp_path / "d"), "--users", "12", "--items", "10", "--cycle-len", "5"]
    assert run(args, capsys)[0] == 0
    first = (tmp_path / "d" / "dataset.jsonl").read_bytes()
    code, out, err = run(args, capsys)
    assert code == 1 and out == ""
    assert len(err.strip().splitlines()) == 1 and "--force" in json.loads(err)["error"]
    assert run(args + ["--force"], capsys)[0] == 0
    assert (tmp_path / "d" / "dataset.jsonl").read_bytes() == first
    assert (tmp_path / "d" / "vocab.txt").read_text().strip()


def test_pretrain_outputs(workspace):
    pre = workspace / "pre"
    assert (pre / "id_model.ckpt").is_file()
    assert len((pre / "pretrain_log.jsonl").read_text().splitlines()) == 20
    assert json.loads((pre / "config.json").read_text())["seed"] == 4


def test_missing_checkpoint_names_path(workspace, capsys):
    args = train_args(workspace, "bad")
    args[args.index("--id-checkpoint") + 1] = str(workspace / "nope.ckpt")
    code, _, err = run(args, capsys)
    assert code == 1 and "nope.ckpt" in json.loads(err)["error"]


def test_ablation_distribution_equals_lambda_zero(workspace, capsys):
    code, out_a, err = run(train_args(workspace, "abl", "--ablation", "distribution"), capsys)
    assert code == 0, err
    code, out_b, err = run(train_args(workspace, "lam0", "--lambda", "0"), capsys)
    assert code == 0, err
    a, b = json_lines(out_a)[0], json_lines(out_b)[0]
    assert a["lambda"] == b["lambda"] == 0.0
    assert {k: a[k] for k in ("HR@5", "N@5", "HR@10", "N@10")} == {k: b[k] for k in ("HR@5", "N@5", "HR@10", "N@10")}
    log = (workspace / "abl" / "train_log.jsonl").read_text().splitlines()
    assert log and all("L_m" not in json.loads(x) for x in log)
    echo = json.loads((workspace / "abl" / "config.json").read_text())
    assert echo["ablation"] == "distribution" and echo["seed"] == 4
    assert "HR@5" in out_a.splitlines()[-3]


def test_eval_and_dump(workspace, capsys, tmp_path):
    code, _, err = run(train_args(workspace, "run"), capsys)
    assert code == 0, err
    data = str(workspace / "data" / "dataset.jsonl")
    ckpt = str(workspace / "run" / "model.ckpt")
    code, out, err = run(["eval", "--data", data, "--checkpoint", ckpt, "--out", str(tmp_path / "m.json")], capsys)
    assert code == 0, err
    metrics = json_lines(out)[0]
    assert metrics == json.loads((workspace / "run" / "metrics.json").read_text())
    assert json.loads((tmp_path / "m.json").read_text()) == metrics
    code, out, err = run(["dump", "--data", data, "--checkpoint", ckpt, "--csv", str(tmp_path / "e.csv")], capsys)
    assert code == 0, err
    assert json_lines(out)[0]["rows"] == 3 * 30


def test_seed_env_fallback_and_unknown_config_key(workspace, capsys, monkeypatch, tmp_path):
    monkeypatch.setenv("IDLE_SEED", "77")
    args = [a for a in train_args(workspace, "env", "--max-seq-len", "4")]
    i = args.index("--seed")
    del args[i:i + 2]
    assert run(args, capsys)[0] == 0
    assert json.loads((workspace / "env" / "config.json").read_text())["seed"] == 77

    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"learning_rate": 0.1}))
    code, _, err = run(train_args(workspace, "x", "--config", str(bad)), capsys)
    assert code == 1 and "learning_rate" in json.loads(err)["error"]


def test_flags_override_config_file(workspace, capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lr": 0.01, "epochs": 3, "seed": 1}))
    args = train_args(workspace, "prec", "--config", str(cfg), "--lr", "0.002")
    assert run(args, capsys)[0] == 0
    echo = json.loads((workspace / "prec" / "config.json").read_text())
    assert (echo["lr"], echo["epochs"], echo["seed"]) == (0.002, 1, 4)


def test_ablate_emits_four_rows(workspace, capsys):
    args = train_args(workspace, "ablate")
    args[0] = "ablate"
    code, out, err = run(args, capsys)
    assert code == 0, err
    rows = json_lines(out)
    assert [r["ablation"] for r in rows] == ["none", "layerwise", "refinement", "distribution"]
    assert (workspace / "ablate" / "ablation.json").is_file()
