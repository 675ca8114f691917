"""End-to-end CLI runs on a miniature experiment."""

import json

from gcmkit.cli import main

EPS = 8 / 255


def write_config(tmp_path, **overrides):
    cfg = {
        "dataset": {"dir": str(tmp_path / "data"),
                    "synthesize": {"n_train": 600, "n_test": 200, "seed": 3},
                    "format": "idx", "num_classes": 10},
        "model": {"arch": "mlp", "widths": [784, 32, 10]},
        "train": {"learning_rate": 0.3, "epochs": 2, "batch_size": 64, "seed": 0},
        "gcm": {"w": 1e20, "eps": 1e-8},
        "placement": "front",
        "attacks": [{"family": "fgsm", "norm": {"p": "inf", "eps": EPS}}],
        "eval": {"max_samples": 120, "batch_size": 64},
        "seed": 0,
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_train_then_eval_pipeline(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "model.gcmb").exists()

    assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 0
    captured = capsys.readouterr().out
    assert "vanilla" in captured and "GCM" in captured
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["rows"]) == 2
    assert (out / "summary.txt").exists()
    reports = sorted(p.name for p in out.glob("report_*_*.json") if "meta" not in p.name)
    assert len(reports) == 2


def test_eval_rerun_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 0
    first = {p.name: p.read_bytes() for p in out.glob("*.json") if "meta" not in p.name}
    assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 0
    second = {p.name: p.read_bytes() for p in out.glob("*.json") if "meta" not in p.name}
    assert first == second


def test_eval_gcm_flag_restricts_variant(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["eval", "--config", str(cfg), "--out", str(out), "--gcm", "off"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert [r["variant"] for r in summary["rows"]] == ["vanilla"]


def test_empty_attack_list_clean_acc_only(tmp_path):
    cfg = write_config(tmp_path, attacks=[])
    out = tmp_path / "out"
    assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["attacks"] == []
    assert all(r["acc_clean"] is not None for r in summary["rows"])
    assert all(r["ar"] == {} for r in summary["rows"])


def test_zero_eps_attack_ar_one(tmp_path):
    cfg = write_config(tmp_path, attacks=[{"family": "fgsm", "norm": {"p": "inf", "eps": 0.0}}])
    out = tmp_path / "out"
    assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    for row in summary["rows"]:
        assert all(v == 1.0 for v in row["ar"].values())


def test_full_grid_gcm_dominates(tmp_path):
    cfg = write_config(tmp_path, attacks=[
        {"family": "fgsm", "norm": {"p": "inf", "eps": EPS}},
        {"family": "pgd", "norm": {"p": "inf", "eps": EPS}, "steps": 5},
    ])
    out = tmp_path / "out"
    assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    vanilla = next(r for r in summary["rows"] if r["variant"] == "vanilla")
    gcm = next(r for r in summary["rows"] if r["variant"] == "gcm")
    for slug, ar in vanilla["ar"].items():
        assert gcm["ar"][slug] >= ar


def test_sweep_validates_grid_before_running(tmp_path):
    cfg = write_config(tmp_path, sweep={"kind": "eps", "grid": [0.5]})
    out = tmp_path / "out"
    assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == 2
    assert not (out / "sweep_eps.json").exists()


def test_sweep_position_writes_table(tmp_path):
    cfg = write_config(tmp_path, sweep={
        "kind": "position", "grid": ["front", "block:block1"],
        "attack": {"family": "fgsm", "norm": {"p": "inf", "eps": EPS}}})
    out = tmp_path / "out"
    assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
    table = json.loads((out / "sweep_position.json").read_text())
    assert [c["value"] for c in table["cells"]] == ["front", "block:block1"]
    assert all(c["metric"] == "adv_accuracy" for c in table["cells"])


def test_sweep_cell_matches_individual_run(tmp_path):
    cfg = write_config(tmp_path, sweep={
        "kind": "eps", "grid": [1e-8],
        "attack": {"family": "fgsm", "norm": {"p": "inf", "eps": EPS}}})
    out = tmp_path / "out"
    assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
    table = json.loads((out / "sweep_eps.json").read_text())

    out2 = tmp_path / "out2"
    cfg2 = write_config(tmp_path)
    assert main(["eval", "--config", str(cfg2), "--out", str(out2), "--gcm", "on"]) == 0
    report = json.loads((out2 / "report_fgsm-linf-0p0313725_gcm.json").read_text())
    assert table["cells"][0]["result"] == report["ar"]


def test_signmap_command(tmp_path):
    cfg = write_config(tmp_path, signmap={"count": 2})
    out = tmp_path / "out"
    assert main(["signmap", "--config", str(cfg), "--out", str(out)]) == 0
    maps = sorted(p.name for p in out.glob("signmap_*.pgm"))
    assert maps == ["signmap_000_gcm.pgm", "signmap_000_vanilla.pgm",
                    "signmap_001_gcm.pgm", "signmap_001_vanilla.pgm"]


def test_exit_code_config_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"unknown_key": 1, "dataset": {"dir": "x"}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "o")]) == 2


def test_exit_code_data_error(tmp_path):
    data_dir = tmp_path / "data"
    data_dir.mkdir()
    (data_dir / "train-images-idx3-ubyte").write_bytes(b"\x00\x00\x08\x01" + bytes(12))
    (data_dir / "train-labels-idx1-ubyte").write_bytes(b"\x00\x00\x08\x01" + bytes(4))
    cfg = write_config(tmp_path)
    payload = json.loads(cfg.read_text())
    payload["dataset"] = {"dir": str(data_dir), "format": "idx", "num_classes": 10}
    cfg.write_text(json.dumps(payload))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_exit_code_numeric_error(tmp_path):
    cfg = write_config(tmp_path, train={"learning_rate": 1e12, "epochs": 1,
                                        "batch_size": 64, "seed": 0})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4


def test_exit_code_missing_dataset(tmp_path):
    cfg = write_config(tmp_path)
    payload = json.loads(cfg.read_text())
    payload["dataset"] = {"dir": str(tmp_path / "nowhere"), "format": "idx", "num_classes": 10}
    cfg.write_text(json.dumps(payload))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_exit_code_corrupt_checkpoint(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    blob = bytearray((out / "model.gcmb").read_bytes())
    blob[-5] ^= 0xFF
    (out / "model.gcmb").write_bytes(bytes(blob))
    assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 3


def test_seed_override_changes_model(tmp_path):
    cfg = write_config(tmp_path)
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert main(["train", "--config", str(cfg), "--out", str(out1), "--seed", "1"]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(out2), "--seed", "2"]) == 0
    assert (out1 / "model.gcmb").read_bytes() != (out2 / "model.gcmb").read_bytes()
