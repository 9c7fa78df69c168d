import json

import pytest

from wrimnet.cli import main
from wrimnet.data import read_manifest_header


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_data")
    assert main(["generate-synth", "--ids", "4", "--per-id", "6", "--seed", "2", "--out", str(out),
                 "--size", "64", "32", "--holdout", "2"]) == 0
    return out


def write_cfg(path, data_dir, **over):
    cfg = {
        "network": {"input_height": 64, "input_width": 32, "mlp_hidden": 64, "mlp_out": 16},
        "miim": {"k_s": 2},
        "loss": {"top_k": 2},
        "sampler": {"p_ids": 2, "k_per_modality": 2},
        "optimizer": {"kind": "adam", "base_lr": 1e-3, "warmup_epochs": 0},
        "eval": {"mode": "ALL_SEARCH", "shot": 1, "trials": 2},
        "data": {"train_manifest": str(data_dir / "train.jsonl"), "test_manifest": str(data_dir / "test.jsonl")},
        "epochs": 1,
        "checkpoint_every": 1,
        "output_dir": str(path.parent / "run"),
    }
    cfg.update(over)
    path.write_text(json.dumps(cfg))
    return path


def test_generate_synth_prints_path_and_echoes_flags(tmp_path, capsys):
    assert main(["generate-synth", "--ids", "3", "--per-id", "2", "--seed", "9", "--out", str(tmp_path)]) == 0
    path = capsys.readouterr().out.strip()
    assert path == str(tmp_path / "manifest.jsonl")
    gen = read_manifest_header(path)["generator"]
    assert (gen["num_ids"], gen["per_id_per_modality"], gen["seed"]) == (3, 2, 9)
    assert gen["image_size"] == [96, 48]


@pytest.mark.parametrize("argv", [
    ["generate-synth", "--ids", "3", "--per-id", "2"],
    ["generate-synth", "--ids", "0", "--per-id", "2", "--out", "x"],
    ["train"],
    ["nonsense"],
    [],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1


def test_bad_config_is_usage_error(tmp_path):
    (tmp_path / "c.json").write_text('{"epochs": 1, "typo": 3}')
    assert main(["flops", "--config", str(tmp_path / "c.json")]) == 1
    assert main(["flops", "--config", str(tmp_path / "missing.json")]) == 1


def test_flops(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"network": {"input_height": 64, "input_width": 32}, "miim": {"k_s": 2}}))
    assert main(["flops", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("layer") and out[-2].startswith("TOTAL") and out[-1].startswith("params")
    rows = [l.split() for l in out[1:-2]]
    total = out[-2].split()
    assert sum(int(r[-1].replace(",", "")) for r in rows) == int(total[-1].replace(",", ""))
    assert sum(int(r[-3].replace(",", "")) for r in rows) == int(total[-3].replace(",", ""))


def test_train_then_evaluate(tmp_path, tiny_data, capsys):
    cfg = write_cfg(tmp_path / "c.json", tiny_data)
    assert main(["train", "--config", str(cfg)]) == 0
    run = tmp_path / "run"
    assert (run / "final.wrim").exists() and (run / "config.json").exists()
    lines = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
    assert lines and {"step", "cls_p5", "cmkic_p5", "id_p4", "total"} <= set(lines[0])
    for l in lines:
        assert l["total"] == pytest.approx(l["cls_p5"] + 0.5 * l["cmkic_p5"] + 0.1 * l["id_p4"], rel=1e-6)
    capsys.readouterr()

    assert main(["evaluate", "--config", str(cfg), "--checkpoint", str(run / "final.wrim")]) == 0
    printed = capsys.readouterr().out
    report = json.loads((run / "report.json").read_text())
    assert 0 <= report["map"] <= 1 and all(0 <= c <= 1 for c in report["cmc"])
    assert f"{100 * report['cmc'][0]:.2f}" in printed
    assert (run / "report.txt").read_text() == printed

    first = (run / "report.json").read_bytes()
    assert main(["evaluate", "--config", str(cfg), "--checkpoint", str(run / "final.wrim")]) == 0
    assert (run / "report.json").read_bytes() == first

    other = write_cfg(tmp_path / "other.json", tiny_data, network={"input_height": 64, "input_width": 32,
                                                                   "n_local_p5": 0})
    assert main(["evaluate", "--config", str(other), "--checkpoint", str(run / "final.wrim")]) == 2


def test_runtime_failure_exit_2(tmp_path, tiny_data):
    cfg = write_cfg(tmp_path / "c.json", tiny_data,
                    data={"train_manifest": str(tmp_path / "nope.jsonl"), "test_manifest": ""})
    assert main(["train", "--config", str(cfg)]) == 2
    good = write_cfg(tmp_path / "g.json", tiny_data)
    assert main(["evaluate", "--config", str(good), "--checkpoint", str(tmp_path / "nope.wrim")]) == 2


def test_workers_env(tmp_path, tiny_data, monkeypatch):
    cfg = write_cfg(tmp_path / "c.json", tiny_data, precision="float64")
    assert main(["train", "--config", str(cfg)]) == 0
    serial = (tmp_path / "run" / "train_log.jsonl").read_text()
    monkeypatch.setenv("WRIM_NUM_WORKERS", "3")
    assert main(["train", "--config", str(cfg)]) == 0
    assert (tmp_path / "run" / "train_log.jsonl").read_text() == serial
    monkeypatch.setenv("WRIM_NUM_WORKERS", "zero")
    assert main(["train", "--config", str(cfg)]) == 2

