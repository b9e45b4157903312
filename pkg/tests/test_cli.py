import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from nswave import cli, container

MICRO = {
    "problem": {"kind": "schrodinger", "n": 32, "eta_coarse": 4,
                "eta_scale": 10.0},
    "dataset": {"n_eta": 6, "n_f": 2, "seed": 3},
    "model": {"n": 32, "levels": 2, "alpha": 2, "depth": 2, "nb": 1, "p": 2,
              "padding": "periodic", "symmetric": True, "seed": 0},
    "training": {"learning_rate": 1e-3, "batch_fraction": 0.2,
                 "max_epochs": 2, "patience": 10, "seed": 1,
                 "operator_samples": 1},
}


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture()
def micro_config(tmp_path):
    path = tmp_path / "micro.json"
    path.write_text(json.dumps(MICRO))
    return path


def test_gen_data_deterministic_across_invocations(micro_config, tmp_path):
    rc = cli.main(["gen-data", "--config", str(micro_config),
                   "--out", str(tmp_path / "d1"), "--seed", "7"])
    assert rc == 0
    rc = cli.main(["gen-data", "--config", str(micro_config),
                   "--out", str(tmp_path / "d2"), "--seed", "7"])
    assert rc == 0
    for split in ("train", "test"):
        assert sha(tmp_path / "d1" / f"{split}.nstf") \
            == sha(tmp_path / "d2" / f"{split}.nstf")
    assert (tmp_path / "d1" / "run.json").exists()


def test_full_cli_cycle(micro_config, tmp_path):
    data = tmp_path / "data"
    ckpt = tmp_path / "ckpt"
    out = tmp_path / "eval"
    assert cli.main(["gen-data", "--config", str(micro_config),
                     "--out", str(data)]) == 0
    assert cli.main(["train", "--config", str(micro_config),
                     "--data", str(data), "--out", str(ckpt)]) == 0
    assert (ckpt / "model.nstf").exists()
    assert (ckpt / "metrics.json").exists()
    assert (ckpt / "curves.csv").exists()
    assert (ckpt / "run.json").exists()
    metrics = json.load(open(ckpt / "metrics.json"))
    assert metrics["operator_error"] is not None

    assert cli.main(["eval", "--model", str(ckpt), "--data", str(data),
                     "--out", str(out), "--check"]) == 0
    ev = json.load(open(out / "metrics.json"))
    assert ev["test_error"] == pytest.approx(metrics["test_error"])

    op_file = tmp_path / "g.nstf"
    assert cli.main(["export-op", "--model", str(ckpt), "--data", str(data),
                     "--index", "0", "--out", str(op_file)]) == 0
    tensors = container.read_tensors(op_file)
    assert tensors["G"].shape == (32, 32)
    # symmetric mode: the exported operator is symmetric
    assert np.max(np.abs(tensors["G"] - tensors["G"].T)) < 1e-10


def test_config_error_exit_codes(tmp_path, micro_config):
    assert cli.main(["gen-data", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.json"
    raw = json.loads(json.dumps(MICRO))
    raw["model"]["mystery"] = 1
    bad.write_text(json.dumps(raw))
    assert cli.main(["gen-data", "--config", str(bad),
                     "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    # overrides are validated too
    assert cli.main(["gen-data", "--config", str(micro_config),
                     "--out", str(tmp_path / "o"),
                     "--set", "model.unknown=3"]) == cli.EXIT_CONFIG


def test_data_error_exit_code(micro_config, tmp_path):
    assert cli.main(["train", "--config", str(micro_config),
                     "--data", str(tmp_path / "missing"),
                     "--out", str(tmp_path / "ck")]) == cli.EXIT_DATA


def test_training_divergence_exit_code(micro_config, tmp_path):
    data = tmp_path / "d"
    assert cli.main(["gen-data", "--config", str(micro_config),
                     "--out", str(data)]) == 0
    rc = cli.main(["train", "--config", str(micro_config),
                   "--data", str(data), "--out", str(tmp_path / "ck"),
                   "--set", "training.learning_rate=1e30"])
    assert rc == cli.EXIT_TRAINING


def test_override_changes_effective_config(micro_config, tmp_path):
    data = tmp_path / "d"
    assert cli.main(["gen-data", "--config", str(micro_config),
                     "--out", str(data), "--set", "dataset.n_eta=4"]) == 0
    summary = json.load(open(data / "dataset.json"))
    assert summary["n_eta"] == 4
    run = json.load(open(data / "run.json"))
    assert run["config"]["dataset"]["n_eta"] == 4


def test_verify_subcommand_passes():
    assert cli.main(["verify"]) == 0


def test_bench_subcommand_runs(capsys):
    assert cli.main(["bench", "--points", "2"]) == 0
    out = capsys.readouterr().out
    assert "ms/apply" in out


def test_shipped_presets_parse():
    from nswave import pipeline as pl
    cfg_dir = Path(__file__).resolve().parents[1] / "configs"
    presets = sorted(cfg_dir.glob("*.json"))
    assert {p.stem for p in presets} >= {
        "schrodinger1d_desk", "schrodinger1d_paper", "divergence1d_desk",
        "schrodinger2d_desk", "rte1d_desk", "rte2d_desk"}
    for preset in presets:
        cfg = pl.load_config(preset)
        assert cfg.model.n == cfg.problem.n
