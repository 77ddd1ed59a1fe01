import json
import subprocess
import sys

import pytest

from energypatch.cli import main
from energypatch.config import ModelConfig


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    model = tmp / "model.json"
    ModelConfig(image_size=16, patch_size=4, embed_dim=16, num_layers=2, num_heads=2,
                num_classes=4, adaptive_policy="avit").to_json(model)
    config = tmp / "exp.json"
    config.write_text(json.dumps({
        "seed": 1, "output_dir": str(tmp / "out"), "model": str(model),
        "dataset": {"source": "synthetic", "image_size": 16, "num_classes": 4,
                    "train_count": 64, "eval_count": 32},
        "train": {"epochs": 1, "batch_size": 32},
        "attack": {"patch_size": 4, "batch_size": 32},
        "defense": {"epochs": 1, "patch_batch_size": 32}}))
    common = ["--config", str(config), "--iterations", "2", "--budget-iterations", "2"]
    assert main(["train-backbone", *common]) == 0
    return tmp, common


def test_train_patch_and_evaluate(run, capsys):
    tmp, common = run
    assert main(["train-patch", *common]) == 0
    out = capsys.readouterr().out
    assert "| method | attack | model GFLOPs | top-1 | attack success |" in out
    patch = next((tmp / "out" / "patches").glob("compute_only_*.png"))
    assert main(["evaluate", *common, "--patch", str(patch)]) == 0
    assert (tmp / "out" / "evaluate.csv").exists()
    saved = json.loads((tmp / "out" / "experiment.json").read_text())
    assert saved["seed"] == 1 and saved["attack"]["iterations"] == 2


def test_ablations_defense_and_report(run, capsys):
    tmp, common = run
    assert main(["ablate-size", *common, "--sizes", "2", "4"]) == 0
    assert main(["ablate-location", *common, "--n-locations", "2"]) == 0
    assert main(["defend", *common]) == 0
    assert (tmp / "out" / "pool" / "manifest.json").exists()
    reports = sorted(str(p) for p in (tmp / "out" / "reports").glob("*.json"))
    assert main(["report", *reports, "--name", "all"]) == 0
    assert (tmp / "out" / "reports" / "all.csv").exists()
    assert "defense + attack" in capsys.readouterr().out


def test_errors_exit_2(tmp_path, capsys):
    assert main(["train-patch", "--output-dir", str(tmp_path)]) == 2
    assert main(["evaluate", "--seed", "0", "--output-dir", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "energypatch", "--help"], capture_output=True,
                         text=True, check=True).stdout
    for command in ("train-backbone", "train-patch", "evaluate", "ablate-size",
                    "ablate-location", "defend", "report"):
        assert command in out
