import csv
import io
from pathlib import Path

import numpy as np
import pytest

from gridflow.cli import load_config, main, ConfigError

MINI_INI = """\
[run]
seed = 5

[city]
height = 32
width = 32

[scenario]
n_days_first_half = 3
n_days_second_half = 2

[arch]
depth = 2
growth = 2
base_channels = 4
layers_per_block = 2

[train]
pretrain_epochs = 1
train_stride = 24
val_stride = 24
test_stride = 12

[paths]
data_dir = {root}/data
run_root = {root}/runs
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.ini"
    config.write_text(MINI_INI.format(root=root))
    assert main(["generate", "--config", str(config)]) == 0
    assert main(["mask", "--config", str(config)]) == 0
    return root, config


def latest_run(root: Path) -> Path:
    return sorted((root / "runs").iterdir(), key=lambda p: p.stat().st_mtime_ns)[-1]


def final_row(csv_text: str) -> str:
    rows = list(csv.DictReader(io.StringIO(csv_text)))
    return next(r for r in rows if r["row_label"] == "Final model")["overall_mse"]


class TestConfig:
    def test_defaults(self):
        cfg = load_config(None)
        assert cfg.seed == 0
        assert cfg.train_config().learning_rate == 3e-4

    def test_override_wins(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[train]\nbatch_size = 2\n")
        assert load_config(str(p)).train_config().batch_size == 2
        assert load_config(str(p), ["train.batch_size=8"]).train_config().batch_size == 8

    @pytest.mark.parametrize(
        "text",
        ["[train]\nbogus = 1\n", "[nosuch]\na = 1\n", "[train]\nbatch_size = many\n", "no section header\n", "[arch]\ndepth = 1\n"],
    )
    def test_bad_config(self, tmp_path, text):
        p = tmp_path / "c.ini"
        p.write_text(text)
        with pytest.raises(ConfigError):
            load_config(str(p))


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert main(["fly"]) == 2

    def test_unknown_flag(self, capsys):
        assert main(["train", "--warp-speed"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_config_error(self, tmp_path, capsys):
        p = tmp_path / "c.ini"
        p.write_text("[train]\nbogus = 1\n")
        assert main(["ablate", "--config", str(p)]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_runtime_error(self, tmp_path, capsys):
        code = main(["evaluate", "--set", f"paths.data_dir={tmp_path}/missing", "--set", f"paths.run_root={tmp_path}/runs"])
        assert code == 1
        assert "error" in capsys.readouterr().err

    @pytest.mark.parametrize("command", ["generate", "mask", "train", "finetune", "predict", "evaluate", "ablate", "report"])
    def test_help(self, command, capsys):
        assert main([command, "--help"]) == 0
        out = capsys.readouterr().out
        assert "--config" in out and "--set" in out


class TestPipeline:
    def test_prints_config_and_seed(self, workspace, capsys):
        root, config = workspace
        assert main(["mask", "--config", str(config)]) == 0
        out = capsys.readouterr().out
        assert "seed=5" in out and "[arch]" in out
        assert (latest_run(root) / "config.ini").exists()

    def test_composition_matches_ablation(self, workspace, capsys):
        root, config = workspace
        assert main(["ablate", "--config", str(config)]) == 0
        ablation = (latest_run(root) / "ablation.csv").read_text()
        assert "U-Net + Roadmap mask" in capsys.readouterr().out

        assert main(["train", "--two-stage", "--config", str(config)]) == 0
        assert main(["evaluate", "--mask", "--config", str(config)]) == 0
        evaluation = (latest_run(root) / "evaluation.csv").read_text()
        overall = next(csv.DictReader(io.StringIO(evaluation)))["overall_mse"]
        assert overall == final_row(ablation)

    def test_train_then_finetune_equals_two_stage(self, workspace):
        root, config = workspace
        two = root / "two.gfck"
        one = root / "one.gfck"
        tuned = root / "tuned.gfck"
        assert main(["train", "--two-stage", "--out", str(two), "--config", str(config)]) == 0
        assert main(["train", "--out", str(one), "--config", str(config)]) == 0
        assert main(["finetune", "--checkpoint", str(one), "--out", str(tuned), "--config", str(config)]) == 0
        assert two.read_bytes() == tuned.read_bytes()

    def test_deterministic_outputs(self, workspace):
        root, config = workspace
        ckpts = []
        for name in ("a.gfck", "b.gfck"):
            assert main(["train", "--out", str(root / name), "--config", str(config)]) == 0
            ckpts.append((root / name).read_bytes())
        assert ckpts[0] == ckpts[1]

        tables = []
        for _ in range(2):
            assert main(["ablate", "--config", str(config)]) == 0
            run = latest_run(root)
            tables.append((run / "ablation.csv").read_bytes() + (run / "loss_curve.csv").read_bytes())
        assert tables[0] == tables[1]

        reports = []
        for _ in range(2):
            assert main(["report", "--mask", "--checkpoint", str(root / "a.gfck"), "--config", str(config)]) == 0
            heat = latest_run(root) / "heatmaps"
            reports.append({p.name: p.read_bytes() for p in heat.iterdir()})
        assert len(reports[0]) == 18
        assert reports[0] == reports[1]

    def test_predict(self, workspace):
        root, config = workspace
        assert main(["train", "--config", str(config)]) == 0
        assert main(["predict", "--sample", "1", "--mask", "--config", str(config)]) == 0
        (npy,) = latest_run(root).glob("*_prediction.npy")
        pred = np.load(npy)
        assert pred.shape == (48, 32, 32)
        assert pred.min() >= 0 and pred.max() <= 1

    def test_sample_out_of_range(self, workspace):
        root, config = workspace
        assert main(["train", "--config", str(config)]) == 0
        assert main(["predict", "--sample", "9999", "--config", str(config)]) == 1
