import hashlib
import json
import subprocess
import sys

import pytest

from wiselab import checkpoint as ckpt
from wiselab.harness import cli
from wiselab.harness.config import default_config


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    d = default_config().to_dict()
    d["gen"].update(per_class_train=12, per_class_test=15)
    d["pretrain"]["epochs"] = 1
    d["finetune"]["epochs"] = 1
    d["alpha_grid"] = [0.0, 0.5, 1.0]
    d["baselines_to_run"] = []
    d["zoo"] = [{"epochs": 1, "per_class": 4}, {"epochs": 2, "per_class": 12}]
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(d))
    return path


class TestInterpolate:
    def test_matches_library(self, default_run, tmp_path, capsys):
        dst = tmp_path / "mid.ckpt"
        code = cli.main([
            "interpolate", "--alpha", "0.35",
            "--theta0", str(default_run / "theta0.ckpt"),
            "--theta1", str(default_run / "theta1.ckpt"),
            "--output", str(dst),
        ])
        assert code == 0
        expected = ckpt.interpolate(ckpt.load(default_run / "theta0.ckpt"), ckpt.load(default_run / "theta1.ckpt"), 0.35)
        assert hashlib.sha256(ckpt.encode(expected)).hexdigest() == sha(dst)
        assert str(dst) in capsys.readouterr().out

    def test_defaults_to_out_dir(self, default_run):
        assert cli.main(["--out", str(default_run), "interpolate", "--alpha", "1.0"]) == 0
        written = ckpt.load(default_run / "interp_1.0.ckpt")
        assert written.values.tobytes() == ckpt.load(default_run / "theta1.ckpt").values.tobytes()
        (default_run / "interp_1.0.ckpt").unlink()

    @pytest.mark.parametrize("alpha", ["1.5", "-0.1", "nan"])
    def test_bad_alpha_exits_2(self, alpha, default_run, capsys):
        assert cli.main(["interpolate", "--alpha", alpha, "--out", str(default_run)]) == 2
        assert "alpha" in capsys.readouterr().err

    def test_missing_checkpoint_exits_1(self, tmp_path):
        assert cli.main(["interpolate", "--alpha", "0.5", "--out", str(tmp_path)]) == 1


class TestStages:
    def test_staged_equals_run(self, small_config, tmp_path):
        whole, staged = tmp_path / "whole", tmp_path / "staged"
        assert cli.main(["--config", str(small_config), "run", "--out", str(whole)]) == 0
        for cmd in ["pretrain", "finetune", "sweep", "diversity", "fit-baseline", "plot"]:
            assert cli.main([cmd, "--config", str(small_config), "--out", str(staged)]) == 0, cmd
        for name in ["theta0.ckpt", "theta1.ckpt", "trace.csv", "sweep.csv", "diversity.json", "robustness.json", "plots/avg_shifts.svg"]:
            assert sha(whole / name) == sha(staged / name), name

    def test_seed_flag_changes_output(self, small_config, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["pretrain", "--config", str(small_config), "--out", str(a)]) == 0
        assert cli.main(["pretrain", "--config", str(small_config), "--seed", "9", "--out", str(b)]) == 0
        assert sha(a / "theta0.ckpt") != sha(b / "theta0.ckpt")


class TestErrors:
    def test_invalid_config_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"alpha_grid": [0.5]}))
        assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
        assert "config" in capsys.readouterr().err

    def test_unknown_subcommand_exits_2(self):
        assert cli.main(["bake"]) == 2

    def test_exit_codes(self):
        from wiselab.errors import ConfigError, NumericError, StageError

        assert cli.exit_code_for(StageError("finetune", NumericError("x", step=3))) == 3
        assert cli.exit_code_for(ConfigError("x")) == 2


class TestFitBaseline:
    def test_points_file(self, tmp_path, capsys):
        pts = tmp_path / "pts.csv"
        pts.write_text("ref_acc,shift_acc\n0.5,0.3\n0.7,0.45\n0.9,0.6\n")
        assert cli.main(["fit-baseline", "--points", str(pts)]) == 0
        fit = json.loads(capsys.readouterr().out)
        assert set(fit) == {"slope", "intercept", "points", "residuals"}
        assert fit["slope"] > 0

    def test_points_bad_columns(self, tmp_path):
        pts = tmp_path / "pts.csv"
        pts.write_text("x,y\n0.5,0.3\n")
        assert cli.main(["fit-baseline", "--points", str(pts)]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "wiselab", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "interpolate" in out.stdout
