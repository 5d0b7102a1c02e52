import json
import subprocess
import sys

import pytest

from convexmenu.cli import main

TINY = """
[problem]
setting = "U_1_1"
[training]
M = 128
B = 64
T = 20
val_every = 10
val_samples = 64
val_infer_iters = 100
[eval]
test_samples = 128
infer_iters = 200
regret_samples = 8
regret_restarts = 2
regret_infer_iters = 100
baselines = ["separable_opt", "vcg"]
"""


@pytest.fixture
def tiny_toml(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_train_then_eval_reproduces_report(tmp_path, tiny_toml, capsys):
    code, out, _ = run(capsys, "train", "--config", str(tiny_toml), "--out", str(tmp_path / "runs"), "--quiet")
    assert code == 0
    report = json.loads(out)
    assert report["format"] == "convexmenu-report"
    assert report["setting"] == "U_1_1"
    assert report["test_samples"] == 128 and report["test_seed"] == 20240601
    assert [b["name"] for b in report["baselines"]] == ["separable_opt", "vcg"]
    assert report["regret"]["n_samples"] == 8
    run_dir = tmp_path / "runs" / "U_1_1_seed0"
    assert json.loads((run_dir / "report.json").read_text())["eu"] == report["eu"]
    assert (run_dir / "metrics.csv").is_file()

    code, out, _ = run(capsys, "eval", "--checkpoint", report["checkpoint"], "--report", str(tmp_path / "r.json"))
    assert code == 0
    again = json.loads(out)
    assert again["eu"] == report["eu"] and again["std_err"] == report["std_err"]
    assert again["regret"] == report["regret"]
    assert json.loads((tmp_path / "r.json").read_text())["eu"] == report["eu"]


def test_seed_override_renames_run(tmp_path, tiny_toml, capsys):
    code, out, _ = run(capsys, "train", "--config", str(tiny_toml), "--out", str(tmp_path), "--seed", "4",
                       "--no-eval", "--quiet")
    assert code == 0
    assert json.loads(out)["checkpoint"].endswith("U_1_1_seed4/checkpoint.json")


def test_progress_lines_go_to_stderr(tmp_path, tiny_toml, capsys):
    code, _, err = run(capsys, "train", "--config", str(tiny_toml), "--out", str(tmp_path), "--no-eval")
    assert code == 0
    assert "eu_val" in err


def test_baseline_command(capsys):
    code, out, _ = run(capsys, "baseline", "--name", "separable_opt", "--setting", "U_1_2")
    assert code == 0
    assert json.loads(out)["eu"] == 0.5


def test_baseline_rejects_unsupported_problem(capsys):
    code, _, err = run(capsys, "baseline", "--name", "bundle_opt", "--setting", "U_2_2_revD", "--samples", "16")
    assert code == 1 and "divisible" in err


def test_oracle_command(capsys):
    code, out, _ = run(capsys, "oracle", "gibbs")
    assert code == 0 and out.startswith("PASS gibbs")


def test_usage_errors_exit_2(tmp_path, capsys):
    assert run(capsys, "baseline", "--name", "vcg", "--setting", "X_9")[0] == 2
    assert run(capsys, "train", "--config", str(tmp_path / "missing.toml"))[0] == 2
    assert run(capsys, "eval", "--checkpoint", str(tmp_path / "missing.json"))[0] == 2
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2


def test_invalid_config_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[training]\nM = 10\nB = 20\n")
    code, _, err = run(capsys, "train", "--config", str(bad))
    assert code == 1 and "training.B" in err


def test_corrupt_checkpoint_exits_1(tmp_path, capsys):
    bad = tmp_path / "ck.json"
    bad.write_text("garbage")
    code, _, err = run(capsys, "eval", "--checkpoint", str(bad))
    assert code == 1 and "corrupted" in err


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "convexmenu.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "kernels" in proc.stdout
