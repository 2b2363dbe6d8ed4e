import subprocess
import sys

import numpy as np
import pytest

from diwa.cli import format_ablation_table, run_command
from diwa.imageio import read_image
from diwa.training import load_checkpoint

TINY = [
    "--hr-size", "16", "--base-width", "8", "--T-train", "20", "--T-eval", "5", "--batch-size", "2",
    "--set", "channel_mults=1,2", "--set", "n_blocks=1", "--set", "predictor_hidden=8",
    "--set", "predictor_layers=3", "--n-holdout", "2",
]


@pytest.fixture()
def corpus(tmp_path):
    root = tmp_path / "data"
    assert run_command(["gen-data", "--n", "6", "--size", "16", "--seed", "3", "--root", str(root)]) == 0
    return root


@pytest.fixture()
def runs(tmp_path, monkeypatch):
    d = tmp_path / "runs"
    monkeypatch.setenv("DIWA_RUNS_DIR", str(d))
    return d


def test_gen_data_layout_and_determinism(tmp_path):
    for sub in ("a", "b"):
        assert run_command(["gen-data", "--n", "4", "--size", "16", "--seed", "7", "--root", str(tmp_path / sub)]) == 0
    for rel in ("hr/0000.ppm", "hr/0003.ppm", "lr_x4/0003.ppm"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert read_image(tmp_path / "a" / "lr_x4" / "0000.ppm").shape == (3, 4, 4)


def test_train_zero_steps_writes_checkpoint(corpus, runs):
    code = run_command(["train", "--name", "z", "--steps", "0", "--data-dir", str(corpus), *TINY])
    assert code == 0
    assert (runs / "z" / "ckpt" / "step_000000.ckpt").exists()
    assert (runs / "z" / "config.txt").read_text().count("steps = 0") == 1


def test_train_sample_eval_cycle(corpus, runs, capsys):
    assert run_command(["train", "--name", "r", "--steps", "3", "--log-every", "1", "--data-dir", str(corpus), *TINY]) == 0
    log_lines = (runs / "r" / "train.log").read_text().splitlines()
    assert len(log_lines) == 3
    step, loss, lr, elapsed = log_lines[-1].split(",")
    assert int(step) == 3 and float(loss) > 0 and float(lr) == 1e-4 and float(elapsed) >= 0

    for out in ("s1", "s2"):
        assert run_command(["sample", "--name", "r", "--output", str(runs / out), "--sample-seed", "4"]) == 0
    files = sorted(p.name for p in (runs / "s1").iterdir())
    assert files == ["0004.ppm", "0005.ppm"]
    for f in files:
        assert (runs / "s1" / f).read_bytes() == (runs / "s2" / f).read_bytes()
    assert read_image(runs / "s1" / files[0]).shape == (3, 16, 16)

    assert run_command(["eval", "--name", "r", "--sr", str(runs / "s1")]) == 0
    rows = (runs / "r" / "eval.csv").read_text().splitlines()
    assert rows[0] == "image_id,psnr_db,ssim" and len(rows) == 3
    assert "psnr=" in capsys.readouterr().out


def test_resume_continues_from_latest(corpus, runs):
    base = ["train", "--name", "c", "--data-dir", str(corpus), *TINY]
    assert run_command([*base, "--steps", "2"]) == 0
    assert run_command([*base, "--steps", "4"]) == 0
    assert (runs / "c" / "ckpt" / "step_000004.ckpt").exists()
    assert run_command(["train", "--name", "full", "--data-dir", str(corpus), *TINY, "--steps", "4"]) == 0
    # the echoed config differs in the run name, so compare the trained state
    sa, sb = load_checkpoint(runs / "c" / "ckpt" / "step_000004.ckpt"), load_checkpoint(runs / "full" / "ckpt" / "step_000004.ckpt")
    assert sa.losses == sb.losses
    assert all(sa.params[n].data.tobytes() == t.data.tobytes() for n, t in sb.params.items())


def test_config_hash_mismatch_needs_force(corpus, runs, capsys):
    base = ["train", "--name", "h", "--data-dir", str(corpus), *TINY]
    assert run_command([*base, "--steps", "1"]) == 0
    assert run_command([*base, "--steps", "2", "--seed", "99"]) == 2
    assert "config hash" in capsys.readouterr().err
    with pytest.warns(UserWarning):
        assert run_command([*base, "--steps", "2", "--seed", "99", "--force"]) == 0


def test_usage_errors_exit_1(capsys):
    assert run_command(["nonsense"]) == 1
    assert run_command(["train", "--bogus-flag"]) == 1
    assert run_command(["train", "--use-dwt", "maybe"]) == 1
    assert run_command(["train", "--set", "nokey"]) == 1
    assert run_command(["train", "--T-eval", "500"]) == 1  # T_eval > T_train
    assert capsys.readouterr().err


def test_runtime_errors_exit_2(tmp_path, runs, capsys):
    assert run_command(["train", "--name", "x", "--data-dir", str(tmp_path / "missing")]) == 2
    assert run_command(["sample", "--name", "nope"]) == 2
    (runs / "empty").mkdir(parents=True)
    (runs / "empty" / "config.txt").write_text("steps = 1\n")
    assert run_command(["sample", "--name", "empty"]) == 2
    assert "no checkpoint" in capsys.readouterr().err


def test_runs_dir_flag_beats_environment(corpus, runs, tmp_path):
    other = tmp_path / "elsewhere"
    assert run_command(["train", "--name", "f", "--steps", "0", "--runs-dir", str(other), "--data-dir", str(corpus), *TINY]) == 0
    assert (other / "f" / "ckpt").is_dir() and not (runs / "f").exists()


def test_ablation_table_shape():
    rows = [(label, 20.0 + i, 0.5) for i, label in enumerate(["a", "bb", "ccc", "dddd"])]
    table = format_ablation_table(rows, (19.5, 0.4)).splitlines()
    assert len(table) == 6
    assert table[0].split() == ["config", "PSNR", "SSIM"]
    assert table[-1].startswith("bicubic (reference)")


def test_ablate_runs_four_rows(runs, capsys):
    argv = ["ablate", "--steps", "2", "--n-images", "6", *TINY, "--name", "abl"]
    assert run_command(argv) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 6
    for line in out[1:]:
        assert np.isfinite(float(line.split()[-2])) and np.isfinite(float(line.split()[-1]))
    csv_rows = (runs / "abl" / "ablation.csv").read_text().splitlines()
    assert len(csv_rows) == 6


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "diwa", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
