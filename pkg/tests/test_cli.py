import json
import subprocess
import sys

import pytest

from mpct.cli import BASE_COLUMNS, compare_reports, load_report, main, run_lock
from mpct.config import load_config, resolve_override
from mpct.errors import ConfigError

CONFIG = """\
[experiment]
name = tiny
checkpoint_every = 2
metrics = gap, psnr

[training]
max_steps = 4
eval_every = 2
gen_width = 4
gen_down = 2
gen_res = 1
disc_width = 4
disc_layers = 2

[dataset]
image_size = 8
train_count = 6
eval_count = 4

[domain.1]
kind = channel_permutation
permutation = 0, 1, 2

[domain.2]
kind = channel_permutation
permutation = 1, 2, 0

[domain.3]
kind = channel_permutation
permutation = 2, 0, 1
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "exp.ini"
    p.write_text(CONFIG)
    return p


def run_cli(*argv):
    return main([str(a) for a in argv])


def test_run_writes_artifacts_and_is_deterministic(cfg_path, tmp_path, capsys):
    for out in ("a", "b"):
        assert run_cli("run", "--config", cfg_path, "--set", "seed=7", "--out", tmp_path / out) == 0
    run_a, run_b = tmp_path / "a" / "tiny", tmp_path / "b" / "tiny"
    for name in ("config.snapshot", "metrics.csv", "curves.csv", "report.txt", "report.json",
                 "checkpoints/step-000002.mpct", "checkpoints/step-000004.mpct"):
        assert (run_a / name).exists(), name
    assert not (run_a / ".lock").exists()
    assert (run_a / "metrics.csv").read_bytes() == (run_b / "metrics.csv").read_bytes()
    assert (run_a / "curves.csv").read_bytes() == (run_b / "curves.csv").read_bytes()
    header = (run_a / "metrics.csv").read_text().splitlines()[0].split(",")
    assert tuple(header[: len(BASE_COLUMNS)]) == BASE_COLUMNS
    assert "seed = 7" in (run_a / "config.snapshot").read_text()
    assert "final metrics:" in capsys.readouterr().out


def test_snapshot_reproduces_run(cfg_path, tmp_path):
    assert run_cli("run", "--config", cfg_path, "--out", tmp_path / "a") == 0
    snap = tmp_path / "a" / "tiny" / "config.snapshot"
    assert run_cli("run", "--config", snap, "--out", tmp_path / "b") == 0
    for name in ("metrics.csv", "curves.csv"):
        assert (tmp_path / "a/tiny" / name).read_bytes() == (tmp_path / "b/tiny" / name).read_bytes()


def test_missing_dataset_directory_exits_2(tmp_path, capsys):
    cfg = tmp_path / "dir.ini"
    missing = tmp_path / "nowhere"
    cfg.write_text("[training]\nn_domains = 2\nauxiliary_domain = 3\n[dataset]\nsource = directory\n"
                   f"[domain.1]\npath = {missing}\n[domain.2]\npath = {missing}\n[domain.3]\npath = {missing}\n")
    assert run_cli("run", "--config", cfg) == 2
    assert str(missing) in capsys.readouterr().err


def test_ablate_flag_changes_only_consistency(cfg_path):
    base = load_config(cfg_path)
    ablated = load_config(cfg_path, ["training.consistency_enabled=false"])
    assert base.training.consistency_enabled and not ablated.training.consistency_enabled
    ablated.training.consistency_enabled = True
    assert ablated.snapshot_text() == base.snapshot_text()


def test_ablate_flag_reaches_config(cfg_path, tmp_path):
    assert run_cli("run", "--config", cfg_path, "--ablate-consistency", "--out", tmp_path) == 0
    assert "consistency_enabled = false" in (tmp_path / "tiny" / "config.snapshot").read_text()


def test_unknown_key_rejected(cfg_path, tmp_path, capsys):
    assert run_cli("run", "--config", cfg_path, "--set", "training.bogus=1", "--out", tmp_path) == 2
    assert "bogus" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        resolve_override("nosuchkey=3")
    bad = tmp_path / "bad.ini"
    bad.write_text(CONFIG + "\n[extra]\nx = 1\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_field_level_validation_messages(cfg_path):
    with pytest.raises(ConfigError, match="image_size"):
        load_config(cfg_path, ["dataset.image_size=12"])
    with pytest.raises(ConfigError, match="checkpoint_every"):
        load_config(cfg_path, ["experiment.checkpoint_every=3"])
    with pytest.raises(ConfigError, match="training.alpha"):
        load_config(cfg_path, ["alpha=abc"])


def test_eval_matches_final_in_loop_metrics(cfg_path, tmp_path, capsys):
    assert run_cli("run", "--config", cfg_path, "--out", tmp_path) == 0
    final = load_report(tmp_path / "tiny").final
    out = tmp_path / "eval.csv"
    ck = tmp_path / "tiny" / "checkpoints" / "step-000004.mpct"
    assert run_cli("eval", "--checkpoint", ck, "--config", cfg_path, "--out", out) == 0
    header, row = [line.split(",") for line in out.read_text().splitlines()]
    values = dict(zip(header, row))
    assert int(values.pop("step")) == final["step"]
    assert set(values) == set(final) - {"step"}
    for k, v in values.items():
        assert float(v) == pytest.approx(final[k], rel=1e-12, abs=0)

    capsys.readouterr()
    assert run_cli("eval", "--checkpoint", ck, "--config", cfg_path, "--metrics", "psnr") == 0
    cols = capsys.readouterr().out.splitlines()[0].split(",")
    assert cols[0] == "step" and all(c.startswith("psnr") for c in cols[1:])


def test_eval_missing_or_corrupt_checkpoint_exits_2(cfg_path, tmp_path):
    assert run_cli("eval", "--checkpoint", tmp_path / "none.mpct", "--config", cfg_path) == 2
    bad = tmp_path / "bad.mpct"
    bad.write_bytes(b"garbage")
    assert run_cli("eval", "--checkpoint", bad, "--config", cfg_path) == 2


def write_report(path, final):
    path.mkdir(parents=True)
    (path / "report.json").write_text(json.dumps({"config": "", "series": [], "final": final}))
    return path


def test_compare_identical_reports(tmp_path, capsys):
    a = write_report(tmp_path / "a", {"step": 5, "gap_mean": 0.2, "psnr_mean": 21.0})
    assert run_cli("compare", a, a, "--out", tmp_path / "d.csv") == 0
    rows = (tmp_path / "d.csv").read_text().splitlines()[1:]
    assert [r.split(",")[-1] for r in rows] == ["0.0", "0.0"]
    assert "second report is better" in capsys.readouterr().out


def test_compare_sign_and_intersection(tmp_path, capsys):
    a = load_report(write_report(tmp_path / "a", {"step": 5, "gap_mean": 0.2, "psnr_mean": 20.0, "fid_mean": 3.0}))
    b = load_report(write_report(tmp_path / "b", {"step": 5, "gap_mean": 0.1, "psnr_mean": 21.5}))
    rows, only = compare_reports(a, b)
    deltas = {r[0]: r[3] for r in rows}
    # lower gap and higher PSNR both count as improvements
    assert deltas["gap_mean"] == pytest.approx(0.1) and deltas["psnr_mean"] == pytest.approx(1.5)
    assert only == ["fid_mean"]
    assert run_cli("compare", tmp_path / "a", tmp_path / "b") == 0
    assert "fid_mean" in capsys.readouterr().err


def test_compare_disjoint_exits_2(tmp_path):
    a = write_report(tmp_path / "a", {"step": 1, "gap_mean": 0.2})
    b = write_report(tmp_path / "b", {"step": 1, "psnr_mean": 20.0})
    assert run_cli("compare", a, b) == 2
    assert run_cli("compare", a, tmp_path / "missing") == 2


def test_locked_run_directory(cfg_path, tmp_path):
    with run_lock(tmp_path / "tiny"):
        assert run_cli("run", "--config", cfg_path, "--out", tmp_path) == 2
    assert not (tmp_path / "tiny" / ".lock").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mpct", "compare", str(tmp_path / "x"), str(tmp_path / "y")],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "error:" in proc.stderr
