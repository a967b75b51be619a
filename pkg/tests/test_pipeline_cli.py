import dataclasses
import filecmp
import json
import shutil
from pathlib import Path

import pytest

from sparsecon import pipeline
from sparsecon.cli import main
from sparsecon.config import PipelineConfig, default_config

TRAIN_FILES = [
    "dyn_metric.json",
    "dyn_sparse.json",
    "dyn_sparse.npz",
    "dyn_full.json",
    "dyn_full.npz",
    "constraints.npz",
    "manifold/manifold.json",
]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def tree_files(d):
    return sorted(str(p.relative_to(d)) for p in Path(d).rglob("*") if p.is_file() and p.name != "metrics.jsonl")


@pytest.fixture(scope="module")
def disk_run(tmp_path_factory):
    """Default unicycle pipeline, seed 0, through the CLI."""
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["generate", "--system", "unicycle", "--out", str(out)]) == 0
    assert main(["train", "--system", "unicycle", "--out", str(out)]) == 0
    assert main(["eval", "--system", "unicycle", "--out", str(out)]) == 0
    return out


def small_ini(tmp_path):
    cfg = default_config("unicycle", out=str(tmp_path / "small"))
    cfg.data = dataclasses.replace(cfg.data, n_traj=6, horizon=20, n_test=40)
    cfg.metric = dataclasses.replace(cfg.metric, steps=200, batch_size=16)
    cfg.constraint_metric = dataclasses.replace(cfg.constraint_metric, steps=200, batch_size=16)
    cfg.gp = dataclasses.replace(cfg.gp, restarts=1, max_iter=50, max_opt_points=100)
    cfg.manifold = dataclasses.replace(cfg.manifold, min_agreement=0.5)
    return cfg.save(tmp_path / "small.ini")


# ---------------------------------------------------------------- generate


def test_generate_summary_and_determinism(tmp_path, capsys):
    code, out, _ = run(capsys, "generate", "--system", "unicycle", "--out", tmp_path / "a")
    assert code == 0
    assert "20 offline trajectories, 1 online, 500 test triples" in out
    assert "required 3" in out
    run(capsys, "generate", "--system", "unicycle", "--out", tmp_path / "b")
    a, b = tmp_path / "a" / "seed_0" / "data", tmp_path / "b" / "seed_0" / "data"
    names = tree_files(a)
    assert names == tree_files(b) and names
    assert all(filecmp.cmp(a / n, b / n, shallow=False) for n in names)
    assert PipelineConfig.load(tmp_path / "a" / "config.ini") == default_config("unicycle", out=str(tmp_path / "a"))


def test_overlapping_regions_exit_2(tmp_path, capsys):
    cfg = default_config("unicycle")
    cfg.data = dataclasses.replace(cfg.data, test_region=[[1, 2], [1, 2], [-3, 3]])
    path = cfg.save(tmp_path / "bad.ini")
    code, _, err = run(capsys, "generate", "--config", path, "--out", tmp_path)
    assert code == 2 and "ood_margin" in err


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--system", "quadrotor", "--config", "{ini}"],
        ["eval", "--system", "unicycle", "--models", "oracle"],
        ["eval", "--system", "unicycle", "--seeds", "0"],
        ["sweep", "--system", "unicycle", "--grid", "learning_rate=1,2"],
        ["sweep", "--system", "unicycle", "--grid", "noise_std"],
        ["sweep", "--system", "unicycle"],
        ["generate", "--config", "/nonexistent.ini"],
    ],
)
def test_config_errors_exit_2(argv, tmp_path, capsys):
    ini = default_config("unicycle").save(tmp_path / "u.ini")
    argv = [a.format(ini=ini) for a in argv] + ["--out", str(tmp_path / "o")]
    code, _, err = run(capsys, *argv)
    assert code == 2 and err.startswith("error: config error")


# ------------------------------------------------------------------- train


def test_train_without_data_exits_3(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--system", "unicycle", "--out", tmp_path)
    assert code == 3 and "manifest" in err


def test_eval_without_checkpoints_exits_4(tmp_path, capsys):
    run(capsys, "generate", "--system", "unicycle", "--out", tmp_path)
    code, _, err = run(capsys, "eval", "--system", "unicycle", "--out", tmp_path)
    assert code == 4 and "dyn_full.json" in err and "run `train` first" in err


def test_disk_run_layout(disk_run):
    tdir = disk_run / "seed_0" / "train"
    for name in TRAIN_FILES:
        assert (tdir / name).exists(), name
    lines = [json.loads(s) for s in (tdir / "metrics.jsonl").read_text().splitlines()]
    assert [r["stage"] for r in lines] == list(pipeline.STAGES)
    assert lines[0]["retained"] == [False, False, True, True, True]
    assert lines[2]["constraint_count"] == 1
    assert lines[0]["final_loss"] < lines[0]["initial_loss"]
    doc = json.loads((disk_run / "seed_0" / "eval" / "report.json").read_text())
    assert sorted(doc["models"]) == sorted(["full_gp", "sparse_gp", "sparse_gp_learned_proj", "sparse_gp_true_proj"])


def test_disk_report_matches_in_memory(disk_run, unicycle_run):
    _, _, rep = unicycle_run
    assert (disk_run / "seed_0" / "eval" / "report.json").read_text() == rep.to_json()


def test_resume_skips_everything(disk_run, tmp_path, capsys):
    before = {n: (disk_run / "seed_0" / "train" / n).read_bytes() for n in TRAIN_FILES}
    code, out, _ = run(capsys, "train", "--system", "unicycle", "--out", disk_run)
    assert code == 0 and "ran nothing" in out
    for n in TRAIN_FILES:
        assert (disk_run / "seed_0" / "train" / n).read_bytes() == before[n]


def test_resume_after_dynamics_stage(disk_run, tmp_path, capsys):
    out = tmp_path / "r"
    shutil.copytree(disk_run / "seed_0" / "data", out / "seed_0" / "data")
    cfg = default_config("unicycle", out=str(out))
    _, ran = pipeline.train(cfg, until="dynamics")
    assert ran == ["dynamics_metric", "dynamics"]
    assert not (out / "seed_0" / "train" / "constraints.npz").exists()
    code, text, _ = run(capsys, "train", "--system", "unicycle", "--out", out)
    assert code == 0
    assert "ran ['constraint_dataset', 'manifold']" in text
    assert "skipped ['dynamics_metric', 'dynamics']" in text
    a, b = disk_run / "seed_0" / "train", out / "seed_0" / "train"
    assert tree_files(a) == tree_files(b)
    for n in tree_files(a):
        assert filecmp.cmp(a / n, b / n, shallow=False), n
    # byte-identical evaluation reports from the two runs
    run(capsys, "eval", "--system", "unicycle", "--out", out)
    for n in ("report.json", "residuals.csv"):
        assert filecmp.cmp(disk_run / "seed_0" / "eval" / n, out / "seed_0" / "eval" / n, shallow=False)


@pytest.mark.parametrize("victim", ["dyn_metric.json", "dyn_sparse.npz", "constraints.npz", "manifold/manifold_row0.npz"])
def test_corrupted_checkpoint_exit_3(disk_run, tmp_path, capsys, victim):
    out = tmp_path / "c"
    shutil.copytree(disk_run, out)
    (out / "seed_0" / "train" / victim).write_bytes(b"\x00garbage")
    code, _, err = run(capsys, "train", "--system", "unicycle", "--out", out)
    assert code == 3 and Path(victim).name in err


def test_fresh_retrains(disk_run, tmp_path, capsys):
    out = tmp_path / "f"
    shutil.copytree(disk_run / "seed_0" / "data", out / "seed_0" / "data")
    (out / "seed_0" / "train").mkdir()
    (out / "seed_0" / "train" / "dyn_metric.json").write_text("garbage")
    cfg = default_config("unicycle", out=str(out))
    _, ran = pipeline.train(cfg, resume=False, until="dynamics_metric")
    assert ran == ["dynamics_metric"]
    assert filecmp.cmp(out / "seed_0" / "train" / "dyn_metric.json", disk_run / "seed_0" / "train" / "dyn_metric.json", shallow=False)


# -------------------------------------------------------------------- eval


def test_eval_models_subset(disk_run, tmp_path, capsys):
    out = tmp_path / "m"
    shutil.copytree(disk_run, out)
    shutil.rmtree(out / "seed_0" / "train" / "manifold")
    code, text, _ = run(capsys, "eval", "--system", "unicycle", "--out", out, "--models", "sparse_gp,full_gp")
    assert code == 0 and "sparse_gp=" in text and "learned" not in text
    doc = json.loads((out / "seed_0" / "eval" / "report.json").read_text())
    assert sorted(doc["models"]) == ["full_gp", "sparse_gp"]
    code, _, err = run(capsys, "eval", "--system", "unicycle", "--out", out, "--models", "sparse_gp_learned_proj")
    assert code == 4 and "manifold.json" in err


def test_multi_seed_protocol_and_report(tmp_path, capsys):
    ini = small_ini(tmp_path)
    out = tmp_path / "small"
    assert run(capsys, "generate", "--config", ini, "--seeds", 2)[0] == 0
    code, text, err = run(capsys, "train", "--config", ini, "--seeds", 2)
    assert code == 0, err
    assert text.count("seed ") == 2
    code, text, _ = run(capsys, "eval", "--config", ini, "--seeds", 2, "--models", "full_gp,sparse_gp")
    assert code == 0 and "aggregate over 2 seeds" in text
    for s in (0, 1):
        assert (out / f"seed_{s}" / "eval" / "report.json").exists()
    agg = json.loads((out / "aggregate.json").read_text())
    assert agg["seeds"] == [0, 1]
    assert len(agg["models"]["sparse_gp"]["rmse_per_seed"]) == 2
    assert 0 <= agg["models"]["sparse_gp"]["wins_vs_full_gp"] <= 2
    (out / "aggregate.json").unlink()
    code, text, _ = run(capsys, "report", "--config", ini)
    assert code == 0 and "wins vs full_gp" in text
    assert json.loads((out / "aggregate.json").read_text()) == agg


def test_report_without_reports_exits_4(tmp_path, capsys):
    code, _, err = run(capsys, "report", "--system", "unicycle", "--out", tmp_path)
    assert code == 4 and "run `eval` first" in err


def test_sweep_command_writes_cells(tmp_path, capsys, monkeypatch):
    def fake_run(cfg, models=None):
        raise pipeline.StageError("manifold", RuntimeError(f"boom {cfg.manifold.sv_eps}"))

    monkeypatch.setattr(pipeline, "run_in_memory", fake_run)
    code, text, _ = run(capsys, "sweep", "--system", "unicycle", "--out", tmp_path, "--grid", "sv_eps=0.01,0.02")
    assert code == 0 and text.count("FAILED") == 2
    cells = json.loads((tmp_path / "sweep.json").read_text())
    assert [c["params"]["sv_eps"] for c in cells] == [0.01, 0.02]
    assert all(c["report"] is None and "boom" in c["error"] for c in cells)
