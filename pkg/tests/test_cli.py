import csv
import io

import numpy as np
import pytest

from quantumgs import cli
from quantumgs.scene_io import load_checkpoint, read_ppm, save_scene
from quantumgs.render import GaussianScene

SMALL_CFG = """\
hash_levels=2
hash_log2_table=8
hash_base_res=4
hash_max_res=16
log_every=2
"""


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    rows = list(csv.DictReader(io.StringIO(out.out))) if out.out.strip() else []
    return code, rows, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.cfg").write_text(SMALL_CFG)
    assert cli.main(["gen", "--gaussians", "2", "--views", "3", "--width", "12", "--height", "12",
                     "--seed", "1", "--run-dir", str(root / "data")]) == 0
    assert cli.main(["train", "--dataset", str(root / "data"), "--config", str(root / "small.cfg"),
                     "--iters", "4", "--run-dir", str(root / "run"), "--workers", "1"]) == 0
    return root


def test_gen_reports_checksum(tmp_path, capsys):
    code, rows, _ = run_cli(capsys, "gen", "--gaussians", "1", "--views", "2", "--width", "8", "--height", "8",
                            "--run-dir", tmp_path / "d")
    assert code == 0 and len(rows) == 1
    assert len(rows[0]["checksum"]) == 64 and rows[0]["views"] == "2"
    assert (tmp_path / "d" / "dataset.cfg").exists()


def test_seed_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "7")
    monkeypatch.setenv(cli.RUNS_ENV, str(tmp_path / "runs"))
    code, rows, _ = run_cli(capsys, "gen", "--gaussians", "1", "--views", "2", "--width", "8", "--height", "8")
    assert code == 0
    assert rows[0]["dataset"].endswith("-seed7")
    assert "seed=7" in (tmp_path / "runs").iterdir().__next__().joinpath("dataset.cfg").read_text()


def test_train_outputs(workspace):
    run = workspace / "run"
    for name in ("config.cfg", "checkpoint.qgsc", "metrics.csv", "preview_000.ppm", "curves.png"):
        assert (run / name).exists(), name
    lines = (run / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,psnr,ssim,l1,loss"
    assert [line.split(",")[0] for line in lines[1:]] == ["0", "2", "4"]
    assert "hash_levels=2" in (run / "config.cfg").read_text()


def test_zero_iterations_emit_baseline(workspace, tmp_path, capsys):
    code, rows, _ = run_cli(capsys, "train", "--dataset", workspace / "data", "--config", workspace / "small.cfg",
                            "--iters", "0", "--run-dir", tmp_path / "r0", "--previews", "1")
    assert code == 0 and rows[0]["step"] == "0"
    state, _ = load_checkpoint(tmp_path / "r0" / "checkpoint.qgsc")
    assert state.step == 0
    code, _, _ = run_cli(capsys, "render", "--checkpoint", tmp_path / "r0" / "checkpoint.qgsc", "--view", "0",
                         "--format", "ppm", "--run-dir", tmp_path / "rr")
    baseline = cli.io.load_dataset(workspace / "data")
    from quantumgs.render import render

    expected = render(baseline[0], baseline[1].cameras[0]).rgb
    np.testing.assert_array_equal(read_ppm(tmp_path / "rr" / "render_000.ppm"), cli.io.to_uint8(expected))


def test_same_seed_same_metrics(workspace, tmp_path, capsys):
    for name in ("a", "b"):
        run_cli(capsys, "train", "--dataset", workspace / "data", "--config", workspace / "small.cfg", "--iters", "4",
                "--run-dir", tmp_path / name, "--previews", "0", "--workers", "1" if name == "a" else "3")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_both_pipelines_train(workspace, tmp_path, capsys):
    heads = []
    for p in ("I", "II"):
        code, rows, _ = run_cli(capsys, "train", "--dataset", workspace / "data", "--config", workspace / "small.cfg",
                                "--pipeline", p, "--iters", "2", "--run-dir", tmp_path / p, "--previews", "0")
        assert code == 0
        state, _ = load_checkpoint(tmp_path / p / "checkpoint.qgsc")
        assert state.config.pipeline == p and state.step == 2
        heads.append((tmp_path / p / "metrics.csv").read_text().splitlines()[0])
    assert heads[0] == heads[1]


def test_resume_continues(workspace, tmp_path, capsys):
    code, rows, _ = run_cli(capsys, "train", "--dataset", workspace / "data", "--resume",
                            workspace / "run" / "checkpoint.qgsc", "--iters", "2", "--run-dir", tmp_path / "res",
                            "--previews", "0")
    assert code == 0 and rows[0]["step"] == "6"


def test_eval_and_render(workspace, tmp_path, capsys):
    ckpt = workspace / "run" / "checkpoint.qgsc"
    code, rows, _ = run_cli(capsys, "eval", "--checkpoint", ckpt, "--run-dir", tmp_path / "e")
    assert code == 0 and rows[0]["step"] == "4" and float(rows[0]["psnr"]) > 10
    last = (workspace / "run" / "metrics.csv").read_text().splitlines()[-1].split(",")
    assert rows[0]["psnr"] == last[1]
    code, rows, _ = run_cli(capsys, "render", "--checkpoint", ckpt, "--run-dir", tmp_path / "r")
    assert code == 0 and [r["view"] for r in rows] == ["0", "1", "2"]
    assert all((tmp_path / "r" / f"render_00{i}.png").exists() for i in range(3))


def test_dirmap_shape_and_identity(workspace, tmp_path, capsys):
    code, _, _ = run_cli(capsys, "train", "--dataset", workspace / "data", "--config", workspace / "small.cfg",
                         "--iters", "0", "--run-dir", tmp_path / "init", "--previews", "0")
    code, rows, _ = run_cli(capsys, "dirmap", "--checkpoint", tmp_path / "init" / "checkpoint.qgsc", "--index", "1",
                            "--width", "64", "--height", "32", "--run-dir", tmp_path / "m")
    assert code == 0
    assert read_ppm(tmp_path / "m" / "dirmap_001.ppm").shape == (32, 64, 3)
    assert (tmp_path / "m" / "dirmap_001.png").exists()
    r = rows[0]
    assert float(r["color_factor_min"]) == float(r["color_factor_max"]) == 1.0
    assert float(r["opacity_factor_min"]) == float(r["opacity_factor_max"]) == 1.0


def test_gradcheck_passes(capsys):
    code, rows, _ = run_cli(capsys, "gradcheck", "--pipeline", "I", "--seed", "3")
    assert code == 0
    assert rows and all(r["status"] == "PASS" for r in rows)


def test_gradcheck_corrupted_group_fails(capsys):
    code, rows, err = run_cli(capsys, "gradcheck", "--pipeline", "II", "--corrupt", "ansatz")
    assert code == 2
    failed = [r["group"] for r in rows if r["status"] == "FAIL"]
    assert failed == ["ansatz"]
    assert "II:ansatz" in err


def test_gradcheck_on_scene_file(tmp_path, capsys):
    rng = np.random.default_rng(0)
    scene = GaussianScene(rng.uniform(-0.2, 0.2, (1, 3)), [[1.0, 0, 0, 0]], np.full((1, 3), -1.2), [1.0],
                          rng.normal(0, 0.3, (1, 16, 3)))
    save_scene(tmp_path / "s.qgs", scene)
    code, rows, _ = run_cli(capsys, "gradcheck", "--pipeline", "I", "--scene", tmp_path / "s.qgs")
    assert code == 0 and all(r["status"] == "PASS" for r in rows)


def test_ablate_rows_and_determinism(workspace, tmp_path, capsys):
    outs = []
    for name, workers in (("a", "1"), ("b", "2")):
        code, rows, _ = run_cli(capsys, "ablate", "--dataset", workspace / "data", "--config", workspace / "small.cfg",
                                "--iters", "3", "--run-dir", tmp_path / name, "--workers", workers)
        assert code == 0
        assert [r["variant"] for r in rows] == list(cli.VARIANTS)
        outs.append((tmp_path / name / "ablation.csv").read_bytes())
        assert (tmp_path / name / "ablation.png").exists()
    assert outs[0] == outs[1]


def exit_code(argv):
    try:
        return cli.main(argv)
    except SystemExit as e:  # argparse rejects the command line itself
        return e.code


@pytest.mark.parametrize("argv", [
    ["train", "--bogus"],
    ["frobnicate"],
    ["dirmap", "--checkpoint", "missing.qgsc"],
    ["gradcheck", "--gaussians", "5"],
    ["gradcheck", "--size", "16"],
    ["ablate", "--dataset", "nowhere"],
    ["train", "--dataset", "nowhere"],
    ["gen", "--gaussians", "0"],
    ["gen", "--workers", "0"],
])
def test_usage_errors_exit_one(argv, capsys):
    assert exit_code(argv) == 1


def test_dirmap_bad_index(workspace, capsys):
    code, _, err = run_cli(capsys, "dirmap", "--checkpoint", workspace / "run" / "checkpoint.qgsc", "--index", "9")
    assert code == 1 and "out of range" in err


def test_bad_seed_environment(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv(cli.SEED_ENV, "abc")
    code, _, err = run_cli(capsys, "gen", "--run-dir", tmp_path / "x")
    assert code == 1 and cli.SEED_ENV in err


def test_ablate_rejects_unknown_variant(workspace, capsys):
    code, _, err = run_cli(capsys, "ablate", "--dataset", workspace / "data", "--variants", "full,shiny")
    assert code == 1 and "shiny" in err


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("gen", "train", "render", "eval", "gradcheck", "dirmap", "ablate"):
        assert cmd in out
