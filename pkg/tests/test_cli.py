import csv
import io

import numpy as np
import pytest

from vicet.cli import main
from vicet.registration import read_result

STATIC_SCENE = "half_extents = 6, 4, 1.5\nstate = 0 0 0 0 0 0 0 0 0 0 0 0\n"
FORWARD_SCENE = """
half_extents = 6, 4, 1.5
noise_sigma = 0.01
map_azimuth_steps = 720
map_elevation_min_deg = -40
map_elevation_max_deg = 30
map_elevation_count = 48
map_pose = 0, 0, 0, 0, 0, 0
map_pose = 2, 1, 0, 0, 0, 0
map_pose = -2, -1, 0, 0, 0, 0
map_pose = 2, -1.5, 0, 0, 0, 0
map_pose = -2, 1.5, 0, 0, 0, 0
"""


def _csv(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture
def static_files(tmp_path):
    scene = tmp_path / "static.scene"
    scene.write_text(STATIC_SCENE)
    assert main(["simulate", "--scene", str(scene), "--out", str(tmp_path / "scan.cloud"), "--map-out", str(tmp_path / "map.cloud")]) == 0
    return tmp_path


def test_register_static_pair(static_files, capsys):
    d = static_files
    rc = main(["register", "--map", str(d / "map.cloud"), "--scan", str(d / "scan.cloud"), "--method", "vicet", "--out", str(d / "r.result")])
    assert rc == 0
    res = read_result(d / "r.result")
    assert res.converged and np.allclose(res.state, 0, atol=1e-8)
    row = _csv(capsys.readouterr().out)[0]
    assert row["method"] == "vicet" and row["converged"] == "1"


def test_malformed_cloud_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cloud"
    bad.write_text("vicet-cloud v1 frame=body period=0.1 count=2\n0 0 1 0\n0 0 zz 0\n")
    rc = main(["register", "--map", str(bad), "--scan", str(bad), "--out", str(tmp_path / "r")])
    err = capsys.readouterr().err
    assert rc == 2 and "line 3" in err and err.count("\n") == 1


def test_usage_errors(tmp_path, capsys):
    assert main([]) == 1
    assert main(["register", "--map", "m"]) == 1
    assert main(["simulate", "--scene", "s", "--out", "o", "--state", "1,2"]) == 1
    assert main(["register", "--map", "m", "--scan", "s", "--out", "o", "--method", "gicp"]) == 1
    capsys.readouterr()


def test_missing_file_is_a_data_error(tmp_path, capsys):
    assert main(["unwarp", "--scan", str(tmp_path / "nope"), "--state-file", "x", "--out", "y"]) == 2
    assert "nope" in capsys.readouterr().err


def test_non_convergence_exit_code(tmp_path, capsys):
    scene = tmp_path / "s.scene"
    scene.write_text(FORWARD_SCENE)
    cfg = tmp_path / "c.cfg"
    cfg.write_text("max_iterations = 1\n")
    state = "0.3,0.1,0,0.15,0,0,0,0,0.09,0,0,0.03"
    assert main(["simulate", "--scene", str(scene), "--state", state, "--seed", "1", "--out", str(tmp_path / "s.cloud"), "--map-out", str(tmp_path / "m.cloud")]) == 0
    rc = main(["register", "--map", str(tmp_path / "m.cloud"), "--scan", str(tmp_path / "s.cloud"), "--config", str(cfg), "--init", "0.2,0.15,0,0,0,0.05", "--no-seed", "--out", str(tmp_path / "r")])
    assert rc == 3
    assert (tmp_path / "r").exists()
    assert "did not converge" in capsys.readouterr().err


def test_unwarp_and_chamfer(static_files, capsys):
    d = static_files
    (d / "zero.state").write_text(" ".join(["0"] * 12) + "\n")
    assert main(["unwarp", "--scan", str(d / "scan.cloud"), "--state-file", str(d / "zero.state"), "--out", str(d / "u.cloud")]) == 0
    assert main(["eval", "chamfer", "--map", str(d / "map.cloud"), "--scan", str(d / "u.cloud"), "--out", str(d / "c.csv")]) == 0
    row = _csv((d / "c.csv").read_text())[0]
    assert float(row["chamfer_m2"]) == 0.0 and row["rejected"] == "0"
    assert main(["eval", "chamfer", "--map", str(d / "map.cloud"), "--scan", str(d / "scan.cloud")]) == 1
    capsys.readouterr()


def test_pipeline_reproduces_bias_ordering(tmp_path, capsys):
    scene = tmp_path / "f.scene"
    scene.write_text(FORWARD_SCENE)
    truth = tmp_path / "truth.csv"
    results = tmp_path / "results"
    results.mkdir()
    rng = np.random.default_rng(4)
    for i in range(4):
        x, y, yaw = rng.uniform(-1.5, 1.5), rng.uniform(-1, 1), rng.uniform(-0.2, 0.2)
        state = f"{x},{y},0,0.15,0,0,0,0,{yaw},0,0,0.02"
        args = ["simulate", "--scene", str(scene), f"--state={state}", "--seed", str(i), "--out", str(tmp_path / f"s{i}.cloud"), "--truth-out", str(truth)]
        if i == 0:
            args += ["--map-out", str(tmp_path / "map.cloud")]
        assert main(args) == 0
        init = f"{x + 0.03},{y - 0.02},0,0,0,{yaw + 0.01}"
        for method in ("vicet", "ndt"):
            rc = main(["register", "--map", str(tmp_path / "map.cloud"), "--scan", str(tmp_path / f"s{i}.cloud"), "--method", method, f"--init={init}", "--out", str(results / f"s{i}.{method}.result")])
            assert rc == 0
    capsys.readouterr()
    assert main(["eval", "errors", "--results", str(results), "--truth", str(truth), "--forward", "1,0,0"]) == 0
    rows = {(r["method"], r["component"]): r for r in _csv(capsys.readouterr().out)}
    vicet, ndt = float(rows["vicet", "forward"]["mean"]), float(rows["ndt", "forward"]["mean"])
    assert rows["vicet", "forward"]["n"] == "4"
    assert abs(vicet) < 0.1 * 0.15 and ndt > 0.25 * 0.15


def test_help_documents_csv_columns(capsys):
    with pytest.raises(SystemExit):
        main(["eval", "errors", "--help"])
    assert "method, component" in capsys.readouterr().out
