import json

import numpy as np
import pytest

from varmion import __version__
from varmion.cli import main
from varmion.ipcs import load_trajectory
from varmion.network import load_model
from varmion.sensing import load_dataset


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    lines = [l for l in err.strip().splitlines() if l.startswith("{")]
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    assert main(["generate", "--config", "smoke", "--threads", "1", "--out", str(d / "d.vmds")]) == 0
    assert main(["train", "--config", "smoke", "--threads", "1", "--data", str(d / "d.vmds"),
                 "--out", str(d / "m.vmn")]) == 0
    return d


def test_mesh_info(capsys):
    code, out, _ = run(capsys, "mesh-info", "--geometry", "cavity", "--n", "16")
    assert code == 0
    lines = dict(l.split(": ", 1) for l in out.strip().splitlines())
    assert lines["vertices"] == "289" and lines["triangles"] == "512" and lines["area"] == "1.0"
    assert lines["boundary_edges"] == "64"


def test_mesh_info_writes_files(capsys, tmp_path):
    code, out, _ = run(capsys, "mesh-info", "--geometry", "contraction", "--h", "0.05",
                       "--out", str(tmp_path / "m.vmm"), "--json", str(tmp_path / "m.json"))
    assert code == 0 and "area: 0.5" in out
    prov = json.loads((tmp_path / "m.vmm.provenance.json").read_text())
    assert prov["settings"]["mesh.target_h"] == 0.05
    assert json.loads((tmp_path / "m.json").read_text())["geometry"] == "contraction"


def test_smoke_pipeline(capsys, pipeline):
    d = pipeline
    ds = load_dataset(d / "d.vmds")
    assert ds.n_records == 10 and ds.geometry == "cavity"
    model = load_model(d / "m.vmn")
    assert model.config.latent_dim == 4 and len(model.meta["history"]["train"]) == 5
    code, out, _ = run(capsys, "evaluate", "--model", str(d / "m.vmn"), "--data", str(d / "d.vmds"),
                       "--out", str(d / "report.json"))
    assert code == 0
    report = json.loads((d / "report.json").read_text())
    assert report["n_records"] == 2 and len(report["histogram"]["density"]) == 30
    code, _, _ = run(capsys, "predict", "--model", str(d / "m.vmn"), "--mu", "5", "--f", "0.4",
                     "--grid", "8x8", "--times", "0.2,0.4", "--out", str(d / "pred.csv"))
    assert code == 0
    rows = (d / "pred.csv").read_text().strip().splitlines()
    assert rows[0] == "x,y,t,u1,u2,p" and len(rows) == 1 + 64 * 2
    code, _, _ = run(capsys, "export-plots", "--model", str(d / "m.vmn"), "--data", str(d / "d.vmds"),
                     "--out-dir", str(d / "plots"))
    assert code == 0
    for name in ("snapshots.csv", "trends.csv", "loss.csv", "error_histogram.csv"):
        assert (d / "plots" / name).is_file() and (d / "plots" / f"{name}.provenance.json").is_file()


def test_provenance_sidecars(pipeline):
    d = pipeline
    gen = json.loads((d / "d.vmds.provenance.json").read_text())
    assert gen["tool"] == "varmion" and gen["version"] == __version__ and gen["command"] == "generate"
    s = gen["settings"]
    assert s["seed"] == 0 and s["generate.instances"] == 10 and s["mesh.n"] == 6 and s["solver.dt"] == 0.01
    tr = json.loads((d / "m.vmn.provenance.json").read_text())
    assert tr["settings"]["train.epochs"] == 5 and "d.vmds" in tr["inputs"]
    import hashlib
    assert tr["output"]["sha256"] == hashlib.sha256((d / "m.vmn").read_bytes()).hexdigest()


def test_config_precedence(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"geometry": "cavity", "mesh": {"n": 4}, "solver": {"dt": 0.1, "tau": 0.5},
                               "lattice": {"nx": 3, "ny": 3, "times": 2}, "generate": {"instances": 3}}))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "a.vmds")]) == 0
    a = load_dataset(tmp_path / "a.vmds")
    assert a.n_records == 3 and a.mesh_params["n"] == 4 and a.lattice.n_times == 2
    # flags beat the file, the bundled geometry config fills the rest
    assert main(["generate", "--config", str(cfg), "--instances", "2", "--n", "3", "--lattice", "4x3",
                 "--out", str(tmp_path / "b.vmds")]) == 0
    b = load_dataset(tmp_path / "b.vmds")
    assert b.n_records == 2 and b.mesh_params["n"] == 3 and (b.lattice.nx, b.lattice.ny) == (4, 3)
    assert b.sensing == "amplitude"
    capsys.readouterr()


def test_data_dir_env(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("VARMION_DATA_DIR", str(tmp_path))
    code, _, _ = run(capsys, "mesh-info", "--geometry", "cavity", "--n", "3", "--out", "sub/m.vmm")
    assert code == 0 and (tmp_path / "sub" / "m.vmm").is_file()


def test_solve(capsys, tmp_path):
    code, out, _ = run(capsys, "solve", "--geometry", "cavity", "--n", "4", "--mu", "2", "--f", "0.5",
                       "--dt", "0.05", "--tau", "1", "--frames", "4", "--out", str(tmp_path / "t.vmtr"))
    assert code == 0
    traj = load_trajectory(tmp_path / "t.vmtr")
    np.testing.assert_allclose(traj.times, [0, 0.25, 0.5, 0.75, 1.0])


def test_spacetime_check(capsys, tmp_path):
    code, out, _ = run(capsys, "spacetime-check", "--out", str(tmp_path / "st.json"))
    assert code == 0 and "additivity" in out and "FAIL" not in out
    assert json.loads((tmp_path / "st.json").read_text())["n_unknowns"] == 99
    code, out, err = run(capsys, "spacetime-check", "--tol", "0")
    assert code == 7 and error_of(err)["error"] == "check-failed"


def test_usage_errors(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 2 and "usage" in err
    code, _, err = run(capsys)
    assert code == 2 and "usage" in err
    code, _, err = run(capsys, "mesh-info", "--geometry", "cavity", "--bogus")
    assert code == 2


def test_error_codes(capsys, tmp_path, pipeline):
    code, _, err = run(capsys, "train", "--data", str(tmp_path / "none.vmds"), "--out", str(tmp_path / "m.vmn"))
    assert code == 3 and error_of(err) == {"error": "missing-file", "exit_code": 3,
                                           "message": error_of(err)["message"]}
    code, _, err = run(capsys, "mesh-info", "--geometry", "cavity", "--n", "1")
    assert code == 4 and error_of(err)["error"] == "invalid-argument"
    code, _, err = run(capsys, "mesh-info", "--config", "smoke", "--geometry", "cylinder")
    assert code == 6 and error_of(err)["error"] == "config-mismatch"
    code, _, err = run(capsys, "mesh-info", "--config", str(tmp_path / "nope.json"), "--geometry", "cavity")
    assert code == 3
    code, _, err = run(capsys, "mesh-info", "--geometry", "cavity", "--threads", "0")
    assert code == 4
    bad = tmp_path / "bad.vmds"
    bad.write_bytes(b"garbage")
    code, _, err = run(capsys, "train", "--data", str(bad), "--out", str(tmp_path / "m.vmn"))
    assert code == 6 and error_of(err)["error"] == "format-error"
    code, _, err = run(capsys, "predict", "--model", str(pipeline / "m.vmn"), "--mu", "5", "--f", "0.4",
                       "--times", "7", "--out", str(tmp_path / "p.csv"))
    assert code == 4


def test_version(capsys):
    code, out, _ = run(capsys, "--version")
    assert code == 0 and __version__ in out
