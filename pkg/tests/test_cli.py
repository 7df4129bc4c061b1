import json
import os

import numpy as np
import pytest

from xfft.cli import (
    EXIT_BAD_CONFIG,
    EXIT_OK,
    ConfigError,
    RunConfig,
    dump_field,
    load_config,
    main,
    read_field,
)

HASHIN_CFG = os.path.join(os.path.dirname(__file__), "..", "configs", "hashin.json")
LAMINATE_CFG = os.path.join(os.path.dirname(__file__), "..", "configs", "laminate.json")


def minimal_config(**overrides):
    cfg = {
        "grid": {"n": [4, 4, 4], "lengths": [16.0, 16.0, 16.0]},
        "phases": [{"name": "m", "young": 1.5, "poisson": 0.25}],
        "geometry": [],
        "loading": [1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
        "solver": {"scheme": "lcg", "tol": 1e-8, "maxit": 50},
    }
    cfg.update(overrides)
    return cfg


def test_bundled_configs_parse():
    cfg = load_config(HASHIN_CFG)
    assert cfg.n == (16, 16, 16)
    assert cfg.phase_names == ["matrix", "coating", "inclusion"]
    assert cfg.assembly.n_interfaces == 2
    load_config(LAMINATE_CFG)


def test_unknown_key_rejected_with_path():
    with pytest.raises(ConfigError, match="unknown key"):
        RunConfig(minimal_config(extra=1))
    with pytest.raises(ConfigError, match=r"grid"):
        RunConfig(minimal_config(grid={"n": [4, 4, 4], "lengths": [1, 1, 1], "x": 0}))


def test_undefined_phase_rejected():
    cfg = minimal_config(
        geometry=[
            {
                "type": "sphere",
                "center": [8, 8, 8],
                "radius": 2.0,
                "inside": "nope",
                "outside": "m",
            }
        ]
    )
    with pytest.raises(ConfigError, match="phase 'nope' not defined"):
        RunConfig(cfg)


def test_invalid_values_rejected():
    with pytest.raises(ConfigError, match="poisson|Poisson"):
        RunConfig(
            minimal_config(phases=[{"name": "m", "young": 1.0, "poisson": 0.7}])
        )
    with pytest.raises(ConfigError, match="loading"):
        RunConfig(minimal_config(loading=[1, 0, 0]))
    with pytest.raises(ConfigError, match="scheme"):
        RunConfig(minimal_config(solver={"scheme": "gauss"}))


def test_malformed_json_line_anchored(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n "grid": [,]\n}\n')
    with pytest.raises(ConfigError, match="line 2"):
        load_config(str(p))


def test_cli_solve_homogeneous(tmp_path, capsys):
    p = tmp_path / "homog.json"
    p.write_text(json.dumps(minimal_config()))
    code = main(["solve", "--config", str(p), "--out", str(tmp_path)])
    assert code == EXIT_OK
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["converged"]
    assert summary["iterations"] <= 1
    # <sigma> = C eps for the homogeneous cell: K=1 -> sigma_ii = 3K = 3
    assert np.allclose(summary["average_stress"][:3], 3.0, rtol=1e-10)
    csv = (tmp_path / "convergence.csv").read_text().splitlines()
    assert csv[0] == "iteration,res,res_rel,wall_time"
    assert len(csv) >= 2


def test_cli_solve_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["solve", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_BAD_CONFIG
    p = tmp_path / "shortrun.json"
    cfg = minimal_config()
    cfg["geometry"] = [
        {
            "type": "sphere",
            "center": [8, 8, 8],
            "radius": 5.0,
            "inside": "i",
            "outside": "m",
        }
    ]
    cfg["phases"].append({"name": "i", "young": 15.0, "poisson": 0.25})
    cfg["solver"] = {"scheme": "lcg", "tol": 1e-13, "maxit": 2}
    p.write_text(json.dumps(cfg))
    assert main(["solve", "--config", str(p), "--out", str(tmp_path)]) == 3


def test_cli_determinism(tmp_path):
    cfg = minimal_config()
    cfg["geometry"] = [
        {
            "type": "sphere",
            "center": [8, 8, 8],
            "radius": 5.0,
            "inside": "i",
            "outside": "m",
        }
    ]
    cfg["phases"].append({"name": "i", "young": 15.0, "poisson": 0.25})
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        assert main(["solve", "--config", str(p), "--out", str(out)]) == EXIT_OK
        rows = (out / "convergence.csv").read_text().splitlines()
        outs.append([r.rsplit(",", 1)[0] for r in rows])  # strip wall time
    assert outs[0] == outs[1]


def test_field_dump_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((3, 4, 5, 3))
    base = str(tmp_path / "field")
    dump_field(base, arr, {"field": "test"})
    back = read_field(base)
    assert np.array_equal(back, arr)
    desc = json.loads((tmp_path / "field.json").read_text())
    assert desc["dtype"] == "<f8"
    assert desc["shape"] == [3, 4, 5, 3]
    # raw bytes are x-fastest: stride check on a marker value
    flat = np.fromfile(base + ".f64", dtype="<f8")
    assert flat[3] == arr[1, 0, 0, 0]  # second x-index comes after 3 components


def test_cli_solve_with_field_dump(tmp_path):
    cfg = minimal_config(outputs={"fields": True})
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    assert main(["solve", "--config", str(p), "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "displacement.f64").exists()
    assert (tmp_path / "displacement.vtk").exists()
    back = read_field(str(tmp_path / "displacement"))
    assert back.shape == (4, 4, 4, 3)
    assert np.allclose(back, 0.0)  # homogeneous cell: zero fluctuation


def test_cli_sweep_requires_ns_and_writes_study(tmp_path):
    cfg = minimal_config()
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    assert main(["sweep", "--config", str(p), "--out", str(tmp_path)]) == EXIT_BAD_CONFIG
    cfg["outputs"] = {"study_ns": [2, 4]}
    p.write_text(json.dumps(cfg))
    assert main(["sweep", "--config", str(p), "--out", str(tmp_path)]) == EXIT_OK
    rows = (tmp_path / "study.csv").read_text().splitlines()
    assert rows[0].startswith("n,h,bulk_response")
    assert len(rows) == 3  # header + 2 resolutions, no slope for < 3


def test_cli_validate_homogeneous_and_laminate():
    assert main(["validate", "homogeneous"]) == EXIT_OK
    assert main(["validate", "laminate"]) == EXIT_OK


def test_cli_symbol_dump(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(minimal_config()))
    assert main(["symbol-dump", "--config", str(p), "--out", str(tmp_path)]) == EXIT_OK
    desc = json.loads((tmp_path / "green_symbol.json").read_text())
    raw = np.fromfile(tmp_path / "green_symbol.c16", dtype="<c16")
    assert raw.size == np.prod(desc["shape"])


def test_cli_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("XFFT_THREADS", "2")
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(minimal_config()))
    assert main(["solve", "--config", str(p), "--out", str(tmp_path)]) == EXIT_OK
    import xfft.greenop as go

    assert go._FFT_WORKERS == 2
    # flag wins over the environment
    assert main(["--threads", "1", "solve", "--config", str(p), "--out", str(tmp_path)]) == EXIT_OK
    assert go._FFT_WORKERS == 1
