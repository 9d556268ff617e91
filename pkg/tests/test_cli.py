import json

import numpy as np
import pytest
import scipy.ndimage

from lsdfem import cli, presets
from lsdfem.coeff import local_bounds
from lsdfem.mesh import build_structured_mesh, refine_faces


def write_spec(tmp_path, payload, name="spec.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


BASE = {
    "experiment": "solve",
    "config": {"nx": 2, "ny": 2, "face_level": 1, "coefficient": "smooth", "j": 1},
}


def test_bad_json_exits_2(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{"experiment": "solve",')
    code = cli.main(["--config", str(path), "--out", str(tmp_path / "o")])
    assert code == 2
    err = capsys.readouterr().err
    assert "line" in err and "col" in err


def test_unknown_experiment_exits_2(tmp_path, capsys):
    path = write_spec(tmp_path, {**BASE, "experiment": "frobnicate"})
    assert cli.main(["--config", path, "--out", str(tmp_path / "o")]) == 2


def test_unknown_config_key_exits_2(tmp_path):
    path = write_spec(tmp_path, {"experiment": "solve", "config": {"nx": 2, "zz": 1}})
    assert cli.main(["--config", path, "--out", str(tmp_path / "o")]) == 2


def test_solve_writes_outputs(tmp_path):
    out = tmp_path / "out"
    path = write_spec(tmp_path, BASE)
    assert cli.main(["--config", path, "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["diagnostics"]["equilibrium_rel_max"] <= 1e-10
    assert (out / "multiplier.bin").exists()
    assert (out / "solution_summary.csv").exists()
    assert (out / "solution_nodal.csv").exists()
    rows = (out / "solution_summary.csv").read_text().strip().splitlines()
    assert "config_hash" in rows[0]


def test_decay_experiment(tmp_path):
    out = tmp_path / "decay"
    spec = {
        "experiment": "decay",
        "config": {"nx": 4, "ny": 4, "face_level": 1, "coefficient": "smooth", "variant": "plain"},
    }
    path = write_spec(tmp_path, spec)
    assert cli.main(["--config", path, "--out", str(out)]) == 0
    payload = json.loads((out / "decay.json").read_text())
    assert 0 < payload["fit"]["plain"]["ratio"] < 1
    lines = (out / "decay.csv").read_text().strip().splitlines()
    assert lines[0].startswith("variant,seed_element,ring")


def test_j_sweep_error_nonincreasing(tmp_path):
    out = tmp_path / "jsweep"
    spec = {
        "experiment": "j_sweep",
        "config": {"nx": 4, "ny": 4, "face_level": 1, "coefficient": "smooth"},
        "sweep": {"j": [1, 2, 3, 8]},
    }
    path = write_spec(tmp_path, spec)
    assert cli.main(["--config", path, "--out", str(out)]) == 0
    rows = json.loads((out / "j_sweep.json").read_text())["rows"]
    errs = [r["relative_error"] for r in rows]
    assert all(b <= a * (1 + 1e-9) for a, b in zip(errs, errs[1:]))
    assert errs[-1] <= 1e-9


def test_reproducibility_bitwise(tmp_path):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    spec = {
        "experiment": "decay",
        "seed": 42,
        "config": {"nx": 2, "ny": 2, "face_level": 1, "coefficient": "checkerboard"},
        "sweep": {"random_probe": True},
    }
    path = write_spec(tmp_path, spec)
    assert cli.main(["--config", path, "--out", str(out_a)]) == 0
    assert cli.main(["--config", path, "--out", str(out_b)]) == 0
    assert (out_a / "decay.csv").read_bytes() == (out_b / "decay.csv").read_bytes()


def test_env_override(tmp_path, monkeypatch):
    out = tmp_path / "envout"
    path = write_spec(tmp_path, BASE)
    monkeypatch.setenv("LSDFEM_OUT", str(out))
    assert cli.main(["--config", path]) == 0
    assert (out / "report.json").exists()


def test_list_presets(capsys):
    assert cli.main(["--list-presets"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert "channel" in payload["coefficients"]


# -- preset properties ------------------------------------------------------------


def test_channel_contrast_one_is_constant():
    part = refine_faces(build_structured_mesh(2, 2), 1)
    chan = presets.coefficient_field(part, "channel", {"contrast": 1.0})
    const = presets.coefficient_field(part, "constant", {"value": 1.0})
    for a, b in zip(chan.tensors, const.tensors):
        assert np.array_equal(a, b)


@pytest.mark.parametrize("count", [1, 3, 5])
def test_inclusions_component_count(count):
    raster = presets.make_raster("inclusions", {"count": count, "contrast": 100.0}, nx=128, ny=128)
    labeled, found = scipy.ndimage.label(raster.values > 1.0)
    assert found == count


def test_checkerboard_contrast_matches_stats():
    # Checker tiles finer than the elements: every element sees both values.
    part = refine_faces(build_structured_mesh(4, 4), 1)
    field = presets.coefficient_field(part, "checkerboard", {"contrast": 250.0, "cells": 8})
    stats = local_bounds(field)
    assert stats.kappa == pytest.approx(250.0)


def test_hairpin_channel_is_single_component():
    raster = presets.make_raster(
        "channel",
        {"contrast": 10.0, "center": 0.4375, "width": 0.03, "spacing": 0.06, "turn_x": 0.8},
        nx=256,
        ny=256,
    )
    labeled, found = scipy.ndimage.label(raster.values > 1.0)
    assert found == 1


def test_contrast_sweep_experiment(tmp_path):
    out = tmp_path / "cs"
    spec = {
        "experiment": "contrast_sweep",
        "config": {
            "nx": 4, "ny": 4, "face_level": 1, "alpha_stab": 10.0,
            "coefficient": "channel",
            "coefficient_params": {"center": 0.375, "width": 0.06, "spacing": 0.12, "turn_x": 0.75},
        },
        "sweep": {"contrasts": [1e2, 1e4]},
    }
    path = write_spec(tmp_path, spec)
    assert cli.main(["--config", path, "--out", str(out)]) == 0
    rows = json.loads((out / "contrast_sweep.json").read_text())["rows"]
    assert len(rows) == 4  # two contrasts x two variants
    assert {r["variant"] for r in rows} == {"plain", "delta"}
    assert all("worst_step" in r and "config_hash" in r for r in rows)


def test_h_convergence_experiment(tmp_path):
    out = tmp_path / "hc"
    spec = {
        "experiment": "h_convergence",
        "config": {"face_level": 1, "coefficient": "smooth", "j": 4},
        "sweep": {"nx": [2, 4]},
    }
    path = write_spec(tmp_path, spec)
    assert cli.main(["--config", path, "--out", str(out)]) == 0
    rows = json.loads((out / "h_convergence.json").read_text())["rows"]
    assert len(rows) == 2
    assert rows[1]["energy_error"] < rows[0]["energy_error"]
    assert rows[1]["rate"] > 0.5


def test_rhs_reduction_experiment(tmp_path):
    out = tmp_path / "rr"
    spec = {
        "experiment": "rhs_reduction",
        "config": {"nx": 4, "ny": 4, "face_level": 1, "coefficient": "inclusions",
                   "coefficient_params": {"count": 2, "contrast": 100.0}},
    }
    path = write_spec(tmp_path, spec)
    assert cli.main(["--config", path, "--out", str(out)]) == 0
    rows = json.loads((out / "rhs_reduction.json").read_text())["rows"]
    assert len(rows) == 2
    assert all(r["bound_satisfied"] for r in rows)


def test_solve_writes_flux_export(tmp_path):
    out = tmp_path / "fx"
    path = write_spec(tmp_path, BASE)
    assert cli.main(["--config", path, "--out", str(out)]) == 0
    lines = (out / "flux_cells.csv").read_text().strip().splitlines()
    assert lines[0] == "element,cell,x,y,sigma_x,sigma_y"


def test_decay_on_channel_has_monotone_tail(tmp_path):
    out = tmp_path / "chdecay"
    spec = {
        "experiment": "decay",
        "config": {"nx": 8, "ny": 8, "face_level": 1, "coefficient": "channel",
                   "coefficient_params": {"contrast": 100.0}, "variant": "plain"},
    }
    path = write_spec(tmp_path, spec)
    assert cli.main(["--config", path, "--out", str(out)]) == 0
    rows = [
        line.split(",") for line in (out / "decay.csv").read_text().strip().splitlines()[1:]
    ]
    energies = [float(r[3]) for r in rows if r[0] == "plain"]
    total = sum(energies)
    for a, b in zip(energies[2:], energies[3:]):
        assert b <= a * (1 + 1e-12) + 1e-14 * total
