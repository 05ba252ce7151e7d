import csv
import json

import numpy as np
import pytest

from cbicurves.calibrate import synthetic_surface
from cbicurves.cli import main
from cbicurves.curves import VolSurface, write_discount_csv, write_forward_csv, write_surface_csv
from cbicurves.synthetic import flat_curves, table3_params


def write_inputs(root, params=None, curves=None):
    params = params or table3_params()
    curves = curves or flat_curves()
    root.mkdir(parents=True, exist_ok=True)
    params.write(root / "params.json")
    write_discount_csv(root / "ois.csv", curves.discount)
    args = ["--params", str(root / "params.json"), "--discount", str(root / "ois.csv")]
    for fc in curves.forwards:
        path = root / f"fwd_{fc.tenor}.csv"
        write_forward_csv(path, fc)
        args += ["--forward", f"{fc.tenor}={path}"]
    return args


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def inputs(tmp_path):
    return write_inputs(tmp_path / "in")


def test_fit_writes_artifacts(tmp_path, inputs):
    out = tmp_path / "fit"
    assert main(["fit", *inputs, "--out", str(out)]) == 0
    rows = read_rows(out / "fit_quality.csv")
    assert max(abs(float(r["rel_error"])) for r in rows) < 1e-8
    art = json.loads((out / "model.json").read_text())
    assert art["params"]["alpha"] == 1.31753 and len(art["c"]) == 2
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "fit" and len(man["hashes"]) == 4


def test_fit_degenerate_params_reproduce_discount(tmp_path):
    args = write_inputs(tmp_path / "in", params=table3_params(beta=[0.0, 0.0], y0=[0.0, 0.0]))
    assert main(["fit", *args, "--out", str(tmp_path / "o")]) == 0
    art = json.loads((tmp_path / "o" / "model.json").read_text())
    grid = np.array(art["grid"])
    assert np.allclose(art["Lambda"], -np.log(flat_curves().discount(grid)), rtol=1e-12, atol=1e-15)


def test_missing_tenor_exits_2(tmp_path, inputs, capsys):
    args = inputs[:-2]  # drop the 6M forward curve
    assert main(["fit", *args, "--out", str(tmp_path / "o")]) == 2
    assert "0.5" in capsys.readouterr().err


def test_bad_arguments_exit_2(tmp_path, inputs):
    assert main(["price", *inputs, "--product", "swap"]) == 2
    assert main(["price", *inputs, "--threads", "0", "--out", str(tmp_path / "o")]) == 2
    assert main(["price", *inputs, "--product", "caplet", "--out", str(tmp_path / "o")]) == 2


def test_bond_at_zero_is_one(tmp_path, inputs):
    out = tmp_path / "p"
    assert main(["price", *inputs, "--product", "bond", "--expiry", "0,1", "--out", str(out)]) == 0
    rows = read_rows(out / "prices.csv")
    assert float(rows[0]["price"]) == 1.0
    assert float(rows[1]["price"]) == pytest.approx(flat_curves().discount(1.0), rel=1e-12)


def test_convexity_row_error_and_exit_3(tmp_path, inputs):
    out = tmp_path / "c"
    assert main(["price", *inputs, "--product", "convexity", "--expiry", "1", "--out", str(out)]) == 3
    row = read_rows(out / "prices.csv")[0]
    assert row["price"] == "" and "ConvexityNotFinite" in row["error"]


def test_convexity_zero_for_degenerate_model(tmp_path):
    args = write_inputs(tmp_path / "in", params=table3_params(beta=[0.0, 0.0], y0=[0.0, 0.0]))
    out = tmp_path / "c"
    assert main(["price", *args, "--product", "convexity", "--expiry", "1,2", "--out", str(out)]) == 0
    assert all(abs(float(r["price"])) < 1e-14 for r in read_rows(out / "prices.csv"))


def test_fft_at_default_grid_is_a_numeric_failure(tmp_path, inputs):
    out = tmp_path / "f"
    assert main(["price", *inputs, "--strike", "0.03", "--out", str(out)]) == 3
    assert "FFTGridError" in read_rows(out / "prices.csv")[0]["error"]


def test_fft_with_auto_mesh(tmp_path, inputs):
    out = tmp_path / "f"
    assert main(["price", *inputs, "--strike", "0.01,0.03", "--fft-mesh", "auto", "--out", str(out)]) == 0
    prices = [float(r["price"]) for r in read_rows(out / "prices.csv")]
    assert prices == pytest.approx([0.00617236, 0.00181814], abs=1e-6)


def test_model_artifact_as_input(tmp_path, inputs):
    assert main(["fit", *inputs, "--out", str(tmp_path / "fit")]) == 0
    out = tmp_path / "p"
    assert main(["price", "--model", str(tmp_path / "fit" / "model.json"), "--product", "fra",
                 "--tenor", "0.5", "--expiry", "2", "--strike", "0.04", "--out", str(out)]) == 0
    rows = read_rows(out / "prices.csv")
    assert float(rows[0]["price"]) == pytest.approx(0.04, rel=1e-9)
    assert abs(float(rows[1]["price"])) < 1e-12


def sim_args(inputs, out, threads=1):
    return ["simulate", *inputs, "--paths", "300", "--steps", "100", "--horizon", "2", "--seed", "11",
            "--threads", str(threads), "--out", str(out)]


def test_simulate_outputs(tmp_path, inputs):
    out = tmp_path / "s"
    assert main(sim_args(inputs, out)) == 0
    stats = json.loads((out / "stats.json").read_text())
    assert stats["ordering_violations"] == 0
    assert stats["clusters"]["common_jump_fraction"] == [1.0, 1.0]
    assert read_rows(out / "paths.csv")[0]["path_id"] == "0"


def snapshot(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_simulate_deterministic_across_threads(tmp_path, inputs):
    out = tmp_path / "s"
    assert main(sim_args(inputs, out, threads=1)) == 0
    first = snapshot(out)
    assert main(sim_args(inputs, out, threads=2)) == 0
    assert snapshot(out) == first


def test_manifest_replay(tmp_path, inputs):
    out = tmp_path / "s"
    assert main(sim_args(inputs, out)) == 0
    first = snapshot(out)
    (tmp_path / "m.json").write_bytes(first["manifest.json"])
    assert main(["simulate", "--manifest", str(tmp_path / "m.json"), "--out", str(out), "--threads", "3"]) == 0
    assert snapshot(out) == first


def test_manifest_replay_refuses_changed_inputs(tmp_path, inputs):
    out = tmp_path / "b"
    assert main(["price", *inputs, "--product", "bond", "--out", str(out)]) == 0
    table3_params(b=0.06).write(tmp_path / "in" / "params.json")
    assert main(["price", "--manifest", str(out / "manifest.json"), "--out", str(out)]) == 2
    assert main(["simulate", "--manifest", str(out / "manifest.json"), "--out", str(out)]) == 2


def test_malformed_surface_row(tmp_path, inputs, capsys):
    path = tmp_path / "surface.csv"
    path.write_text("expiry_years,strike,tenor_years,normal_vol_abs\n1,0.03,0.25,0.01\n2,0.03,abc,0.01\n")
    assert main(["calibrate", *inputs, "--surface", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "row 3" in capsys.readouterr().err


def test_calibrate_with_freeze(tmp_path, inputs):
    surf = synthetic_surface(table3_params(), flat_curves(), expiries=(1.0,), strikes=(0.03, 0.05), tenor_idx=[0])
    path = tmp_path / "surface.csv"
    write_surface_csv(path, surf)
    out = tmp_path / "cal"
    code = main(["calibrate", *inputs, "--surface", str(path), "--free", "eta,alpha", "--freeze", "alpha",
                 "--max-iter", "3", "--out", str(out)])
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["free"] == ["eta"]
    assert rep["final"]["alpha"] == rep["initial"]["alpha"]
    assert rep["rms_vol_bp"] < 1e-3
    assert json.loads((out / "params_calibrated.json").read_text())["alpha"] == 1.31753


def test_moments(tmp_path, inputs):
    out = tmp_path / "m"
    assert main(["moments", *inputs, "--expiry", "1,5", "--out", str(out)]) == 0
    res = json.loads((out / "moments.json").read_text())
    assert res["stable"] is True
    assert res["theta_eff"] == pytest.approx(0.0507 / 0.0407)
    assert res["tenors"][0]["expiries"][0]["futures_convexity"] is None
