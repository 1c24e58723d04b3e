from __future__ import annotations

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from magtable.calibkit import synthesize_gradient_records, synthesize_knee_sweep, synthesize_sweeps, write_sweep_csv
from magtable.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from magtable.magmodel import coil_array_from_positions, unit_field_matrices
from magtable.serialization import array_to_dict, fixture_path, load_array, load_control_matrix, read_trace_csv


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def run_json(capsys, *argv):
    code, out, err = run(capsys, *argv)
    assert code == EXIT_OK, err
    return json.loads(out)


def test_field_zero_currents(capsys):
    d = run_json(capsys, "field", "fixture:design_a", "--currents", ",".join(["0"] * 8))
    assert d["b_T"] == [0.0] * 3 and d["g_Tpm"] == [0.0] * 5


def test_field_one_hot_matches_unit_map(capsys, design_a):
    b, g = unit_field_matrices(design_a, [0, 0, 0.02])
    cur = ["0"] * 8
    cur[4] = "1"
    d = run_json(capsys, "field", "fixture:design_a", "--currents", ",".join(cur), "--at", "0,0,0.02")
    assert d["b_T"] == pytest.approx(b[:, 4].tolist(), rel=1e-12)
    assert d["g_Tpm"] == pytest.approx(g[:, 4].tolist(), rel=1e-12, abs=1e-18)


def test_field_grid_csv(capsys, tmp_path):
    out = tmp_path / "grid.csv"
    code, _, err = run(capsys, "field", "fixture:design_a", "--currents", ",".join(["1"] * 8),
                       "--grid", "0,0,0:0.1:11", "--out", out)
    assert code == EXIT_OK, err
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0]) == ["x", "y", "z", "Bx", "By", "Bz", "|B|"]
    mags = [float(r["|B|"]) for r in rows]
    assert len(mags) == 11 and all(b < a for a, b in zip(mags, mags[1:]))


def test_field_wrong_current_count(capsys):
    code, _, err = run(capsys, "field", "fixture:design_a", "--currents", "1,2")
    assert code == EXIT_USAGE and "--currents" in err


def test_allocate_fixture_saturates_at_fitted_limit(capsys):
    cm = load_control_matrix("fixture:supp_table1")
    d = run_json(capsys, "maxfield", "fixture:supp_table1", "--fit-uniform-z-mT", "19.3")
    apu = d["amps_per_unit"]
    at_limit = run_json(capsys, "allocate", "fixture:supp_table1", "--b-mT", "0,0,19.3", "--amps-per-unit", apu)
    assert max(abs(c) for c in at_limit["currents"]) == pytest.approx(1.0, rel=1e-9)
    over = run_json(capsys, "allocate", "fixture:supp_table1", "--b-mT", "0,0,19.4", "--amps-per-unit", apu)
    assert over["saturated"] and not run_json(
        capsys, "allocate", "fixture:supp_table1", "--b-mT", "0,0,19.2", "--amps-per-unit", apu)["saturated"]
    assert cm.n_coils == 8


def test_allocate_zero_field(capsys):
    d = run_json(capsys, "allocate", "fixture:supp_table1", "--b", "0,0,0")
    assert d["currents"] == pytest.approx([0.0] * 8, abs=1e-18)


def test_allocate_nonuniform_needs_less(capsys):
    u = run_json(capsys, "allocate", "fixture:supp_table1", "--b-mT", "5,0,10", "--mode", "uniform")
    n = run_json(capsys, "allocate", "fixture:supp_table1", "--b-mT", "5,0,10", "--mode", "nonuniform")
    assert np.abs(n["currents"]).max() < np.abs(u["currents"]).max()


def test_allocate_requires_field(capsys):
    code, _, _ = run(capsys, "allocate", "fixture:supp_table1")
    assert code == EXIT_USAGE


def test_allocate_rank_deficient_exit_code(capsys, tmp_path):
    arr = coil_array_from_positions([[0, 0, -0.3 - 0.05 * k] for k in range(8)])
    p = tmp_path / "stack.json"
    p.write_text(json.dumps(array_to_dict(arr)))
    code, _, err = run(capsys, "allocate", p, "--b-mT", "0,0,1")
    assert code == EXIT_NUMERIC and "rank deficient" in err


def test_maxfield_fixture(capsys):
    d = run_json(capsys, "maxfield", "fixture:supp_table1", "--fit-uniform-z-mT", "19.3")
    t = d["max_field_mT"]
    entries = [(m, a) for m in t for a in t[m]]
    assert len(entries) == 6
    assert max(entries, key=lambda k: t[k[0]][k[1]]) == ("nonuniform", "z")
    assert t["uniform"]["z"] == pytest.approx(19.3)
    assert all(r >= 2.0 for r in d["ratio_nonuniform_to_uniform"].values())


def test_maxfield_isotropic_toy(capsys, tmp_path):
    m = {"at_m": [0, 0, 0], "rows_field_T_per_unit": np.hstack([np.eye(3), np.zeros((3, 5))]).tolist(),
         "rows_gradient_Tpm_per_unit": np.hstack([np.zeros((5, 3)), np.eye(5)]).tolist(), "source": "dipole"}
    p = tmp_path / "toy.json"
    p.write_text(json.dumps(m))
    t = run_json(capsys, "maxfield", p)["max_field_T"]
    for mode in t.values():
        assert len(set(mode.values())) == 1


def test_optimize_max_iters_zero_echoes(capsys, tmp_path):
    out, trace = tmp_path / "f.json", tmp_path / "t.csv"
    code, _, err = run(capsys, "optimize", "fixture:design_a_initial", "--max-iters", 0, "--out", out, "--trace", trace)
    assert code == EXIT_OK, err
    src = json.loads(fixture_path("design_a_initial").read_text())
    assert json.loads(out.read_text())["layout_params"] == src["layout_params"]
    assert len(read_trace_csv(trace)) == 1


def test_optimize_short_run_monotone_and_reloadable(capsys, tmp_path):
    out, trace = tmp_path / "f.json", tmp_path / "t.csv"
    code, stdout, err = run(capsys, "optimize", "fixture:design_a_initial", "--max-iters", 40, "--out", out, "--trace", trace)
    assert code == EXIT_OK, err
    fs = [r.F for r in read_trace_csv(trace)]
    assert all(b <= a for a, b in zip(fs, fs[1:]))
    assert len(load_array(out)) == 8
    assert json.loads(stdout)["iterations"] == 40


def test_optimize_random_seed_deterministic(capsys, tmp_path):
    outs = []
    for k in range(2):
        out, trace = tmp_path / f"f{k}.json", tmp_path / f"t{k}.csv"
        code, _, err = run(capsys, "optimize", "--random-init", 8, "--seed", 11, "--max-iters", 5,
                           "--out", out, "--trace", trace)
        assert code == EXIT_OK, err
        outs.append((out.read_bytes(), trace.read_bytes()))
    assert outs[0] == outs[1]


def test_optimize_usage_errors(capsys, tmp_path):
    assert run(capsys, "optimize", "--random-init", 8, "--out", tmp_path / "a", "--trace", tmp_path / "b")[0] == EXIT_USAGE
    assert run(capsys, "optimize", "--out", tmp_path / "a", "--trace", tmp_path / "b")[0] == EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        main(["optimize", "--max-iters", "many"])
    assert info.value.code == EXIT_USAGE


def test_optimize_infeasible_without_projection(capsys, tmp_path):
    d = json.loads(fixture_path("design_c_initial").read_text())
    lp = np.array(d["layout_params"])
    lp[16:24] += 0.2  # lift every coil through the z = 0 barrier
    d["layout_params"] = lp.tolist()
    p = tmp_path / "up.json"
    p.write_text(json.dumps(d))
    code, _, err = run(capsys, "optimize", p, "--no-project", "--max-iters", 1,
                       "--out", tmp_path / "o.json", "--trace", tmp_path / "t.csv")
    assert code == EXIT_NUMERIC and "top height" in err


def test_analyze_design_a(capsys):
    d = run_json(capsys, "analyze", "fixture:design_a")
    assert d["conditioning"]["field"]["condition_number"] == pytest.approx(1.64, abs=0.15)
    assert d["accessibility"]["apex_angle_deg"] == pytest.approx(222, abs=15)


def test_analyze_empty_obstructions(capsys, tmp_path):
    p = tmp_path / "obs.json"
    p.write_text("[]")
    d = run_json(capsys, "analyze", "fixture:design_a", "--obstructions", p, "--resolution", 2000)
    assert d["accessibility"]["apex_angle_deg"] == 360.0


def test_analyze_matrix_input(capsys):
    d = run_json(capsys, "analyze", "fixture:supp_table1")
    assert d["source"] == "calibrated" and d["accessibility"] is None


def test_analyze_design_ordering(capsys):
    cns = {
        name: run_json(capsys, "analyze", f"fixture:{name}", "--no-accessibility")["conditioning"]["field"]["condition_number"]
        for name in ("design_a", "design_b", "design_c")
    }
    assert cns["design_b"] < cns["design_c"] < cns["design_a"]


def _write_bundle(tmp_path, knee=False):
    arr = load_array("fixture:design_a")
    at = np.zeros(3)
    sweeps = synthesize_sweeps(arr, at, noise=1e-3, rng=np.random.default_rng(3))
    if knee:
        sweeps = [r for r in sweeps if r.coil_index != 2]
        slope = unit_field_matrices(arr, at)[0][:, 2]
        sweeps += synthesize_knee_sweep(slope, knee_A=20.0, coil_index=2)
    write_sweep_csv(tmp_path / "sweeps.csv", sweeps)
    write_sweep_csv(tmp_path / "grads.csv", synthesize_gradient_records(arr, at, step=1e-4))
    return arr


def test_calibrate_roundtrip(capsys, tmp_path):
    from magtable.allocator import build_control_matrix

    arr = _write_bundle(tmp_path)
    code, _, err = run(capsys, "calibrate", tmp_path / "sweeps.csv", tmp_path / "grads.csv",
                       "--amps-per-unit", 1.0, "--out", tmp_path / "m.json", "--report", tmp_path / "r.json")
    assert code == EXIT_OK, err
    got = load_control_matrix(tmp_path / "m.json").stacked
    ref = build_control_matrix(arr, [0, 0, 0]).stacked
    mask = np.abs(ref) > 0.01 * np.abs(ref).max(axis=0, keepdims=True)
    assert (np.abs(got - ref)[mask] / np.abs(ref[mask])).max() < 0.01
    assert json.loads((tmp_path / "r.json").read_text())["saturation_flagged"] == []


def test_calibrate_flags_knee(capsys, tmp_path):
    _write_bundle(tmp_path, knee=True)
    code, _, err = run(capsys, "calibrate", tmp_path / "sweeps.csv", tmp_path / "grads.csv",
                       "--out", tmp_path / "m.json", "--report", tmp_path / "r.json")
    assert code == EXIT_OK, err
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["saturation_flagged"] == [2]
    assert 18 <= rep["coils"][2]["saturation_onset_A"] <= 22


def test_calibrate_empty_csv(capsys, tmp_path):
    (tmp_path / "e.csv").write_text("")
    code, _, err = run(capsys, "calibrate", tmp_path / "e.csv", tmp_path / "e.csv", "--out", tmp_path / "m.json")
    assert code == EXIT_USAGE and "empty" in err


def test_module_entry_point_exit_codes():
    ok = subprocess.run([sys.executable, "-m", "magtable", "analyze", "fixture:design_a", "--no-accessibility"],
                        capture_output=True, text=True)
    assert ok.returncode == 0 and "condition_number" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "magtable", "nonsense"], capture_output=True, text=True)
    assert bad.returncode == 2
