"""End-to-end checks of the command-line pipeline.

Each subcommand is exercised through click's test runner: outputs land on
disk, manifests describe the run, exit codes follow the documented mapping
(0 success, 2 validation, 3 non-convergence, 4 I/O), and repeated runs with
the same seed reproduce the same bytes.
"""

import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from laborpath.cli import LIFETIME_SCENARIOS, main

MANIFEST_KEYS = {
    "subcommand",
    "flags",
    "seed",
    "inputs",
    "outputs",
    "artifact_version",
    "wall_clock_seconds",
    "convergence",
}

PANEL_HEADER = "person_id,year,state,log_wage,female,educ,first_xp"


def run_cli(args, expect=0):
    runner = CliRunner()
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == expect, (
        f"exit {result.exit_code} != {expect}\n"
        f"stdout: {result.output}\nstderr: {result.stderr}"
    )
    return result


def read_manifest(path):
    with open(path) as fh:
        doc = json.load(fh)
    assert MANIFEST_KEYS <= set(doc)
    return doc


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    """A generated panel shared by the read-only subcommand tests."""
    root = tmp_path_factory.mktemp("cohort")
    panel = root / "panel.csv"
    run_cli([
        "generate", "--n", "400", "--start-year", "2012", "--end-year", "2015",
        "--seed", "7", "--out", str(panel),
    ])
    return root


def test_generate_writes_panel_classes_and_manifest(tmp_path):
    out = tmp_path / "panel.csv"
    run_cli(["generate", "--n", "40", "--seed", "3", "--out", str(out)])

    classes = tmp_path / "panel.classes.csv"
    manifest = tmp_path / "panel.manifest.json"
    assert out.exists() and classes.exists() and manifest.exists()

    doc = read_manifest(manifest)
    assert doc["subcommand"] == "generate"
    assert doc["seed"] == 3
    assert doc["flags"]["n"] == 40
    assert doc["convergence"] is None
    assert str(out) in doc["outputs"] and str(classes) in doc["outputs"]

    header = out.read_text().splitlines()[0]
    assert header == PANEL_HEADER
    class_lines = classes.read_text().splitlines()
    assert class_lines[0] == "person_id,km,ky"
    assert len(class_lines) == 41  # header + one row per person


def test_generate_same_seed_reproduces_bytes(tmp_path):
    outs = []
    for name, seed in (("a.csv", 11), ("b.csv", 11), ("c.csv", 12)):
        out = tmp_path / name
        run_cli(["generate", "--n", "30", "--seed", str(seed), "--out", str(out)])
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    assert (tmp_path / "a.classes.csv").read_bytes() == (
        tmp_path / "b.classes.csv"
    ).read_bytes()
    assert outs[0].read_bytes() != outs[2].read_bytes()


def test_generate_rejects_shares_not_summing_to_one(tmp_path):
    out = tmp_path / "panel.csv"
    result = run_cli(
        ["generate", "--n", "10", "--educ-shares", "0.5,0.2,0.2",
         "--out", str(out)],
        expect=2,
    )
    assert "error" in result.stderr.lower()
    assert not out.exists()


def test_prepare_cleans_and_reports(tmp_path):
    raw = tmp_path / "raw.csv"
    raw.write_text("\n".join([
        PANEL_HEADER,
        "1,2012,1,10.0,0,0,0.0",
        "1,2013,1,10.1,0,0,0.0",
        "1,2015,1,10.2,0,0,0.0",   # 2014 missing: interior gap
        "2,2012,1,10.0,1,1,0.5",   # single spell: dropped
        "3,2012,1,9.9,1,2,0.0",
        "3,2013,1,10.0,1,2,0.0",
        "3,2014,1,10.05,1,2,0.0",  # stops before 2015: trailing gap
    ]) + "\n")

    out = tmp_path / "prepared.csv"
    run_cli(["prepare", "--in", str(raw), "--out", str(out)])

    doc = read_manifest(tmp_path / "prepared.manifest.json")
    assert doc["preparation"] == {
        "malformed_rows": 0,
        "dropped_short": [2],
        "imputed_rows": 2,
        "wages_clamped": 0,       # every (state, year) cell is tiny
        "winsor_cells_skipped": 4,
    }

    rows = [line.split(",") for line in out.read_text().splitlines()[1:]]
    by_person = {}
    for r in rows:
        by_person.setdefault(int(r[0]), []).append(r)
    assert set(by_person) == {1, 3}
    p1 = {int(r[1]): r for r in by_person[1]}
    assert sorted(p1) == [2012, 2013, 2014, 2015]
    assert p1[2014][2] == "0" and p1[2014][3] == ""  # imputed non-employment
    p3 = {int(r[1]): r for r in by_person[3]}
    assert sorted(p3) == [2012, 2013, 2014, 2015]
    assert p3[2015][2] == "0" and p3[2015][3] == ""


@pytest.fixture(scope="module")
def small_prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("estimate")
    panel = root / "panel.csv"
    prepared = root / "prepared.csv"
    run_cli([
        "generate", "--n", "120", "--start-year", "2012", "--end-year", "2015",
        "--seed", "5", "--out", str(panel),
    ])
    run_cli(["prepare", "--in", str(panel), "--out", str(prepared)])
    return prepared


def test_estimate_single_class_run(tmp_path, small_prepared):
    out = tmp_path / "est.json"
    run_cli([
        "estimate", "--panel", str(small_prepared), "--km", "1", "--ky", "1",
        "--seed", "4", "--out", str(out),
    ])

    from laborpath.panel_io import load_params

    ps = load_params(out)
    assert ps.config.K_m == 1 and ps.config.K_y == 1
    ps.mobility.validate(ps.config.K_m)
    ps.income.validate(ps.config.K_m, ps.config.K_y)

    trace_lines = (tmp_path / "est.trace.csv").read_text().splitlines()
    assert trace_lines[0] == "phase,iteration,loglik,distance,step_scale"
    by_phase = {}
    for line in trace_lines[1:]:
        phase, _it, ll, _dist, _scale = line.split(",")
        by_phase.setdefault(phase, []).append(float(ll))
    for phase, logliks in by_phase.items():
        diffs = np.diff(logliks)
        assert (diffs >= -1e-8).all(), f"{phase} log-likelihood decreased"

    doc = read_manifest(tmp_path / "est.manifest.json")
    assert doc["convergence"]["converged"] is True
    assert doc["convergence"]["em_steps"] == len(trace_lines) - 1
    assert doc["convergence"]["loglik"] == pytest.approx(by_phase["joint"][-1])


def test_estimate_flags_override_config_file(tmp_path, small_prepared):
    from laborpath.params import ModelConfig

    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(ModelConfig().with_(K_m=2, K_y=2).to_dict()))
    out = tmp_path / "est.json"
    run_cli([
        "estimate", "--panel", str(small_prepared), "--config", str(cfg_path),
        "--km", "1", "--ky", "1", "--seed", "4", "--out", str(out),
    ])
    saved = json.loads(out.read_text())
    assert saved["config"]["K_m"] == 1 and saved["config"]["K_y"] == 1
    doc = read_manifest(tmp_path / "est.manifest.json")
    assert str(cfg_path) in doc["inputs"]


def test_estimate_iteration_cap_exits_3_but_writes_outputs(tmp_path, small_prepared):
    out = tmp_path / "est.json"
    run_cli([
        "estimate", "--panel", str(small_prepared), "--km", "1", "--ky", "1",
        "--max-em-iter", "1", "--em-tol", "1e-12", "--seed", "4",
        "--out", str(out),
    ], expect=3)
    assert out.exists()
    assert (tmp_path / "est.trace.csv").exists()
    doc = read_manifest(tmp_path / "est.manifest.json")
    assert doc["convergence"]["converged"] is False


def test_predict_is_deterministic(tmp_path, cohort):
    outs = []
    for name in ("p1.csv", "p2.csv"):
        out = tmp_path / name
        run_cli([
            "predict", "--panel", str(cohort / "panel.csv"),
            "--end-year", "2018", "--seed", "9", "--out", str(out),
        ])
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    assert (tmp_path / "p1.classes.csv").read_bytes() == (
        tmp_path / "p2.classes.csv"
    ).read_bytes()

    years = {
        int(line.split(",")[1]) for line in outs[0].read_text().splitlines()[1:]
    }
    assert max(years) == 2018

    out3 = tmp_path / "p3.csv"
    run_cli([
        "predict", "--panel", str(cohort / "panel.csv"), "--end-year", "2018",
        "--seed", "9", "--draw-initial", "--out", str(out3),
    ])
    assert out3.exists()


def test_lifetime_emits_all_scenarios_by_default(tmp_path, cohort):
    out_dir = tmp_path / "life"
    run_cli([
        "lifetime", "--panel", str(cohort / "panel.csv"), "--seed", "2",
        "--out", str(out_dir),
    ])

    for name in LIFETIME_SCENARIOS:
        lines = (out_dir / f"{name}.csv").read_text().splitlines()
        assert lines[0] == (
            "percentile,log_diff,group_a,group_b,scenario,RR,beta,seed"
        )
        assert len(lines) == 100  # header + percentiles 1..99
        fields = [line.split(",") for line in lines[1:]]
        assert [int(f[0]) for f in fields] == list(range(1, 100))
        assert {f[4] for f in fields} == {name}
        assert {f[5] for f in fields} == {"0.4"}   # configured replacement rate
        assert {f[6] for f in fields} == {"0.95"}  # configured discount factor
        assert {f[7] for f in fields} == {"2"}

    doc = read_manifest(out_dir / "lifetime.manifest.json")
    wide = doc["wide_uncertainty"]
    assert set(wide) == set(LIFETIME_SCENARIOS)
    assert wide["public_vs_private_no_selection"] is False  # 400 per group
    assert wide["public_vs_private_selection"] is True      # few observed starters


def test_lifetime_scenario_subset_and_sector_rates(tmp_path, cohort):
    out_dir = tmp_path / "life"
    run_cli([
        "lifetime", "--panel", str(cohort / "panel.csv"),
        "--scenario", "public_vs_private_no_selection",
        "--rr-public", "0.6", "--rr-private", "0.5",
        "--seed", "2", "--out", str(out_dir),
    ])
    emitted = {p.name for p in out_dir.glob("*.csv")}
    assert emitted == {"public_vs_private_no_selection.csv"}
    fields = [
        line.split(",")
        for line in (out_dir / "public_vs_private_no_selection.csv")
        .read_text().splitlines()[1:]
    ]
    assert {f[5] for f in fields} == {"0.6:0.5"}


def test_lifetime_rejects_conflicting_rate_flags(tmp_path, cohort):
    base = [
        "lifetime", "--panel", str(cohort / "panel.csv"),
        "--out", str(tmp_path / "life"),
    ]
    run_cli(base + ["--rr", "0.4", "--rr-public", "0.6", "--rr-private", "0.5"],
            expect=2)
    run_cli(base + ["--rr-public", "0.6"], expect=2)


def test_diagnose_identical_panels_report_zero(tmp_path, cohort):
    out_dir = tmp_path / "diag"
    panel = str(cohort / "panel.csv")
    classes = str(cohort / "panel.classes.csv")
    run_cli([
        "diagnose", "--panel-a", panel, "--panel-b", panel,
        "--classes-a", classes, "--classes-b", classes,
        "--out", str(out_dir),
    ])

    report = json.loads((out_dir / "report.json").read_text())
    assert report["transition_distance"] == 0.0
    assert report["wage_histogram_l1_by_state"]
    assert all(v == 0.0 for v in report["wage_histogram_l1_by_state"].values())

    expected = {
        "transition_a.csv", "transition_b.csv",
        "wage_histogram_a.csv", "wage_histogram_b.csv",
        "composition_km_a.csv", "composition_ky_a.csv",
        "composition_km_b.csv", "composition_ky_b.csv",
        "report.json",
    }
    assert expected <= {p.name for p in out_dir.iterdir()}
    read_manifest(out_dir / "diagnose.manifest.json")


def test_diagnose_missing_input_exits_4(tmp_path, cohort):
    run_cli([
        "diagnose", "--panel-a", str(tmp_path / "absent.csv"),
        "--panel-b", str(cohort / "panel.csv"), "--out", str(tmp_path / "d"),
    ], expect=4)


def test_diagnose_bad_schema_exits_2(tmp_path, cohort):
    bad = tmp_path / "bad.csv"
    bad.write_text("id,year,state\n1,2012,1\n")
    run_cli([
        "diagnose", "--panel-a", str(bad),
        "--panel-b", str(cohort / "panel.csv"), "--out", str(tmp_path / "d"),
    ], expect=2)


def test_threads_flag_pins_blas_env(tmp_path, monkeypatch):
    monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
    out = tmp_path / "panel.csv"
    run_cli(["--threads", "2", "generate", "--n", "5", "--out", str(out)])
    assert os.environ["OMP_NUM_THREADS"] == "2"
    assert out.exists()
