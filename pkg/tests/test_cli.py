import json

import numpy as np
import pytest

from biphoton import cli
from biphoton import timetag as tt
from biphoton.simulator import SimConfig, simulate


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def fitted_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    p = d / "fitted.ttag"
    assert run("simulate", "--trials", 6000, "--background-rate", 6e5, "--seed", 2, "--out", p) == 0
    return p


@pytest.fixture(scope="module")
def thermal_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    p = d / "thermal.ttag"
    cfg = {"trial_count": 100, "background_rate_hz": 8e6, "pair_rate_hz": 0.0}
    (d / "cfg.json").write_text(json.dumps(cfg))
    assert run("simulate", "--config", d / "cfg.json", "--out", p) == 0
    return p


def test_model_eval_csv(capsys):
    assert run("model", "eval", "--delta", 20, "--tau-max", 5, "--step", 0.001) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("# biphoton ")
    assert out[1].startswith("# provenance: ")
    assert out[2] == "tau_gamma,g12,r"
    assert len(out) == 3 + 5001
    assert out[3] == "0.0,1.0,0.25"


def test_model_eval_json(capsys):
    assert run("model", "eval", "--delta", 1000, "--tau-max", 5, "--format", "json") == 0
    d = json.loads(capsys.readouterr().out)
    assert abs(d["peak"]["g12"] - 2.62) < 0.01


def test_simulate_metadata_and_info(fitted_file, capsys):
    ds = tt.load(fitted_file)
    prov = json.loads(ds.metadata["provenance"])
    assert prov["config"]["sim"]["seed"] == 2
    assert run("tags", "info", fitted_file) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["trial_count"] == 6000
    assert info["provenance"]["command"] == "tags info"


def test_config_file_overrides_flags(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"trial_count": 3, "seed": 5}))
    assert run("simulate", "--config", tmp_path / "c.json", "--trials", 9, "--seed", 1,
               "--out", tmp_path / "x.ttag") == 0
    ds = tt.load(tmp_path / "x.ttag")
    assert ds.trial_count == 3
    assert ds.metadata["seed"] == "5"


def test_simulate_threads_byte_identical(tmp_path):
    a, b = tmp_path / "a.ttag", tmp_path / "b.ttag"
    assert run("simulate", "--trials", 200, "--threads", 1, "--out", a) == 0
    assert run("simulate", "--trials", 200, "--threads", 4, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()


def test_merge(tmp_path, thermal_file):
    out = tmp_path / "m.ttag"
    assert run("tags", "merge", out, thermal_file, thermal_file) == 0
    m = tt.load(out)
    assert m.trial_count == 200
    assert len(m) == 2 * len(tt.load(thermal_file))


def test_correlate_fit_pipeline(fitted_file, tmp_path, capsys):
    g = tmp_path / "g.csv"
    assert run("correlate", "--in", fitted_file, "--pair", "1a,2b", "--out", g) == 0
    lines = g.read_text().splitlines()
    assert lines[2] == "tau_s,counts,accidental_norm,g,stderr,valid"
    assert len(lines) == 3 + 121
    r = tmp_path / "r.csv"
    code = run("fit", "--in", g, "--gamma-hz", 6.07e6, "--delta", 20, "--predict-r", "--autos", "1.95,1.95",
               "--r-out", r)
    assert code == 0
    d = json.loads(capsys.readouterr().out)
    fitp, se = d["fit"]["params"], d["fit"]["stderr"]
    for k, v in (("f", 1.58), ("chi", 5.1), ("delta_prime_ratio", 21.53)):
        assert abs(fitp[k] - v) < 4 * se[k]
    assert r.read_text().splitlines()[2] == "tau_s,tau_gamma,g12_fit,r_model"


def test_correlate_is_reproducible(fitted_file, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run("correlate", "--in", fitted_file, "--pair", "1b,2a", "--out", a)
    run("correlate", "--in", fitted_file, "--pair", "1b,2a", "--out", b)
    assert a.read_bytes() == b.read_bytes()


def test_cs_test_json(fitted_file, capsys):
    assert run("cs-test", "--in", fitted_file) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["r_max"] > 1
    assert d["provenance"]["command"] == "cs-test"
    assert len(d["r_curve"]) == 121


def test_series_csv(fitted_file, capsys):
    assert run("series", "--in", fitted_file, "--pair", "1a,2b", "--T", 100e-6, "--stride", 100e-6) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[2] == "t_s,joint,g,g_stderr,tau_s,valid"
    assert len(out) == 3 + 10
    assert run("series", "--in", fitted_file, "--channel", "2b", "--format", "json") == 0
    assert len(json.loads(capsys.readouterr().out)["rows"]) == 100


def test_analyze_thermal(thermal_file, tmp_path):
    out = tmp_path / "rep"
    assert run("analyze", "--in", thermal_file, "--out-dir", out) == 0
    cs = json.loads((out / "cs.json").read_text())
    assert cs["r_max"] < 1
    assert abs(cs["r_max"] - 0.25) < 0.05
    report = json.loads((out / "report.json").read_text())
    assert report["stages"]["fit"]["status"] == "degenerate"
    assert sorted(p.name for p in out.iterdir()) == sorted(report["files"])


def test_analyze_fitted(fitted_file, tmp_path):
    out = tmp_path / "rep"
    assert run("analyze", "--in", fitted_file, "--out-dir", out) == 0
    fit = json.loads((out / "fit.json").read_text())["fit"]
    for k, v in (("f", 1.58), ("chi", 5.1), ("delta_prime_ratio", 21.53)):
        assert abs(fit["params"][k] - v) < 3 * fit["stderr"][k] + 1e-12
    assert (out / "r_overlay.csv").exists()
    for name in ("g_1a2b.csv", "g_1b2a.csv", "g_1a1b.csv", "g_2a2b.csv", "singles_series.csv",
                 "series_1a2b.csv", "series_2a2b.csv"):
        assert (out / name).read_text().startswith("# biphoton ")


def test_analyze_empty_dataset(tmp_path, capsys):
    p = tmp_path / "empty.ttag"
    tt.save(tt.TagDataset(100, 10**7, 1, [], [], []), p)
    out = tmp_path / "rep"
    assert run("analyze", "--in", p, "--out-dir", out) == cli.EXIT_INPUT
    assert not out.exists()
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["stage"] == "read"


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ttag"
    bad.write_bytes(b"JUNKJUNK")
    assert run("tags", "info", bad) == cli.EXIT_INPUT
    assert run("tags", "info", tmp_path / "missing.ttag") == cli.EXIT_INPUT
    one = tmp_path / "one.ttag"
    tt.save(tt.TagDataset(100, 10**7, 1, [0], [0], [5]), one)
    assert run("cs-test", "--in", one) == cli.EXIT_DEGENERATE
    with pytest.raises(SystemExit) as e:
        run("nonsense")
    assert e.value.code == cli.EXIT_USAGE
    capsys.readouterr()


def test_fit_degenerate_on_flat_curve(thermal_file, tmp_path, capsys):
    g = tmp_path / "g.csv"
    run("correlate", "--in", thermal_file, "--out", g)
    assert run("fit", "--in", g) == cli.EXIT_DEGENERATE
    capsys.readouterr()


def test_reproduce_fig3b_references(tmp_path):
    assert run("reproduce", "fig3b", "--out-dir", tmp_path, "--trials", 400) == 0
    rows = (tmp_path / "fig3b_references.csv").read_text().splitlines()[3:]
    vals = {r.split(",")[0]: float(r.split(",")[1]) for r in rows}
    assert vals["no_cross_correlation"] == 0.25
    assert vals["classical_bound"] == 1.0
    assert abs(vals["theory_large_detuning_max"] - 1.71) < 0.01


def test_reproduce_deterministic_across_threads(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("reproduce", "fig4b", "--out-dir", a, "--trials", 300, "--threads", 1) == 0
    assert run("reproduce", "fig4b", "--out-dir", b, "--trials", 300, "--threads", 3) == 0
    for name in ("fig4b_rmax.csv", "fig4b_summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_reproduce_fig3a_and_fig4a(tmp_path):
    assert run("reproduce", "fig3a", "--out-dir", tmp_path, "--trials", 400) == 0
    head = (tmp_path / "fig3a_g.csv").read_text().splitlines()[2]
    assert "model_fit" in head and "theory" in head
    assert run("reproduce", "fig4a", "--out-dir", tmp_path, "--trials", 200, "--values=-9,20") == 0
    rows = (tmp_path / "fig4a_rmax.csv").read_text().splitlines()[3:]
    assert [float(r.split(",")[0]) for r in rows] == [-9.0, 20.0]


def test_scan_command(tmp_path):
    assert run("scan", "--trials", 5, "--axis", "rate_scale", "--values", "0.5,2", "--out-dir", tmp_path) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert [e["file"] for e in man["entries"]] == ["scan_000.ttag", "scan_001.ttag"]
    a, b = (tt.load(tmp_path / e["file"]) for e in man["entries"])
    assert len(b) > 3 * len(a)
    assert run("scan", "--trials", 5, "--axis", "bogus", "--values", "1", "--out-dir", tmp_path) == cli.EXIT_INPUT


def test_csv_round_trip_of_curve(fitted_file, tmp_path):
    g = tmp_path / "g.csv"
    run("correlate", "--in", fitted_file, "--out", g)
    curve = cli.load_curve(g)
    ref = __import__("biphoton.correlator", fromlist=["correlate"]).correlate(
        tt.load(fitted_file), __import__("biphoton.correlator", fromlist=["x"]).CorrelationRequest("1a,2b"))
    assert np.array_equal(curve.g, ref.g)
    assert curve.bin_width_s == 0.5e-9 and curve.resolution_ps == 100


def test_sim_config_from_args_defaults():
    args = cli.build_parser().parse_args(["simulate", "--out", "x", "--delta", "9"])
    cfg = cli.sim_config_from_args(args)
    assert cfg.params.delta_ratio == 9 and cfg.params.delta_prime_ratio == 9
    assert isinstance(cfg, SimConfig)
    simulate(cfg.replace(trial_count=1))
