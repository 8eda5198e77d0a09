"""Command-line entry point: ``biphoton <command> ...``.

Curves are written as CSV with two leading ``#`` lines (tool version and a
JSON provenance record); structured results are JSON objects carrying a
``provenance`` key. Nothing time- or host-dependent goes into either, so a
rerun with the same arguments reproduces the output byte for byte.

Exit codes: 0 success, 2 usage error, 3 bad input or configuration,
4 analysis degeneracy (no coincidences, no oscillation, singular fit).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from . import timetag as tt
from .correlator import (AUTO_PAIRS, CROSS_PAIRS, DEFAULT_BIN_WIDTH_S, DEFAULT_TAU_RANGE_S,
                         DEFAULT_WINDOW_T_S, CorrelationCurve, CorrelationError, CorrelationRequest,
                         InvalidFactor, cauchy_schwarz, cauchy_schwarz_from_curves, cauchy_schwarz_stream, correlate,
                         correlate_many, cs_requests, parse_pair, singles_series, windowed_max_series)
from .fitter import DegenerateFit, FitError, NoOscillation, fit, initial_guess, predict_r
from .model import (AutoCorrelationLevels, ModelParams, g12_empirical, g12_theory, model_peak,
                    r_model)
from .simulator import FITTED_PARAMS, SimConfig, SimulationError, iter_blocks, scan, scan_configs, simulate

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_DEGENERATE = 4

DEGENERATE_ERRORS = (InvalidFactor, NoOscillation, DegenerateFit, FitError)
INPUT_ERRORS = (tt.TagFormatError, tt.ResolutionMismatch, CorrelationError, SimulationError,
                OSError, ValueError, KeyError, TypeError)

FIG4A_DETUNINGS = (-9.0, 9.0, 20.0, 30.0, 40.0)
FIG4B_SCALES = (0.5, 1.0, 2.0)


class InputError(ValueError):
    pass


@contextmanager
def stage(name):
    try:
        yield
    except Exception as exc:
        if not hasattr(exc, "stage"):
            exc.stage = name
        raise


# --- serialisation helpers -------------------------------------------------


def _plain(obj):
    """Convert to JSON-safe builtins; non-finite floats become None."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, Path):
        return str(obj)
    return str(obj)


def to_json(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def provenance(command: str, config: dict) -> dict:
    return {"tool": "biphoton", "version": __version__, "command": command, "config": _plain(config)}


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return repr(v) if math.isfinite(v) else "nan"
    return str(v)


def csv_text(prov: dict, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# biphoton {__version__}\n")
    buf.write("# provenance: " + json.dumps(_plain(prov), sort_keys=True, separators=(",", ":")) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def read_csv_table(path):
    """Return ``(provenance, {column: array})`` from a file written by :func:`csv_text`."""
    prov = {}
    lines = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("# provenance:"):
                prov = json.loads(line.split(":", 1)[1])
            elif not line.startswith("#"):
                lines.append(line)
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise InputError(f"{path}: no CSV header") from None
    rows = [r for r in reader if r]
    cols = {}
    for i, name in enumerate(header):
        try:
            cols[name.strip()] = np.array([float(r[i]) for r in rows])
        except (ValueError, IndexError):
            raise InputError(f"{path}: column {name!r} is not numeric") from None
    return prov, cols


def emit(text: str, out=None):
    if out is None or str(out) == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _floats(text, n=None, name="values"):
    try:
        vals = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise InputError(f"{name}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise InputError(f"{name}: expected {n} numbers, got {len(vals)}")
    return vals


# --- curve tables ----------------------------------------------------------

CURVE_COLUMNS = ("tau_s", "counts", "accidental_norm", "g", "stderr", "valid")


def curve_info(curve: CorrelationCurve) -> dict:
    info = curve.request.describe()
    info.update(resolution_ps=curve.resolution_ps, trial_count=curve.trial_count,
                singles=[int(s) for s in curve.singles])
    return info


def curve_csv(curve: CorrelationCurve, prov: dict) -> str:
    prov = dict(prov, curve=curve_info(curve))
    return csv_text(prov, CURVE_COLUMNS, curve.to_rows())


def curve_json(curve: CorrelationCurve, prov: dict) -> str:
    rows = [dict(zip(CURVE_COLUMNS, r)) for r in curve.to_rows()]
    return to_json({"provenance": prov, "curve": curve_info(curve), "rows": rows})


def load_curve(path, resolution_ps=None, bin_width_s=None) -> CorrelationCurve:
    prov, cols = read_csv_table(path)
    missing = [c for c in ("tau_s", "g", "stderr") if c not in cols]
    if missing:
        raise InputError(f"{path}: missing columns {missing}")
    tau = cols["tau_s"]
    if tau.size < 2:
        raise InputError(f"{path}: need at least two rows")
    info = prov.get("curve", {})
    bw = bin_width_s or info.get("bin_width_s") or float(np.median(np.diff(tau)))
    res = int(resolution_ps or info.get("resolution_ps") or tt.DEFAULT_RESOLUTION_PS)
    pair = info.get("pair", "1a,2b")
    tau_range = info.get("tau_range_s")
    if tau_range is None:
        tau_range = round(float(np.max(np.abs(tau))) / bw) * bw
    req = CorrelationRequest(pair, info.get("window_center_s"), info.get("window_T_s"), tau_range, bw)
    n = tau.size
    counts = cols.get("counts", np.zeros(n)).astype(np.int64)
    acc = cols.get("accidental_norm", np.ones(n))
    valid = cols.get("valid", np.ones(n)).astype(bool) & np.isfinite(cols["g"])
    return CorrelationCurve(tau, counts, acc, cols["g"], cols["stderr"], valid, np.full(n, np.nan), req,
                            res, int(info.get("trial_count", 0)), tuple(info.get("singles", (0, 0))))


# --- configuration ---------------------------------------------------------


def _read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise InputError(f"{path}: expected a JSON object")
    return data


def sim_config_from_args(args) -> SimConfig:
    """Flags first, then the JSON config file on top (file values win)."""
    data = {}
    params = {}
    for flag, key in (("delta", "delta_ratio"), ("f", "f"), ("chi", "chi"), ("delta_prime", "delta_prime_ratio")):
        v = getattr(args, flag, None)
        if v is not None:
            params[key] = v
    for flag, key in (("trials", "trial_count"), ("gamma_hz", "gamma_hz"), ("pair_rate", "pair_rate_hz"),
                      ("background_rate", "background_rate_hz"), ("trial_length", "trial_length_s"),
                      ("coherence", "thermal_coherence_s"), ("seed", "seed")):
        v = getattr(args, flag, None)
        if v is not None:
            data[key] = v
    if getattr(args, "config", None):
        file_data = _read_json(args.config)
        params.update(file_data.pop("params", {}) or {})
        data.update(file_data)
    base = FITTED_PARAMS.as_dict()
    if "delta_ratio" in params and "delta_prime_ratio" not in params:
        base["delta_prime_ratio"] = None
    base.update(params)
    data["params"] = base
    return SimConfig.from_dict(data)


# --- commands --------------------------------------------------------------


def cmd_tags_info(args):
    with stage("read"):
        ds = tt.load(args.file)
    info = tt.summary(ds)
    info["provenance"] = provenance("tags info", {"file": args.file, "sha256": _file_digest(args.file)})
    emit(to_json(info), args.out)
    return EXIT_OK


def cmd_tags_merge(args):
    with stage("read"):
        parts = [tt.load(p) for p in args.inputs]
    with stage("merge"):
        merged = parts[0]
        for p in parts[1:]:
            merged = tt.merge_datasets(merged, p)
    meta = dict(merged.metadata)
    meta["merged_from"] = json.dumps([str(p) for p in args.inputs])
    meta["provenance"] = json.dumps(provenance("tags merge", {
        "inputs": [{"file": str(p), "sha256": _file_digest(p)} for p in args.inputs]}), sort_keys=True)
    merged.metadata = meta
    with stage("write"):
        tt.save(merged, args.output)
    return EXIT_OK


def cmd_model_eval(args):
    if not args.step > 0 or not args.tau_max > 0:
        raise InputError("--step and --tau-max must be positive")
    params = ModelParams(args.delta, args.f, args.chi, args.delta_prime)
    autos = AutoCorrelationLevels(*_floats(args.autos, 2, "--autos"))
    n = int(math.floor(args.tau_max / args.step + 1e-9)) + 1
    x = np.arange(n) * args.step
    g = g12_empirical(x, params)
    r = r_model(x, params, autos)
    prov = provenance("model eval", {"params": params.as_dict(), "autos": [autos.g11_zero, autos.g22_zero],
                                     "tau_max": args.tau_max, "step": args.step})
    if args.format == "json":
        xp, gp = model_peak(params, 0.0, args.tau_max)
        emit(to_json({"provenance": prov, "peak": {"tau_gamma": xp, "g12": gp},
                      "rows": [{"tau_gamma": a, "g12": b, "r": c} for a, b, c in zip(x, g, r)]}), args.out)
    else:
        emit(csv_text(prov, ("tau_gamma", "g12", "r"), zip(x, g, r)), args.out)
    return EXIT_OK


def _sim_provenance(command, cfg: SimConfig, extra=None):
    d = {"sim": cfg.to_dict(), "resolved_pair_rate_hz": cfg.resolved_pair_rate()}
    d.update(extra or {})
    return provenance(command, d)


def cmd_simulate(args):
    if not args.out:
        raise InputError("simulate needs --out <file.ttag>")
    with stage("config"):
        cfg = sim_config_from_args(args)
    with stage("simulate"):
        ds = simulate(cfg, threads=args.threads)
    ds.metadata["provenance"] = json.dumps(_plain(_sim_provenance("simulate", cfg)), sort_keys=True)
    with stage("write"):
        tt.save(ds, args.out)
    sys.stderr.write(f"wrote {len(ds)} records ({ds.trial_count} trials) to {args.out}\n")
    return EXIT_OK


def cmd_scan(args):
    with stage("config"):
        cfg = sim_config_from_args(args)
        values = _floats(args.values, name="--values")
        if not values:
            raise InputError("--values is empty")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with stage("scan"):
        entries = scan(cfg, args.axis, values, out_dir=None, threads=args.threads)
    for e in entries:
        ds = e["dataset"]
        ds.metadata["provenance"] = json.dumps(_plain(provenance("scan", {
            "axis": args.axis, "value": e["value"], "sim": e["config"]})), sort_keys=True)
        e["file"] = f"scan_{e['index']:03d}.ttag"
        tt.save(ds, out_dir / e["file"])
    manifest = {
        "provenance": _sim_provenance("scan", cfg, {"axis": args.axis, "values": values}),
        "axis": args.axis,
        "base_seed": cfg.seed,
        "entries": [{k: e[k] for k in ("index", "value", "seed", "file")} for e in entries],
    }
    (out_dir / "manifest.json").write_text(to_json(manifest))
    return EXIT_OK


def _request_from_args(args, pair) -> CorrelationRequest:
    return CorrelationRequest(pair, args.t, args.T, args.tau_max, args.bin)


def cmd_correlate(args):
    with stage("read"):
        ds = tt.load(args.inp)
    with stage("correlate"):
        req = _request_from_args(args, args.pair)
        curve = correlate(ds, req)
    prov = provenance("correlate", {"input": args.inp, "sha256": _file_digest(args.inp), "request": req.describe()})
    emit(curve_json(curve, prov) if args.format == "json" else curve_csv(curve, prov), args.out)
    return EXIT_OK


SERIES_COLUMNS = ("t_s", "joint", "g", "g_stderr", "tau_s", "valid")


def _series_rows(points):
    return [(p.t_s, p.joint, p.g, p.g_stderr, p.tau_s, p.valid) for p in points]


def cmd_series(args):
    with stage("read"):
        ds = tt.load(args.inp)
    cfg = {"input": args.inp, "sha256": _file_digest(args.inp), "T_s": args.T, "stride_s": args.stride}
    with stage("series"):
        if args.channel is not None:
            ch = tt.DetectorChannel.parse(args.channel)
            cols = ("t_s", "p", "count")
            rows = singles_series(ds, ch, args.T, args.stride)
            cfg["channel"] = ch.label
        else:
            pts = windowed_max_series(ds, args.pair, args.T, args.stride, args.tau_max, args.bin)
            cols, rows = SERIES_COLUMNS, _series_rows(pts)
            a, b = parse_pair(args.pair)
            cfg.update(pair=f"{a.label},{b.label}", tau_range_s=args.tau_max, bin_width_s=args.bin)
    prov = provenance("series", cfg)
    if args.format == "json":
        emit(to_json({"provenance": prov, "rows": [dict(zip(cols, r)) for r in rows]}), args.out)
    else:
        emit(csv_text(prov, cols, rows), args.out)
    return EXIT_OK


def _r_rows(cs):
    return zip(cs.tau_s, cs.r, cs.r_stderr, cs.valid)


def cmd_cs_test(args):
    with stage("read"):
        ds = tt.load(args.inp)
    with stage("cs-test"):
        cs = cauchy_schwarz(ds, args.tau_max, args.bin)
    prov = provenance("cs-test", {"input": args.inp, "sha256": _file_digest(args.inp),
                                  "tau_range_s": args.tau_max, "bin_width_s": args.bin})
    if args.format == "csv":
        emit(csv_text(prov, ("tau_s", "r", "stderr", "valid"), _r_rows(cs)), args.out)
    else:
        emit(to_json(dict(cs.to_dict(), provenance=prov)), args.out)
    return EXIT_OK


def _guess(args, curve, gamma_hz, delta):
    if args.guess:
        f, chi, dp = _floats(args.guess, 3, "--guess")
        return ModelParams(delta if delta is not None else dp, f, chi, dp)
    return initial_guess(curve, gamma_hz, delta)


def overlay_rows(curve, result, autos):
    gamma = 2.0 * math.pi * result.gamma_hz
    x = curve.tau_s * gamma
    return zip(curve.tau_s, x, g12_empirical(x, result.params), predict_r(result, autos, x))


OVERLAY_COLUMNS = ("tau_s", "tau_gamma", "g12_fit", "r_model")


def cmd_fit(args):
    with stage("read"):
        curve = load_curve(args.inp, args.resolution_ps, args.bin)
    with stage("fit"):
        guess = _guess(args, curve, args.gamma_hz, args.delta)
        result = fit(curve, guess, args.gamma_hz, bin_average=not args.no_bin_average)
    cfg = {"input": args.inp, "sha256": _file_digest(args.inp), "gamma_hz": args.gamma_hz,
           "delta": args.delta, "guess": guess.as_dict(), "bin_average": not args.no_bin_average}
    out = {"guess": guess.as_dict(), "fit": result.to_dict()}
    if args.predict_r:
        with stage("predict-r"):
            autos = AutoCorrelationLevels(*_floats(args.autos, 2, "--autos"))
            rows = list(overlay_rows(curve, result, autos))
        cfg["autos"] = [autos.g11_zero, autos.g22_zero]
        prov = provenance("fit", cfg)
        if args.r_out:
            Path(args.r_out).write_text(csv_text(prov, OVERLAY_COLUMNS, rows))
        else:
            out["r_overlay"] = [dict(zip(OVERLAY_COLUMNS, r)) for r in rows]
    out["provenance"] = provenance("fit", cfg)
    emit(to_json(out), args.out)
    return EXIT_OK if result.converged else EXIT_DEGENERATE


# --- analyze ---------------------------------------------------------------


def _pair_name(pair):
    a, b = parse_pair(pair)
    return f"{a.label}{b.label}"


def _meta_float(ds, key):
    try:
        return float(ds.metadata[key])
    except (KeyError, TypeError, ValueError):
        return None


def cmd_analyze(args):
    with stage("read"):
        ds = tt.load(args.inp)
        if len(ds) == 0:
            raise InputError(f"{args.inp}: dataset holds no records")
    gamma_hz = args.gamma_hz or _meta_float(ds, "gamma_hz") or 6.07e6
    delta = args.delta if args.delta is not None else _meta_float(ds, "delta_over_gamma")
    cfg = {"input": args.inp, "sha256": _file_digest(args.inp), "gamma_hz": gamma_hz, "delta": delta,
           "T_s": args.T, "stride_s": args.stride, "tau_range_s": args.tau_max, "bin_width_s": args.bin}
    prov = provenance("analyze", cfg)
    files = {}
    stages = {}

    with stage("singles series"):
        per_ch = [singles_series(ds, ch, args.T, args.stride) for ch in tt.DetectorChannel]
        rows = [(pts[0][0],) + tuple(p[1] for p in pts) + tuple(p[2] for p in pts) for pts in zip(*per_ch)]
        cols = ("t_s",) + tuple(f"p_{ch.label}" for ch in tt.DetectorChannel) \
            + tuple(f"n_{ch.label}" for ch in tt.DetectorChannel)
        files["singles_series.csv"] = csv_text(prov, cols, rows)
    with stage("windowed series"):
        for pair in CROSS_PAIRS + AUTO_PAIRS:
            pts = windowed_max_series(ds, pair, args.T, args.stride, args.tau_max, args.bin)
            files[f"series_{_pair_name(pair)}.csv"] = csv_text(prov, SERIES_COLUMNS, _series_rows(pts))
    with stage("correlate"):
        curves = correlate_many(ds, cs_requests(args.tau_max, args.bin))
        for c in curves:
            files[f"g_{_pair_name(c.request.channel_pair)}.csv"] = curve_csv(c, prov)
    cs = None
    with stage("cs-test"):
        try:
            cs = cauchy_schwarz_from_curves(*curves)
            files["cs.json"] = to_json(dict(cs.to_dict(), provenance=prov))
            stages["cs-test"] = {"status": "ok"}
        except InvalidFactor as exc:
            stages["cs-test"] = {"status": "degenerate", "error": str(exc)}
    with stage("fit"):
        try:
            guess = initial_guess(curves[0], gamma_hz, delta)
            result = fit(curves[0], guess, gamma_hz)
            files["fit.json"] = to_json({"provenance": prov, "guess": guess.as_dict(), "fit": result.to_dict()})
            stages["fit"] = {"status": "ok" if result.converged else "not converged"}
            if cs is not None and result.converged:
                autos = AutoCorrelationLevels(cs.factors["g_1a1b_0"], cs.factors["g_2a2b_0"])
                files["r_overlay.csv"] = csv_text(prov, OVERLAY_COLUMNS, overlay_rows(curves[0], result, autos))
        except DEGENERATE_ERRORS as exc:
            stages["fit"] = {"status": "degenerate", "error": f"{type(exc).__name__}: {exc}"}
    report = {
        "provenance": prov,
        "dataset": {k: v for k, v in tt.summary(ds).items() if k != "metadata"},
        "stages": stages,
        "cs": None if cs is None else {k: v for k, v in cs.to_dict().items() if k != "r_curve"},
        "files": sorted(files) + ["report.json"],
    }
    files["report.json"] = to_json(report)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out_dir / name).write_text(text)
    for name, st in stages.items():
        if st["status"] != "ok":
            sys.stderr.write(f"{name}: {st['status']}: {st.get('error', '')}\n")
    return EXIT_OK if cs is not None else EXIT_DEGENERATE


# --- reproduce -------------------------------------------------------------

REFERENCE_ROWS = (
    ("no_cross_correlation", 0.25),
    ("classical_bound", 1.0),
)


def large_detuning_r_max() -> float:
    """Peak of r for the bare theory curve at large detuning with thermal autocorrelations."""
    _, g = model_peak(ModelParams.theory(1e3))
    return g * g / 4.0


def _base_config(args) -> SimConfig:
    return SimConfig(params=FITTED_PARAMS, trial_count=args.trials, background_rate_hz=args.background_rate,
                     seed=args.seed if args.seed is not None else 0)


def _stream_cs(cfg: SimConfig, threads, tau_max=DEFAULT_TAU_RANGE_S, bin_width=DEFAULT_BIN_WIDTH_S):
    return cauchy_schwarz_stream(iter_blocks(cfg, threads), tau_max, bin_width)


def _cs_row(value, cs, cfg):
    f = cs.factors
    return (value, cs.r_max, cs.r_max_stderr, cs.violation_sigma, cs.tau_at_max_s,
            f["g_1a1b_0"], f["g_1a1b_0_stderr"], f["g_2a2b_0"], f["g_2a2b_0_stderr"], cfg.seed)


CS_TABLE_COLUMNS = ("value", "r_max", "r_max_stderr", "violation_sigma", "tau_at_max_s",
                    "g_1a1b_0", "g_1a1b_0_stderr", "g_2a2b_0", "g_2a2b_0_stderr", "seed")


def reproduce_fig3(args, figure):
    cfg = _base_config(args)
    prov = _sim_provenance(f"reproduce {figure}", cfg)
    with stage("simulate+correlate"):
        cs, curves = _stream_cs(cfg, args.threads)
    g_a, g_b = curves[0], curves[1]
    with stage("fit"):
        guess = initial_guess(g_a, cfg.gamma_hz, cfg.params.delta_ratio)
        result = fit(g_a, guess, cfg.gamma_hz)
    gamma = cfg.gamma
    x = g_a.tau_s * gamma
    files = {}
    summary = {"provenance": prov, "cs": {k: v for k, v in cs.to_dict().items() if k != "r_curve"},
               "fit": result.to_dict(), "injected": cfg.params.as_dict()}
    if figure == "fig3a":
        rows = zip(g_a.tau_s, x, g_a.g, g_a.stderr, g_b.g, g_b.stderr,
                   g12_empirical(x, cfg.params), g12_empirical(x, result.params),
                   g12_theory(x, cfg.params.delta_ratio))
        cols = ("tau_s", "tau_gamma", "g_1a2b", "g_1a2b_stderr", "g_1b2a", "g_1b2a_stderr",
                "model_injected", "model_fit", "theory")
        files["fig3a_g.csv"] = csv_text(prov, cols, rows)
        autos = [(c.request.channel_pair, c.value_at_zero()) for c in curves[2:]]
        summary["autocorrelations"] = {f"{a.label}{b.label}": {"g0": v[0], "stderr": v[1]} for (a, b), v in autos}
    else:
        autos = AutoCorrelationLevels(cs.factors["g_1a1b_0"], cs.factors["g_2a2b_0"])
        r_fit = predict_r(result, autos, x)
        files["fig3b_r.csv"] = csv_text(prov, ("tau_s", "tau_gamma", "r", "r_stderr", "valid", "r_model_fit"),
                                        zip(cs.tau_s, x, cs.r, cs.r_stderr, cs.valid, r_fit))
        refs = list(REFERENCE_ROWS) + [("theory_large_detuning_max", large_detuning_r_max())]
        files["fig3b_references.csv"] = csv_text(prov, ("label", "r"), refs)
        summary["references"] = dict(refs)
    files[f"{figure}_summary.json"] = to_json(summary)
    return files


def reproduce_fig4(args, figure):
    base = _base_config(args)
    if figure == "fig4a":
        values = _floats(args.values, name="--values") if args.values else list(FIG4A_DETUNINGS)
        configs = [base.replace(params=base.params.with_values(delta_ratio=v, delta_prime_ratio=v),
                                seed=base.seed ^ i) for i, v in enumerate(values)]
        axis = "detuning_over_gamma"
    else:
        values = _floats(args.values, name="--values") if args.values else list(FIG4B_SCALES)
        configs = scan_configs(base, "rate_scale", values)
        axis = "rate_scale"
    prov = _sim_provenance(f"reproduce {figure}", base, {"axis": axis, "values": values})
    rows = []
    for v, cfg in zip(values, configs):
        with stage(f"{axis}={v:g}"):
            cs, _ = _stream_cs(cfg, args.threads)
        rows.append(_cs_row(v, cs, cfg))
    r = np.array([row[1] for row in rows])
    s = np.array([row[2] for row in rows])
    z = [abs(r[i] - r[j]) / math.hypot(s[i], s[j]) for i in range(len(r)) for j in range(i + 1, len(r))]
    summary = {"provenance": prov, "axis": axis,
               "rows": [dict(zip(CS_TABLE_COLUMNS, row)) for row in rows],
               "max_pairwise_z": max(z) if z else 0.0}
    return {f"{figure}_rmax.csv": csv_text(prov, (axis,) + CS_TABLE_COLUMNS[1:], rows),
            f"{figure}_summary.json": to_json(summary)}


def cmd_reproduce(args):
    if args.trials <= 0:
        raise InputError("--trials must be positive")
    files = reproduce_fig3(args, args.figure) if args.figure.startswith("fig3") else reproduce_fig4(args, args.figure)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out_dir / name).write_text(text)
        sys.stderr.write(f"wrote {out_dir / name}\n")
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def _add_sim_flags(p):
    p.add_argument("--config", help="JSON file with SimConfig fields; its values override flags")
    p.add_argument("--trials", type=int)
    p.add_argument("--gamma-hz", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--f", type=float)
    p.add_argument("--chi", type=float)
    p.add_argument("--delta-prime", type=float)
    p.add_argument("--pair-rate", type=float)
    p.add_argument("--background-rate", type=float)
    p.add_argument("--trial-length", type=float)
    p.add_argument("--coherence", type=float)


def _add_binning(p):
    p.add_argument("--tau-max", type=float, default=DEFAULT_TAU_RANGE_S, help="half range of tau (s)")
    p.add_argument("--bin", type=float, default=DEFAULT_BIN_WIDTH_S, help="bin width (s)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=0, help="worker threads (0 = all cores)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output file (default stdout)")
    common.add_argument("--format", choices=("csv", "json"), default=None)

    # global flags are accepted after the subcommand name
    parser = argparse.ArgumentParser(prog="biphoton", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"biphoton {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    tags = sub.add_parser("tags", help="inspect or merge TTAG files")
    tsub = tags.add_subparsers(dest="tags_command", required=True)
    p = tsub.add_parser("info", parents=[common])
    p.add_argument("file")
    p.set_defaults(func=cmd_tags_info)
    p = tsub.add_parser("merge", parents=[common])
    p.add_argument("output")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_tags_merge)

    model = sub.add_parser("model", help="evaluate the correlation model")
    msub = model.add_subparsers(dest="model_command", required=True)
    p = msub.add_parser("eval", parents=[common])
    p.add_argument("--delta", type=float, default=20.0)
    p.add_argument("--tau-max", type=float, default=5.0)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--f", type=float, default=1.0)
    p.add_argument("--chi", type=float, default=1.0)
    p.add_argument("--delta-prime", type=float, default=None)
    p.add_argument("--autos", default="2,2")
    p.set_defaults(func=cmd_model_eval)

    p = sub.add_parser("simulate", parents=[common], help="simulate a TTAG dataset")
    _add_sim_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("scan", parents=[common], help="simulate one dataset per parameter value")
    _add_sim_flags(p)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("correlate", parents=[common], help="normalised correlation curve")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--pair", default="1a,2b")
    p.add_argument("--t", type=float, default=None, help="window centre (s); default whole trial")
    p.add_argument("--T", type=float, default=None, help="window length (s)")
    _add_binning(p)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("series", parents=[common], help="windowed series along the trial")
    p.add_argument("--in", dest="inp", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--pair", default="1a,2b")
    g.add_argument("--channel", default=None)
    p.add_argument("--T", type=float, default=DEFAULT_WINDOW_T_S)
    p.add_argument("--stride", type=float, default=DEFAULT_WINDOW_T_S)
    _add_binning(p)
    p.set_defaults(func=cmd_series)

    p = sub.add_parser("cs-test", parents=[common], help="Cauchy-Schwarz ratio")
    p.add_argument("--in", dest="inp", required=True)
    _add_binning(p)
    p.set_defaults(func=cmd_cs_test)

    p = sub.add_parser("fit", parents=[common], help="fit the empirical model to a correlation CSV")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--gamma-hz", type=float, default=6.07e6)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--guess", default=None, help="f,chi,delta_prime")
    p.add_argument("--no-bin-average", action="store_true")
    p.add_argument("--resolution-ps", type=int, default=None)
    p.add_argument("--bin", type=float, default=None)
    p.add_argument("--predict-r", action="store_true")
    p.add_argument("--autos", default="2,2")
    p.add_argument("--r-out", default=None, help="write the R overlay CSV here")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("analyze", parents=[common], help="full report for a dataset")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--gamma-hz", type=float, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--T", type=float, default=DEFAULT_WINDOW_T_S)
    p.add_argument("--stride", type=float, default=DEFAULT_WINDOW_T_S)
    _add_binning(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("reproduce", parents=[common], help="simulate and analyse a figure end to end")
    p.add_argument("figure", choices=("fig3a", "fig3b", "fig4a", "fig4b"))
    p.add_argument("--out-dir", required=True)
    p.add_argument("--trials", type=int, default=20000)
    p.add_argument("--background-rate", type=float, default=3e5)
    p.add_argument("--values", default=None, help="override the scan values (fig4)")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except DEGENERATE_ERRORS as exc:
        code = EXIT_DEGENERATE
        err = exc
    except INPUT_ERRORS as exc:
        code = EXIT_INPUT
        err = exc
    msg = {"error": type(err).__name__, "message": str(err), "stage": getattr(err, "stage", None),
           "exit_code": code}
    sys.stderr.write(json.dumps(msg, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
