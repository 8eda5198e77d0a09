import math

import numpy as np
import pytest
from scipy.integrate import quad

from biphoton import timetag as tt
from biphoton.correlator import CorrelationRequest, correlate
from biphoton.model import ModelParams
from biphoton.simulator import (FITTED_PARAMS, DetectorConfig, MemoryCapExceeded, RateEnvelope, SimConfig,
                                SimulationError, build_pair_kernel, calibrate_pair_rate, iter_blocks,
                                kernel_density, kernel_mass, scan, scan_configs, simulate)
from oracles import ks_distance


def small(**kw):
    base = dict(trial_count=40, background_rate_hz=2e5, seed=11, trials_per_block=8)
    base.update(kw)
    return SimConfig(**base)


def test_deterministic_and_thread_independent():
    cfg = small()
    a = tt.dumps(simulate(cfg, threads=1))
    b = tt.dumps(simulate(cfg, threads=3))
    assert a == b
    assert tt.dumps(simulate(cfg.replace(seed=12))) != a


def test_blocks_concatenate_to_simulate():
    cfg = small()
    assert tt.concat_trials(list(iter_blocks(cfg)), metadata=simulate(cfg).metadata) == simulate(cfg)


def test_output_is_valid_and_quantised():
    ds = simulate(small(detector=DetectorConfig(dark_rate_hz=1e4)))
    ds.validate()
    assert ds.trial_count == 40
    assert ds.t.max() < ds.trial_length_units


def test_kernel_mass_closed_form():
    for p in (FITTED_PARAMS, ModelParams.theory(20), ModelParams(9, 1.2, 3.0, 9.5)):
        num = quad(lambda x: kernel_density(x, p) / p.f, -1.2, 1.2, limit=500)[0]
        assert kernel_mass(p, 1.2) == pytest.approx(num, rel=1e-9)


def test_kernel_ks():
    k = build_pair_kernel(FITTED_PARAMS, 1.2)
    x = np.linspace(-1.2, 1.2, 200_001)
    pdf = k.pdf(x)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(x))])
    draws = k.sample(np.random.default_rng(0), 200_000)
    assert ks_distance(draws, lambda s: np.interp(s, x, cdf)) < 0.005


def test_kernel_symmetric_with_zero_at_origin():
    k = build_pair_kernel(FITTED_PARAMS, 1.2)
    draws = k.sample(np.random.default_rng(1), 400_000)
    assert abs(draws.mean()) < 0.003
    assert k.pdf(0.0) == 0.0
    assert k.pdf(1.3) == 0.0


def test_kernel_first_peak():
    p = ModelParams(20, 1.0, 1.0, 20.0)
    k = build_pair_kernel(p, 3.0)
    draws = np.abs(k.sample(np.random.default_rng(2), 500_000))
    width = 0.02
    hist, edges = np.histogram(draws, bins=np.arange(0, 0.3, width))
    centre = 0.5 * (edges[:-1] + edges[1:])
    assert abs(centre[np.argmax(hist)] - math.pi / 20) <= width


def test_kernel_errors():
    with pytest.raises(ValueError):
        build_pair_kernel(FITTED_PARAMS, 1.2, table_size=10)
    with pytest.raises(ValueError):
        build_pair_kernel(FITTED_PARAMS, 0.0)


def test_pairs_have_partners():
    cfg = small(background_rate_hz=0.0, pair_rate_hz=5e4, trial_count=20)
    ds = simulate(cfg)
    counts = ds.channel_counts()
    n1 = int(counts[0] + counts[1])
    n2 = int(counts[2] + counts[3])
    # only pairs whose partner leaves the trial (or shares a slot) are unmatched
    assert n1 > 500
    assert abs(n1 - n2) <= 5
    curve = correlate(ds, CorrelationRequest("1a,2b"))
    assert curve.counts.sum() > 0.9 * counts[0] * 0.5


def test_background_rate_and_split():
    cfg = small(background_rate_hz=1e6, trial_count=50)
    ds = simulate(cfg)
    counts = ds.channel_counts()
    expected = cfg.expected_records() / 4
    assert expected == pytest.approx((1e6 + cfg.resolved_pair_rate()) * 1e-3 * 50 / 2)
    assert np.all(np.abs(counts - expected) < 6 * np.sqrt(2 * expected))


def test_efficiency_and_dark_counts():
    det = DetectorConfig(efficiency=(1.0, 0.5, 1.0, 0.0), dark_rate_hz=(0, 0, 0, 2e5))
    ds = simulate(small(background_rate_hz=4e5, trial_count=50, detector=det))
    c = ds.channel_counts()
    assert c[1] == pytest.approx(0.5 * c[0], rel=0.1)
    assert c[3] == pytest.approx(2e5 * 1e-3 * 50, rel=0.05)


def test_dead_time_respected():
    det = DetectorConfig(dead_time_s=50e-9)
    ds = simulate(small(background_rate_hz=5e6, trial_count=4, detector=det))
    for ch in range(4):
        m = ds.channel == ch
        key = ds.trial[m].astype(np.int64) * 10**9 + ds.t[m].astype(np.int64)
        gaps = np.diff(key)
        assert gaps.min() >= 500


def test_envelope_shapes_rate():
    env = RateEnvelope(rise_time_s=50e-6, decay_time_s=400e-6)
    ds = simulate(small(background_rate_hz=2e6, trial_count=20, envelope=env))
    early = np.count_nonzero(ds.t < 20_000)
    peak_units = int(env.peak_time(1e-3) / 1e-10)
    mid = np.count_nonzero((ds.t >= peak_units) & (ds.t < peak_units + 20_000))
    assert early < 0.5 * mid
    m1, m2 = env.moments(1e-3)
    assert 0 < m2 < m1 < 1


def test_calibration_sets_cross_correlation_amplitude():
    cfg = SimConfig(background_rate_hz=3e5)
    P = calibrate_pair_rate(cfg)
    B = cfg.background_rate_hz
    Z = kernel_mass(cfg.params, cfg.kernel_tau_max_gamma) / cfg.gamma
    assert P / (B + P) ** 2 / Z == pytest.approx(4 * cfg.params.f / math.pi**2, rel=1e-12)
    with pytest.raises(SimulationError):
        calibrate_pair_rate(cfg.replace(background_rate_hz=1e9))


def test_memory_cap():
    with pytest.raises(MemoryCapExceeded, match="expected"):
        simulate(SimConfig(trial_count=10**6, background_rate_hz=1e6))


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(gamma_hz=0)
    with pytest.raises(ValueError):
        SimConfig(kernel_tau_max_gamma=0.5)
    with pytest.raises(ValueError):
        SimConfig(trial_length_s=1.5e-10)
    with pytest.raises(ValueError):
        DetectorConfig(efficiency=(1, 1))
    with pytest.raises(ValueError):
        SimConfig.from_dict({"nonsense": 1})


def test_default_truncation_follows_chi():
    cfg = SimConfig(params=ModelParams(20, 1.0, 1.0))
    assert cfg.kernel_tau_max_gamma == pytest.approx(4.0)
    cfg2 = cfg.replace(params=FITTED_PARAMS)
    assert cfg2.kernel_tau_max_gamma == pytest.approx(2 * math.pi * 6.07e6 * 31e-9)


def test_config_dict_round_trip():
    cfg = small(envelope=RateEnvelope(1e-5, 1e-3), detector=DetectorConfig(dark_rate_hz=(1, 2, 3, 4)))
    assert SimConfig.from_dict(cfg.to_dict()) == cfg


def test_scan_rate_scale_semantics(tmp_path):
    base = small(trial_count=4)
    cfgs = scan_configs(base, "rate_scale", [0.5, 2.0])
    P = base.resolved_pair_rate()
    assert cfgs[0].background_rate_hz == base.background_rate_hz * 0.5
    assert cfgs[1].pair_rate_hz == pytest.approx(4 * P)
    assert [c.seed for c in cfgs] == [base.seed, base.seed ^ 1]
    out = scan(base, "delta_prime_ratio", [15.0, 25.0], out_dir=tmp_path)
    assert (tmp_path / "manifest.json").exists()
    assert tt.load(tmp_path / out[1]["file"]) == out[1]["dataset"]
    with pytest.raises(ValueError):
        scan_configs(base, "colour", [1])
