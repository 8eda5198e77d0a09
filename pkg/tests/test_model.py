import math
import warnings

import numpy as np
import pytest

from biphoton.model import (AMPLITUDE, AutoCorrelationLevels, ModelParams, find_extremum, g12_empirical,
                            g12_theory, golden_section_max, model_peak, oscillation_period, r_model)
from oracles import dense_max, g12_theory_ref


def test_matches_scalar_reference():
    rng = np.random.default_rng(0)
    for _ in range(200):
        x = rng.uniform(-10, 10)
        d = rng.uniform(0, 100)
        assert g12_theory(x, d) == pytest.approx(g12_theory_ref(x, d), abs=1e-13)


def test_anchors():
    assert g12_theory(0.0, 20.0) == 1.0
    assert g12_theory(0.0, 1e3) == 1.0
    assert abs(g12_theory(50.0, 20.0) - (1 + 4 / math.pi**2)) < 1e-8


def test_even_in_tau():
    x = np.linspace(0, 7, 301)
    p = ModelParams(20, 1.58, 5.1, 21.53)
    assert np.array_equal(g12_empirical(x, p), g12_empirical(-x, p))


def test_bounds():
    x = np.linspace(0, 20, 20001)
    for d in (0.0, 3.0, 20.0, 100.0):
        g = g12_theory(x, d)
        assert g.min() >= 1.0 - 1e-15
        assert g.max() <= 1.0 + 4 * AMPLITUDE


def test_empirical_reduces_to_theory():
    x = np.linspace(-5, 5, 101)
    assert np.allclose(g12_empirical(x, ModelParams.theory(20)), g12_theory(x, 20), rtol=0, atol=0)


def test_envelope_without_beat():
    # with no detuning the bracket is (1 - exp(-x/2))^2
    x = np.linspace(0, 10, 50)
    assert np.allclose(g12_theory(x, 0.0), 1 + AMPLITUDE * (1 - np.exp(-x / 2)) ** 2)


def test_large_detuning_peak():
    x, g = find_extremum(lambda s: g12_theory(s, 1e3), 0.0, 5.0, period=oscillation_period(1e3))
    assert abs(g - 2.62) < 0.01
    assert x == pytest.approx(math.pi / 1e3, rel=0.05)


def test_peak_matches_dense_oracle():
    _, g = model_peak(ModelParams.theory(20))
    _, ref = dense_max(lambda s: g12_theory(s, 20), 0.0, 5.0, 1e-6)
    assert abs(g - ref) < 1e-4
    assert g >= ref - 1e-12


def test_fit_parameter_peak():
    x, g = model_peak(ModelParams(20, 1.58, 5.1, 21.53))
    _, ref = dense_max(lambda s: g12_empirical(s, ModelParams(20, 1.58, 5.1, 21.53)), 0.0, 5.0, 1e-6)
    assert g == pytest.approx(ref, abs=1e-8)
    assert 2.8 < g < 2.9


def test_find_extremum_errors():
    with pytest.raises(ValueError):
        find_extremum(np.sin, 1.0, 1.0)
    with pytest.raises(ValueError):
        find_extremum(np.sin, 0.0, math.inf)
    with pytest.raises(ValueError):
        find_extremum(np.sin, 0.0, 1e6, period=1e-3)


def test_golden_section():
    x, v = golden_section_max(lambda s: -(s - 0.3) ** 2, -1.0, 2.0)
    assert x == pytest.approx(0.3, abs=1e-9)
    assert v == pytest.approx(0.0, abs=1e-15)


def test_r_model_references():
    autos = AutoCorrelationLevels(2.0, 2.0)
    flat = ModelParams(20, f=1e-300, chi=1.0)
    assert r_model(3.0, flat, autos) == 0.25
    assert r_model(0.0, ModelParams.theory(20), autos) == 0.25
    _, g = model_peak(ModelParams.theory(1e3))
    assert abs(g * g / 4 - 1.71) < 0.01


def test_antibunched_autos_warn():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        AutoCorrelationLevels(0.5, 2.0)
    assert w
    with pytest.raises(ValueError):
        AutoCorrelationLevels(0.0, 2.0)


def test_params_validation():
    with pytest.raises(ValueError):
        ModelParams(20, f=0.0)
    with pytest.raises(ValueError):
        ModelParams(20, chi=-1.0)
    assert ModelParams(30).delta_prime_ratio == 30.0
    assert oscillation_period(0.0) == math.inf
