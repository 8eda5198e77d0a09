"""Closed-form biphoton cross-correlation curves and the classical bound.

All times here are dimensionless, ``x = Gamma * tau``. Detunings are given in
units of the natural linewidth Gamma.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

AMPLITUDE = 4.0 / math.pi**2
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class ModelParams:
    """Parameters of the empirical correlation curve.

    ``delta_ratio`` is the laser detuning Delta/Gamma. ``f`` scales the
    correlated excess, ``chi`` multiplies the decay rate and
    ``delta_prime_ratio`` is the beat frequency in units of Gamma; when left
    as ``None`` it equals ``delta_ratio``.
    """

    delta_ratio: float = 20.0
    f: float = 1.0
    chi: float = 1.0
    delta_prime_ratio: float | None = None

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError(f"f must be positive, got {self.f}")
        if not self.chi > 0:
            raise ValueError(f"chi must be positive, got {self.chi}")
        if self.delta_prime_ratio is None:
            object.__setattr__(self, "delta_prime_ratio", float(self.delta_ratio))

    @classmethod
    def theory(cls, delta_ratio: float) -> "ModelParams":
        return cls(delta_ratio=delta_ratio, f=1.0, chi=1.0, delta_prime_ratio=delta_ratio)

    def with_values(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return {
            "delta_ratio": self.delta_ratio,
            "f": self.f,
            "chi": self.chi,
            "delta_prime_ratio": self.delta_prime_ratio,
        }


@dataclass(frozen=True)
class AutoCorrelationLevels:
    """Equal-time autocorrelations of fields 1 and 2."""

    g11_zero: float = 2.0
    g22_zero: float = 2.0

    def __post_init__(self):
        if not (self.g11_zero > 0 and self.g22_zero > 0):
            raise ValueError("autocorrelation levels must be positive")
        if self.g11_zero < 1 or self.g22_zero < 1:
            warnings.warn(
                f"autocorrelation below 1 ({self.g11_zero}, {self.g22_zero}) is antibunched",
                stacklevel=2,
            )

    @property
    def product(self) -> float:
        return self.g11_zero * self.g22_zero


def _bracket(x, chi, beat):
    ax = np.abs(x)
    return 1.0 + np.exp(-chi * ax) - 2.0 * np.cos(beat * ax) * np.exp(-0.5 * chi * ax)


def g12_theory(tau_gamma, delta_over_gamma):
    """Cross-correlation of the two-level-atom biphoton source.

    ``1 + 4/pi^2 [1 + exp(-|x|) - 2 cos(D|x|) exp(-|x|/2)]`` with ``x`` the
    delay in units of 1/Gamma and ``D`` the detuning in units of Gamma.
    """
    out = 1.0 + AMPLITUDE * _bracket(np.asarray(tau_gamma, dtype=float), 1.0, float(delta_over_gamma))
    return out if np.ndim(out) else float(out)


def g12_empirical(tau_gamma, params: ModelParams):
    """Cross-correlation with free amplitude ``f``, decay ``chi`` and beat frequency.

    Identical to :func:`g12_theory` when ``f = chi = 1`` and the beat
    frequency equals the detuning.
    """
    x = np.asarray(tau_gamma, dtype=float)
    out = 1.0 + AMPLITUDE * params.f * _bracket(x, params.chi, params.delta_prime_ratio)
    return out if np.ndim(out) else float(out)


def r_model(tau_gamma, params: ModelParams, autos: AutoCorrelationLevels):
    """Classical-bound ratio g12(x)^2 / (g11(0) g22(0)) for the model curve."""
    g = np.asarray(g12_empirical(tau_gamma, params))
    out = g * g / autos.product
    return out if np.ndim(out) else float(out)


def oscillation_period(beat: float) -> float:
    """Period of the interference term in units of 1/Gamma (inf for no beat)."""
    return math.inf if beat == 0 else 2.0 * math.pi / abs(beat)


def golden_section_max(func, lo: float, hi: float, tol: float = 1e-12, max_iter: int = 200):
    """Maximise a unimodal ``func`` on ``[lo, hi]`` by golden-section search."""
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = func(c), func(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = func(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = func(d)
    x = 0.5 * (a + b)
    return x, func(x)


def find_extremum(curve, lo: float, hi: float, period: float | None = None, max_points: int = 2_000_000):
    """Global maximum of ``curve`` on ``[lo, hi]``.

    A dense scan with step at most ``period / 50`` locates the best sample,
    which is then refined by golden-section search on the bracket formed by
    its neighbours. ``curve`` must accept numpy arrays. Returns
    ``(x_at_max, value)``.
    """
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError("search range must be finite")
    if not hi > lo:
        raise ValueError(f"empty search range [{lo}, {hi}]")
    step = (hi - lo) / 1000.0
    if period is not None and math.isfinite(period) and period > 0:
        step = min(step, period / 50.0)
    n = int(math.ceil((hi - lo) / step)) + 1
    if n > max_points:
        raise ValueError(f"scan would need {n} points; narrow the range")
    grid = np.linspace(lo, hi, n)
    values = np.asarray(curve(grid), dtype=float)
    k = int(np.argmax(values))
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, n - 1)]
    x, v = golden_section_max(lambda s: float(curve(np.array([s]))[0]), a, b)
    if v < values[k]:
        return float(grid[k]), float(values[k])
    return float(x), float(v)


def model_peak(params: ModelParams, lo: float = 0.0, hi: float = 5.0):
    """Location and value of the largest g12 in ``[lo, hi]`` (units of 1/Gamma)."""
    return find_extremum(lambda x: g12_empirical(x, params), lo, hi,
                         period=oscillation_period(params.delta_prime_ratio))
