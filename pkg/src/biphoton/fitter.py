"""Weighted damped least-squares fit of the empirical cross-correlation.

The free parameters are the amplitude factor ``f``, the decay factor ``chi``
and the beat frequency ``delta_prime_ratio``; the offset of 1 and the
``4/pi^2`` prefactor are fixed by the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .correlator import CorrelationCurve
from .model import AMPLITUDE, AutoCorrelationLevels, ModelParams, g12_empirical, r_model

PARAM_NAMES = ("f", "chi", "delta_prime_ratio")
_FLOOR = 1e-9


class FitError(ValueError):
    pass


class NoOscillation(FitError):
    pass


class DegenerateFit(FitError):
    pass


def jacobian(tau_gamma, params: ModelParams) -> np.ndarray:
    """Partial derivatives of the empirical curve w.r.t. (f, chi, delta_prime_ratio).

    Returns an array of shape ``tau_gamma.shape + (3,)``.
    """
    x = np.abs(np.asarray(tau_gamma, dtype=float))
    f, chi, d = params.f, params.chi, params.delta_prime_ratio
    e1 = np.exp(-chi * x)
    e2 = np.exp(-0.5 * chi * x)
    c = np.cos(d * x)
    s = np.sin(d * x)
    d_f = AMPLITUDE * (1.0 + e1 - 2.0 * c * e2)
    d_chi = AMPLITUDE * f * (-x * e1 + x * c * e2)
    d_d = AMPLITUDE * f * (2.0 * x * s * e2)
    return np.stack([d_f, d_chi, d_d], axis=-1)


def _with_theta(params: ModelParams, theta) -> ModelParams:
    return params.with_values(f=float(theta[0]), chi=float(theta[1]), delta_prime_ratio=float(theta[2]))


def gradient_check(params: ModelParams, tau_gamma, rel_step: float = 1e-6) -> float:
    """Worst deviation between analytic and central-difference partials.

    Each parameter's deviations are measured relative to the largest
    magnitude of that partial over the supplied points, so sign changes of
    a partial do not blow up the ratio.
    """
    x = np.atleast_1d(np.asarray(tau_gamma, dtype=float))
    analytic = jacobian(x, params)
    theta = np.array([params.f, params.chi, params.delta_prime_ratio])
    worst = 0.0
    for k in range(3):
        h = rel_step * max(abs(theta[k]), 1.0)
        up, dn = theta.copy(), theta.copy()
        up[k] += h
        dn[k] -= h
        fd = (g12_empirical(x, _with_theta(params, up)) - g12_empirical(x, _with_theta(params, dn))) / (2 * h)
        scale = np.max(np.abs(analytic[:, k]))
        if scale == 0:
            dev = np.max(np.abs(fd))
        else:
            dev = np.max(np.abs(analytic[:, k] - fd)) / scale
        worst = max(worst, float(dev))
    return worst


@dataclass
class FitResult:
    params: ModelParams
    stderr: dict
    covariance: np.ndarray
    chi_square: float
    degrees_of_freedom: int
    converged: bool
    iterations: int
    gamma_hz: float
    history: list = field(default_factory=list)

    @property
    def reduced_chi_square(self) -> float:
        return self.chi_square / self.degrees_of_freedom if self.degrees_of_freedom > 0 else math.nan

    def to_dict(self) -> dict:
        return {
            "params": self.params.as_dict(),
            "stderr": dict(self.stderr),
            "covariance": self.covariance.tolist(),
            "chi_square": self.chi_square,
            "degrees_of_freedom": self.degrees_of_freedom,
            "reduced_chi_square": self.reduced_chi_square,
            "converged": self.converged,
            "iterations": self.iterations,
            "gamma_hz": self.gamma_hz,
        }


def bin_sampling(bin_width_units: float, per_unit: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Offsets (units) and weights that average a curve over a bin of quantised delays.

    Each integer lag inside the bin collects true delays spread by a
    triangle of half-width one unit (both tags are floored to the grid).
    """
    half = bin_width_units / 2.0
    lags = np.arange(math.ceil(-half), math.ceil(half))
    u = (np.arange(2 * per_unit) + 0.5) / per_unit - 1.0
    tri = 1.0 - np.abs(u)
    offsets = (lags[:, None] + u[None, :]).ravel()
    weights = np.tile(tri, lags.size)
    return offsets, weights / weights.sum()


class _Problem:
    def __init__(self, x, y, sigma, offsets=None, weights=None):
        self.y = y
        self.sigma = sigma
        if offsets is None:
            self.xs = x[:, None]
            self.w = np.ones(1)
        else:
            self.xs = x[:, None] + offsets[None, :]
            self.w = weights

    def model(self, params):
        return g12_empirical(self.xs, params) @ self.w

    def jac(self, params):
        return np.einsum("nsk,s->nk", jacobian(self.xs, params), self.w)

    def chi2(self, params):
        r = (self.y - self.model(params)) / self.sigma
        return float(r @ r)


def fit_arrays(tau_gamma, g, sigma, guess: ModelParams, gamma_hz: float = math.nan,
               offsets_gamma=None, weights=None, max_iter: int = 500) -> FitResult:
    """Damped least squares on raw arrays (delays in units of 1/Gamma).

    Damping starts at 1e-3, is multiplied by 10 after a rejected step and
    divided by 10 after an accepted one. The fit has converged once three
    consecutive iterations show a relative chi-square decrease below 1e-8 or
    a step norm below 1e-10.
    """
    x = np.asarray(tau_gamma, dtype=float)
    y = np.asarray(g, dtype=float)
    s = np.asarray(sigma, dtype=float)
    if x.size < 10:
        raise FitError(f"need at least 10 valid bins, got {x.size}")
    if not np.all(s > 0):
        raise FitError("every bin needs a positive standard error")
    prob = _Problem(x, y, s, offsets_gamma, weights)
    params = guess
    theta = np.array([guess.f, guess.chi, guess.delta_prime_ratio], dtype=float)
    chi2 = prob.chi2(params)
    history = [chi2]
    lam = 1e-3
    quiet = 0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        J = prob.jac(params) / s[:, None]
        r = (y - prob.model(params)) / s
        A = J.T @ J
        grad = J.T @ r
        try:
            step = np.linalg.solve(A + lam * np.diag(np.diag(A)), grad)
        except np.linalg.LinAlgError:
            raise DegenerateFit("normal matrix is singular") from None
        trial_theta = theta + step
        trial_theta[:2] = np.maximum(trial_theta[:2], _FLOOR)
        trial_params = _with_theta(params, trial_theta)
        trial_chi2 = prob.chi2(trial_params)
        step_norm = float(np.linalg.norm(trial_theta - theta))
        if trial_chi2 <= chi2:
            rel = (chi2 - trial_chi2) / chi2 if chi2 > 0 else 0.0
            theta, params, chi2 = trial_theta, trial_params, trial_chi2
            history.append(chi2)
            lam = max(lam / 10.0, 1e-15)
            small = rel < 1e-8 or step_norm < 1e-10
        else:
            lam *= 10.0
            small = step_norm < 1e-10
        quiet = quiet + 1 if small else 0
        if quiet >= 3:
            converged = True
            break
    J = prob.jac(params) / s[:, None]
    A = J.T @ J
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > 1e14:
        raise DegenerateFit("normal matrix is singular at the optimum")
    dof = x.size - 3
    cov = np.linalg.inv(A) * (chi2 / dof if dof > 0 else 1.0)
    stderr = {name: float(math.sqrt(max(cov[k, k], 0.0))) for k, name in enumerate(PARAM_NAMES)}
    return FitResult(params, stderr, cov, float(chi2), dof, converged, it, gamma_hz, history)


def _curve_arrays(curve: CorrelationCurve, gamma_hz: float):
    ok = curve.valid & np.isfinite(curve.g) & (curve.stderr > 0)
    gamma = 2.0 * math.pi * gamma_hz
    return curve.tau_s[ok] * gamma, curve.g[ok], curve.stderr[ok]


def fit(curve: CorrelationCurve, guess: ModelParams, gamma_hz: float, bin_average: bool = True,
        max_iter: int = 500) -> FitResult:
    """Fit the empirical model to a measured correlation curve.

    ``gamma_hz`` is Gamma/2pi and converts delays to units of 1/Gamma. With
    ``bin_average`` the model is averaged over each bin's quantised delays
    instead of evaluated at bin centres. Invalid bins are excluded.
    """
    x, y, s = _curve_arrays(curve, gamma_hz)
    offsets = weights = None
    if bin_average:
        res_s = curve.resolution_ps * 1e-12
        off, weights = bin_sampling(curve.bin_width_s / res_s)
        offsets = off * res_s * 2.0 * math.pi * gamma_hz
    return fit_arrays(x, y, s, guess, gamma_hz, offsets, weights, max_iter)


def _dominant_frequency(x, y, sigma, min_cycles=1.5, pad=16):
    yy = y - y.mean()
    n = yy.size
    dx = float(np.median(np.diff(x)))
    spec = np.abs(np.fft.rfft(yy, n=pad * n)) ** 2
    omega = 2.0 * math.pi * np.fft.rfftfreq(pad * n, d=dx)
    span = x[-1] - x[0] + dx
    band = omega >= 2.0 * math.pi * min_cycles / span
    if not band.any():
        raise NoOscillation("curve too short to resolve an oscillation")
    noise = float(np.sum(sigma**2))
    k = int(np.argmax(np.where(band, spec, -1.0)))
    if not spec[k] > max(10.0 * noise, 1e-20):
        raise NoOscillation("no spectral peak above the noise floor")
    if 0 < k < spec.size - 1:
        a, b, c = spec[k - 1], spec[k], spec[k + 1]
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom != 0 else 0.0
        return omega[k] + shift * (omega[1] - omega[0])
    return omega[k]


def _peak_near(x, y, center, halfwidth):
    sel = np.abs(x - center) <= halfwidth
    if not sel.any():
        return None
    i = np.flatnonzero(sel)[int(np.argmax(y[sel]))]
    return x[i], y[i]


def initial_guess(curve: CorrelationCurve, gamma_hz: float, delta_ratio: float | None = None) -> ModelParams:
    """Starting point for :func:`fit` read off the curve itself.

    The beat frequency comes from the strongest non-trivial DFT component of
    the positive-delay half; ``f`` from the peak height; ``chi`` from the
    ratio of the first two interference peaks.
    """
    x, y, s = _curve_arrays(curve, gamma_hz)
    pos = x > 0
    x, y, s = x[pos], y[pos], s[pos]
    if x.size < 4:
        raise NoOscillation("too few positive-delay bins")
    beat = _dominant_frequency(x, y, s)
    f = float(np.clip((y.max() - 1.0) * math.pi**2 / 16.0, 0.1, 10.0))
    period = 2.0 * math.pi / beat
    chi = 1.0
    p1 = _peak_near(x, y, 0.5 * period, 0.25 * period)
    p2 = _peak_near(x, y, 1.5 * period, 0.25 * period)
    if p1 is not None and p2 is not None and p1[1] > 1.0 and p2[1] > 1.0:
        (x1, h1), (x2, h2) = p1, p2
        target = math.sqrt((h2 - 1.0) / (h1 - 1.0))

        def mismatch(c):
            return (1.0 + math.exp(-0.5 * c * x2)) / (1.0 + math.exp(-0.5 * c * x1)) - target

        # the peak ratio is not monotone in chi: take the first root from below
        grid = np.geomspace(0.2, 20.0, 400)
        vals = np.array([mismatch(c) for c in grid])
        cross = np.flatnonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))
        if cross.size:
            i = int(cross[0])
            chi = brentq(mismatch, grid[i], grid[i + 1])
        else:
            chi = float(grid[int(np.argmin(np.abs(vals)))])
    delta = beat if delta_ratio is None else delta_ratio
    return ModelParams(delta_ratio=delta, f=f, chi=float(chi), delta_prime_ratio=float(beat))


def predict_r(result: FitResult, autos: AutoCorrelationLevels, tau_gamma) -> np.ndarray:
    """Classical-bound ratio implied by the fitted curve and measured autocorrelations."""
    if not result.converged:
        raise FitError("fit did not converge; refusing to predict R")
    return r_model(tau_gamma, result.params, autos)
