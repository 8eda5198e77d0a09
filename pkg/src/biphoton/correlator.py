"""Windowed singles, coincidence histograms, normalised correlations and the
Cauchy-Schwarz ratio from time-tagged data.

Delays are ``tau = t_B - t_A`` for a tag on channel A and a tag on channel B
in the same trial. Bin ``k`` covers ``[k w - w/2, k w + w/2)``. Counting is
done per integer lag (one resolution unit) by the compiled kernel and then
folded into bins, so every estimate is an exact function of the per-lag
histogram.

All accumulators are additive over trials: datasets too large for memory
can be fed block by block (see :class:`CorrelationAccumulator`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .timetag import DetectorChannel, TagDataset

DEFAULT_WINDOW_T_S = 10e-6
DEFAULT_TAU_RANGE_S = 30e-9
DEFAULT_BIN_WIDTH_S = 0.5e-9

CROSS_PAIRS = ((DetectorChannel.D1A, DetectorChannel.D2B), (DetectorChannel.D1B, DetectorChannel.D2A))
AUTO_PAIRS = ((DetectorChannel.D1A, DetectorChannel.D1B), (DetectorChannel.D2A, DetectorChannel.D2B))


class CorrelationError(ValueError):
    pass


class InvalidFactor(CorrelationError):
    """A factor of the Cauchy-Schwarz ratio has no valid estimate."""


def _to_fs(seconds: float) -> int:
    return int(round(seconds * 1e15))


def parse_pair(text) -> tuple[DetectorChannel, DetectorChannel]:
    if isinstance(text, str):
        a, b = text.split(",")
    else:
        a, b = text
    return DetectorChannel.parse(a), DetectorChannel.parse(b)


@dataclass(frozen=True)
class CorrelationRequest:
    """What to correlate and how to bin it.

    Leaving ``window_center_s`` and ``window_T_s`` as ``None`` selects the
    whole trial as the window (the trial-averaged correlation).
    """

    channel_pair: tuple = (DetectorChannel.D1A, DetectorChannel.D2B)
    window_center_s: float | None = None
    window_T_s: float | None = None
    tau_range_s: float = DEFAULT_TAU_RANGE_S
    bin_width_s: float = DEFAULT_BIN_WIDTH_S

    def __post_init__(self):
        object.__setattr__(self, "channel_pair", parse_pair(self.channel_pair))
        if not self.bin_width_s > 0:
            raise CorrelationError("bin width must be positive")
        if self.tau_range_s < 0:
            raise CorrelationError("tau range must be non-negative")
        ratio = Fraction(_to_fs(self.tau_range_s), _to_fs(self.bin_width_s))
        if ratio.denominator != 1:
            raise CorrelationError(
                f"tau range {self.tau_range_s:g} s is not a whole number of {self.bin_width_s:g} s bins")
        if self.window_T_s is not None and not self.window_T_s > 0:
            raise CorrelationError("window length must be positive")

    @property
    def full_trial(self) -> bool:
        return self.window_T_s is None and self.window_center_s is None

    def describe(self) -> dict:
        a, b = self.channel_pair
        return {
            "pair": f"{a.label},{b.label}",
            "window_center_s": self.window_center_s,
            "window_T_s": self.window_T_s,
            "tau_range_s": self.tau_range_s,
            "bin_width_s": self.bin_width_s,
        }


@dataclass(frozen=True)
class Binning:
    """A request resolved against a dataset's resolution and trial length (integer units)."""

    resolution_ps: int
    trial_length_units: int
    start: int
    stop: int
    width: Fraction
    nbins_half: int
    lag_min: int
    lag_max: int
    lag_bin: np.ndarray  # bin index (0..2K) for each lag in [lag_min, lag_max]

    @property
    def nbins(self) -> int:
        return 2 * self.nbins_half + 1

    @property
    def window_units(self) -> int:
        return self.stop - self.start

    @property
    def bin_index(self) -> np.ndarray:
        return np.arange(-self.nbins_half, self.nbins_half + 1)

    def tau_centers_s(self) -> np.ndarray:
        return self.bin_index * float(self.width) * self.resolution_ps * 1e-12

    def shifts(self) -> np.ndarray:
        """Integer shift (units) applied to channel B's window for each bin."""
        return np.array([int(math.floor(k * self.width + Fraction(1, 2))) for k in self.bin_index.tolist()],
                        dtype=np.int64)

    def slot_pairs(self) -> np.ndarray:
        """Number of (s, s + lag) slot pairs with s in the window and s + lag in the trial, per bin."""
        lags = np.arange(self.lag_min, self.lag_max + 1, dtype=np.int64)
        hi = np.minimum(self.stop, self.trial_length_units - lags)
        lo = np.maximum(self.start, -lags)
        per_lag = np.clip(hi - lo, 0, None)
        return np.bincount(self.lag_bin, weights=per_lag, minlength=self.nbins)

    def shifted_lengths(self) -> np.ndarray:
        sh = self.shifts()
        lo = np.maximum(self.start + sh, 0)
        hi = np.minimum(self.stop + sh, self.trial_length_units)
        return np.clip(hi - lo, 0, None)


def resolve(request: CorrelationRequest, resolution_ps: int, trial_length_units: int) -> Binning:
    res_fs = resolution_ps * 1000
    width = Fraction(_to_fs(request.bin_width_s), res_fs)
    if width < 1:
        raise CorrelationError(
            f"bin width {request.bin_width_s:g} s is below the {resolution_ps} ps resolution")
    K = int(Fraction(_to_fs(request.tau_range_s), _to_fs(request.bin_width_s)))
    L = trial_length_units
    if request.full_trial:
        start, stop = 0, L
    else:
        T = request.window_T_s if request.window_T_s is not None else DEFAULT_WINDOW_T_S
        center = request.window_center_s if request.window_center_s is not None else 0.5 * L * resolution_ps * 1e-12
        start = int(round((center - 0.5 * T) / (resolution_ps * 1e-12)))
        stop = int(round((center + 0.5 * T) / (resolution_ps * 1e-12)))
        if start < 0 or stop > L or stop <= start:
            raise CorrelationError(
                f"window [{start}, {stop}) units lies outside the trial [0, {L})")
    half = width / 2
    lag_min = math.ceil(-K * width - half)
    lag_max = math.ceil(K * width + half) - 1
    lags = range(lag_min, lag_max + 1)
    # exact rational arithmetic keeps bin edges reproducible
    lag_bin = np.array([math.floor((lag + half) / width) + K for lag in lags], dtype=np.int64)
    return Binning(resolution_ps, L, start, stop, width, K, lag_min, lag_max, lag_bin)


@dataclass
class CorrelationCurve:
    """Binned normalised correlation ``g = counts / accidental_norm``."""

    tau_s: np.ndarray
    counts: np.ndarray
    accidental_norm: np.ndarray
    g: np.ndarray
    stderr: np.ndarray
    valid: np.ndarray
    joint_probability: np.ndarray
    request: CorrelationRequest
    resolution_ps: int
    trial_count: int
    singles: tuple = (0, 0)

    @property
    def bin_width_s(self) -> float:
        return self.request.bin_width_s

    def value_at_zero(self) -> tuple[float, float, bool]:
        k = int(np.argmin(np.abs(self.tau_s)))
        return float(self.g[k]), float(self.stderr[k]), bool(self.valid[k])

    def to_rows(self):
        for row in zip(self.tau_s, self.counts, self.accidental_norm, self.g, self.stderr, self.valid):
            yield row


def _stderr(g, counts, acc):
    # Poisson error on the coincidence count; zero-count bins get the count-1 bound
    with np.errstate(divide="ignore", invalid="ignore"):
        se = np.where(counts > 0, g / np.sqrt(np.maximum(counts, 1)), 1.0 / acc)
    return np.where(acc > 0, se, np.nan)


def normalize(fine_counts, n_a: int, n_b_shifted, trial_count: int, binning: Binning,
              request: CorrelationRequest) -> CorrelationCurve:
    """Turn per-lag coincidences and window singles into a :class:`CorrelationCurve`.

    ``n_a`` is the number of A tags in the window (all trials) and
    ``n_b_shifted[k]`` the number of B tags in the window shifted by bin k's
    delay. The accidental level of bin k is
    ``p_A * p_B(k) * trial_count * slot_pairs(k)``.
    """
    counts = np.bincount(binning.lag_bin, weights=fine_counts, minlength=binning.nbins).astype(np.int64)
    slots = binning.slot_pairs()
    lengths = binning.shifted_lengths()
    M = trial_count
    with np.errstate(divide="ignore", invalid="ignore"):
        p_a = n_a / (M * binning.window_units)
        p_b = np.where(lengths > 0, np.asarray(n_b_shifted) / (M * np.maximum(lengths, 1)), 0.0)
        acc = p_a * p_b * M * slots
        valid = acc > 0
        g = np.where(valid, counts / np.where(valid, acc, 1.0), np.nan)
        joint = np.where(slots > 0, counts / (M * np.maximum(slots, 1)), np.nan)
    return CorrelationCurve(
        tau_s=binning.tau_centers_s(),
        counts=counts,
        accidental_norm=acc,
        g=g,
        stderr=_stderr(g, counts, acc),
        valid=valid,
        joint_probability=joint,
        request=request,
        resolution_ps=binning.resolution_ps,
        trial_count=M,
        singles=(int(n_a), int(np.asarray(n_b_shifted)[binning.nbins_half])),
    )


class _ChannelView:
    """Per-channel sorted keys ``trial * stride + t`` and times of one dataset."""

    def __init__(self, dataset: TagDataset, stride: int):
        self.dataset = dataset
        self.stride = stride
        self._cache = {}

    def get(self, ch):
        ch = int(ch)
        if ch not in self._cache:
            mask = self.dataset.channel == ch
            trial = self.dataset.trial[mask].astype(np.int64)
            t = self.dataset.t[mask].astype(np.int64)
            self._cache[ch] = (trial * self.stride + t, t)
        return self._cache[ch]


def _window_keys(keys, t, start, stop, L):
    if start == 0 and stop == L:
        return keys
    return keys[(t >= start) & (t < stop)]


def _count_shifted(t_sorted, binning: Binning):
    sh = binning.shifts()
    lo = np.maximum(binning.start + sh, 0)
    hi = np.minimum(binning.stop + sh, binning.trial_length_units)
    return np.searchsorted(t_sorted, hi, side="left") - np.searchsorted(t_sorted, lo, side="left")


class CorrelationAccumulator:
    """Accumulate correlation estimates for several requests over datasets.

    All datasets passed to :meth:`add` must share resolution and trial length;
    results are independent of how trials are split between calls.
    """

    def __init__(self, requests: Sequence[CorrelationRequest], resolution_ps: int, trial_length_units: int):
        self.requests = list(requests)
        self.resolution_ps = resolution_ps
        self.trial_length_units = trial_length_units
        self.binnings = [resolve(r, resolution_ps, trial_length_units) for r in self.requests]
        span = max(max(abs(b.lag_min), abs(b.lag_max)) for b in self.binnings) if self.binnings else 0
        self.stride = trial_length_units + span + 1
        self.trial_count = 0
        self.fine = [np.zeros(b.lag_max - b.lag_min + 1, dtype=np.int64) for b in self.binnings]
        self.n_a = [0] * len(self.requests)
        self.n_b = [np.zeros(b.nbins, dtype=np.int64) for b in self.binnings]

    @classmethod
    def for_dataset(cls, requests, dataset: TagDataset) -> "CorrelationAccumulator":
        return cls(requests, dataset.resolution_ps, dataset.trial_length_units)

    def add(self, dataset: TagDataset) -> "CorrelationAccumulator":
        if (dataset.resolution_ps, dataset.trial_length_units) != (self.resolution_ps, self.trial_length_units):
            raise CorrelationError("dataset geometry differs from the accumulator's")
        view = _ChannelView(dataset, self.stride)
        sorted_t = {}
        L = self.trial_length_units
        for i, (req, b) in enumerate(zip(self.requests, self.binnings)):
            ch_a, ch_b = req.channel_pair
            keys_a, t_a = view.get(ch_a)
            keys_b, t_b = view.get(ch_b)
            wa = _window_keys(keys_a, t_a, b.start, b.stop, L)
            self.fine[i] += _kernels.fine_coincidences(wa, keys_b, b.lag_min, b.lag_max)
            self.n_a[i] += int(wa.size)
            if int(ch_b) not in sorted_t:
                sorted_t[int(ch_b)] = np.sort(t_b)
            self.n_b[i] += _count_shifted(sorted_t[int(ch_b)], b)
        self.trial_count += dataset.trial_count
        return self

    def curves(self) -> list[CorrelationCurve]:
        if self.trial_count == 0:
            raise CorrelationError("no trials accumulated")
        return [normalize(self.fine[i], self.n_a[i], self.n_b[i], self.trial_count, b, r)
                for i, (r, b) in enumerate(zip(self.requests, self.binnings))]


def singles_probability(dataset: TagDataset, channel, window_center_s=None, window_T_s=None):
    """Detection probability per resolution slot on ``channel`` within a window.

    Returns ``(p, count)``; the window defaults to the whole trial.
    """
    req = CorrelationRequest((channel, channel), window_center_s, window_T_s, 0.0, dataset.resolution_s)
    b = resolve(req, dataset.resolution_ps, dataset.trial_length_units)
    _, t = dataset.select(channel)
    count = int(np.count_nonzero((t >= b.start) & (t < b.stop)))
    return count / (dataset.trial_count * b.window_units), count


def coincidence_histogram(dataset: TagDataset, request: CorrelationRequest) -> np.ndarray:
    """Raw coincidence counts per bin (bins ordered from -K to +K)."""
    acc = CorrelationAccumulator([request], dataset.resolution_ps, dataset.trial_length_units).add(dataset)
    b = acc.binnings[0]
    return np.bincount(b.lag_bin, weights=acc.fine[0], minlength=b.nbins).astype(np.int64)


def fine_histogram(dataset: TagDataset, request: CorrelationRequest) -> tuple[np.ndarray, np.ndarray]:
    """Coincidences per integer lag: ``(lags, counts)``."""
    acc = CorrelationAccumulator([request], dataset.resolution_ps, dataset.trial_length_units).add(dataset)
    b = acc.binnings[0]
    return np.arange(b.lag_min, b.lag_max + 1), acc.fine[0]


def correlate(dataset: TagDataset, request: CorrelationRequest) -> CorrelationCurve:
    return correlate_many(dataset, [request])[0]


def correlate_many(dataset: TagDataset, requests: Sequence[CorrelationRequest]) -> list[CorrelationCurve]:
    return CorrelationAccumulator(requests, dataset.resolution_ps, dataset.trial_length_units).add(dataset).curves()


# --- Cauchy-Schwarz --------------------------------------------------------


@dataclass
class CsResult:
    tau_s: np.ndarray
    r: np.ndarray
    r_stderr: np.ndarray
    valid: np.ndarray
    r_max: float
    r_max_stderr: float
    tau_at_max_s: float
    violation_sigma: float
    factors: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "r_max": self.r_max,
            "r_max_stderr": self.r_max_stderr,
            "tau_at_max_s": self.tau_at_max_s,
            "violation_sigma": self.violation_sigma,
            "factors": self.factors,
            "r_curve": [
                {"tau_s": float(t), "r": (None if not v else float(r)), "stderr": (None if not v else float(s))}
                for t, r, s, v in zip(self.tau_s, self.r, self.r_stderr, self.valid)
            ],
        }


def cs_requests(tau_range_s=DEFAULT_TAU_RANGE_S, bin_width_s=DEFAULT_BIN_WIDTH_S) -> list[CorrelationRequest]:
    """Full-trial requests: the two cross pairs over +-tau_range, the two autocorrelations at tau = 0."""
    cross = [CorrelationRequest(p, tau_range_s=tau_range_s, bin_width_s=bin_width_s) for p in CROSS_PAIRS]
    auto = [CorrelationRequest(p, tau_range_s=0.0, bin_width_s=bin_width_s) for p in AUTO_PAIRS]
    return cross + auto


def cauchy_schwarz_from_curves(g_1a2b: CorrelationCurve, g_1b2a: CorrelationCurve,
                               g_1a1b: CorrelationCurve, g_2a2b: CorrelationCurve) -> CsResult:
    """Form ``R(tau) = g_1a2b g_1b2a / (g_1a1b(0) g_2a2b(0))`` with quadrature errors."""
    names = {"g_1a1b(0)": g_1a1b, "g_2a2b(0)": g_2a2b}
    autos = {}
    for name, curve in names.items():
        g, se, ok = curve.value_at_zero()
        if not ok or curve.counts[int(np.argmin(np.abs(curve.tau_s)))] == 0:
            raise InvalidFactor(f"{name} has no coincidences; cannot normalise R")
        autos[name] = (g, se)
    for name, curve in (("g_1a2b", g_1a2b), ("g_1b2a", g_1b2a)):
        if not curve.valid.any():
            raise InvalidFactor(f"{name} has no valid bins (zero singles)")
    (g11, s11), (g22, s22) = autos["g_1a1b(0)"], autos["g_2a2b(0)"]
    valid = g_1a2b.valid & g_1b2a.valid
    ga = np.where(valid, g_1a2b.g, 0.0)
    gb = np.where(valid, g_1b2a.g, 0.0)
    sa = np.where(valid, g_1a2b.stderr, 0.0)
    sb = np.where(valid, g_1b2a.stderr, 0.0)
    denom = g11 * g22
    r = ga * gb / denom
    r_se = np.sqrt(((sa * gb) / denom) ** 2 + ((ga * sb) / denom) ** 2
                   + (r * s11 / g11) ** 2 + (r * s22 / g22) ** 2)
    r = np.where(valid, r, np.nan)
    r_se = np.where(valid, r_se, np.nan)
    k = int(np.nanargmax(r))
    r_max, r_max_se = float(r[k]), float(r_se[k])
    sigma = (r_max - 1.0) / r_max_se if r_max_se > 0 else math.inf
    factors = {
        "g_1a1b_0": g11, "g_1a1b_0_stderr": s11,
        "g_2a2b_0": g22, "g_2a2b_0_stderr": s22,
        "g_1a2b_at_max": float(g_1a2b.g[k]), "g_1b2a_at_max": float(g_1b2a.g[k]),
    }
    return CsResult(g_1a2b.tau_s, r, r_se, valid, r_max, r_max_se, float(g_1a2b.tau_s[k]), sigma, factors)


def _require_channels(dataset: TagDataset):
    counts = dataset.channel_counts()
    missing = [ch.label for ch in DetectorChannel if counts[ch] == 0]
    if missing:
        raise InvalidFactor(f"channels without detections: {', '.join(missing)}")


def cauchy_schwarz(dataset: TagDataset, tau_range_s=DEFAULT_TAU_RANGE_S,
                   bin_width_s=DEFAULT_BIN_WIDTH_S) -> CsResult:
    _require_channels(dataset)
    return cauchy_schwarz_from_curves(*correlate_many(dataset, cs_requests(tau_range_s, bin_width_s)))


def cauchy_schwarz_stream(datasets: Iterable[TagDataset], tau_range_s=DEFAULT_TAU_RANGE_S,
                          bin_width_s=DEFAULT_BIN_WIDTH_S):
    """Like :func:`cauchy_schwarz` over a stream of trial blocks.

    Returns ``(CsResult, [g_1a2b, g_1b2a, g_1a1b, g_2a2b])``.
    """
    acc = None
    for ds in datasets:
        if acc is None:
            acc = CorrelationAccumulator(cs_requests(tau_range_s, bin_width_s), ds.resolution_ps,
                                         ds.trial_length_units)
        acc.add(ds)
    if acc is None:
        raise CorrelationError("empty dataset stream")
    curves = acc.curves()
    return cauchy_schwarz_from_curves(*curves), curves


# --- time-resolved series --------------------------------------------------


@dataclass
class SeriesPoint:
    t_s: float
    joint: float
    g: float
    g_stderr: float
    tau_s: float
    valid: bool


def _window_centers(dataset: TagDataset, T: float, stride: float) -> np.ndarray:
    L = dataset.trial_length_s
    if T > L:
        raise CorrelationError("window longer than the trial")
    n = int(math.floor((L - T) / stride + 1e-9)) + 1
    return 0.5 * T + stride * np.arange(n)


def windowed_max_series(dataset: TagDataset, channel_pair, T: float = DEFAULT_WINDOW_T_S,
                        stride: float = DEFAULT_WINDOW_T_S, tau_range_s: float = DEFAULT_TAU_RANGE_S,
                        bin_width_s: float = DEFAULT_BIN_WIDTH_S) -> list[SeriesPoint]:
    """Joint-probability and normalised-correlation series along the trial.

    Cross-field pairs report the maximum over tau; same-field pairs report the
    tau = 0 bin. Windows with no valid estimate are flagged ``valid=False``.
    """
    if stride < T / 10:
        raise CorrelationError("stride must be at least T/10")
    a, b = parse_pair(channel_pair)
    same_field = a.field == b.field
    requests = [
        CorrelationRequest((a, b), float(c), T, 0.0 if same_field else tau_range_s, bin_width_s)
        for c in _window_centers(dataset, T, stride)
    ]
    curves = correlate_many(dataset, requests)
    out = []
    for req, cur in zip(requests, curves):
        if same_field:
            k = int(np.argmin(np.abs(cur.tau_s)))
        elif cur.valid.any():
            k = int(np.nanargmax(np.where(cur.valid, cur.g, -np.inf)))
        else:
            k = 0
        ok = bool(cur.valid[k]) and cur.counts.sum() > 0
        out.append(SeriesPoint(
            t_s=req.window_center_s,
            joint=float(np.nanmax(cur.joint_probability)) if not same_field else float(cur.joint_probability[k]),
            g=float(cur.g[k]) if ok else math.nan,
            g_stderr=float(cur.stderr[k]) if ok else math.nan,
            tau_s=float(cur.tau_s[k]),
            valid=ok,
        ))
    return out


def singles_series(dataset: TagDataset, channel, T: float = DEFAULT_WINDOW_T_S,
                   stride: float = DEFAULT_WINDOW_T_S) -> list[tuple[float, float, int]]:
    """``(t, p, count)`` for windows of length ``T`` stepped by ``stride``."""
    _, t = dataset.select(channel)
    t = np.sort(t.astype(np.int64))
    res = dataset.resolution_s
    out = []
    for c in _window_centers(dataset, T, stride):
        start = int(round((c - 0.5 * T) / res))
        stop = int(round((c + 0.5 * T) / res))
        n = int(np.searchsorted(t, stop) - np.searchsorted(t, start))
        out.append((float(c), n / (dataset.trial_count * (stop - start)), n))
    return out
