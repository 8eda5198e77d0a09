"""Synthetic time-tag generation for a biphoton source over thermal background.

Each field carries (i) photons from correlated pairs, whose field-2 partner is
delayed by a draw from the pair kernel, and (ii) an independent thermal
background: piecewise-constant intensity slices with exponentially
distributed intensity. Photons are routed to the two arms of each field,
thinned by detector efficiency, merged with dark counts, quantised and
filtered for dead time.

Randomness is drawn per block of ``trials_per_block`` trials from a
generator keyed on ``(seed, block index)``, so output does not depend on how
many worker threads generate blocks.
"""

from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid, quad

from . import _kernels
from .model import AMPLITUDE, ModelParams, oscillation_period
from .timetag import DetectorChannel, TagDataset, concat_trials, save

FITTED_PARAMS = ModelParams(delta_ratio=20.0, f=1.58, chi=5.1, delta_prime_ratio=21.53)
RB87_GAMMA_HZ = 6.07e6
DEFAULT_KERNEL_TAU_MAX_S = 31e-9


class SimulationError(ValueError):
    pass


class MemoryCapExceeded(SimulationError):
    pass


def _per_channel(value, name) -> tuple:
    if np.ndim(value) == 0:
        return (float(value),) * 4
    vals = tuple(float(v) for v in value)
    if len(vals) != 4:
        raise ValueError(f"{name} needs 1 or 4 values, got {len(vals)}")
    return vals


def _per_field(value, name) -> tuple:
    if np.ndim(value) == 0:
        return (float(value),) * 2
    vals = tuple(float(v) for v in value)
    if len(vals) != 2:
        raise ValueError(f"{name} needs 1 or 2 values, got {len(vals)}")
    return vals


@dataclass(frozen=True)
class RateEnvelope:
    """Slow rate modulation over a trial: ``(1 - exp(-t/rise)) exp(-t/decay)``, peak 1."""

    rise_time_s: float
    decay_time_s: float

    def __post_init__(self):
        if not (self.rise_time_s > 0 and self.decay_time_s > 0):
            raise ValueError("envelope time constants must be positive")

    def _raw(self, t):
        return -np.expm1(-t / self.rise_time_s) * np.exp(-t / self.decay_time_s)

    def peak_time(self, trial_length_s: float) -> float:
        tp = self.rise_time_s * math.log1p(self.decay_time_s / self.rise_time_s)
        return min(tp, trial_length_s)

    def __call__(self, t, trial_length_s: float):
        t = np.asarray(t, dtype=float)
        return self._raw(t) / self._raw(self.peak_time(trial_length_s))

    def moments(self, trial_length_s: float) -> tuple[float, float]:
        """Trial averages of r(t) and r(t)^2."""
        m1 = quad(lambda s: float(self(s, trial_length_s)), 0.0, trial_length_s, limit=200)[0]
        m2 = quad(lambda s: float(self(s, trial_length_s)) ** 2, 0.0, trial_length_s, limit=200)[0]
        return m1 / trial_length_s, m2 / trial_length_s


def envelope_moments(envelope: RateEnvelope | None, trial_length_s: float) -> tuple[float, float]:
    return (1.0, 1.0) if envelope is None else envelope.moments(trial_length_s)


def _envelope_at(envelope, t, trial_length_s):
    return np.ones_like(t) if envelope is None else envelope(t, trial_length_s)


@dataclass(frozen=True)
class DetectorConfig:
    """Per-channel detector response and per-field splitter ratio.

    Scalars are broadcast to all four channels (efficiency, dark rate, dead
    time) or both fields (splitter ratio = probability of arm ``a``).
    """

    efficiency: float | tuple = 1.0
    dark_rate_hz: float | tuple = 0.0
    dead_time_s: float | tuple = 0.0
    splitter_ratio: float | tuple = 0.5

    def __post_init__(self):
        eff = _per_channel(self.efficiency, "efficiency")
        dark = _per_channel(self.dark_rate_hz, "dark_rate_hz")
        dead = _per_channel(self.dead_time_s, "dead_time_s")
        split = _per_field(self.splitter_ratio, "splitter_ratio")
        if not all(0.0 <= e <= 1.0 for e in eff):
            raise ValueError("efficiency must lie in [0, 1]")
        if not all(d >= 0 for d in dark + dead):
            raise ValueError("dark rate and dead time must be non-negative")
        if not all(0.0 < s < 1.0 for s in split):
            raise ValueError("splitter ratio must lie in (0, 1)")
        object.__setattr__(self, "efficiency", eff)
        object.__setattr__(self, "dark_rate_hz", dark)
        object.__setattr__(self, "dead_time_s", dead)
        object.__setattr__(self, "splitter_ratio", split)


@dataclass(frozen=True)
class SimConfig:
    """Everything that determines a simulated dataset, including the seed.

    ``pair_rate_hz=None`` calibrates the pair rate so that the full-trial
    cross-correlation has the amplitude set by ``params.f`` (see
    :func:`calibrate_pair_rate`). ``kernel_tau_max_gamma=None`` truncates the
    pair kernel at ``DEFAULT_KERNEL_TAU_MAX_S`` (which leaves the outermost
    0.5 ns bins of a +-30 ns analysis fully inside the kernel support) or at
    ``4 / chi`` decay times, whichever is longer.
    """

    params: ModelParams = FITTED_PARAMS
    gamma_hz: float = RB87_GAMMA_HZ
    trial_count: int = 100
    trial_length_s: float = 1e-3
    pair_rate_hz: float | None = None
    background_rate_hz: float = 1e5
    thermal_coherence_s: float = 5e-9
    envelope: RateEnvelope | None = None
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    kernel_tau_max_gamma: float | None = None
    seed: int = 0
    resolution_ps: int = 100
    trials_per_block: int = 64
    kernel_table_size: int = 4096
    max_records: int = 60_000_000

    def __post_init__(self):
        if self.gamma_hz <= 0:
            raise ValueError("gamma_hz must be positive")
        if self.trial_count <= 0 or self.trials_per_block <= 0:
            raise ValueError("trial_count and trials_per_block must be positive")
        if self.trial_length_s <= 0 or self.thermal_coherence_s <= 0:
            raise ValueError("trial length and coherence time must be positive")
        if self.background_rate_hz < 0 or (self.pair_rate_hz is not None and self.pair_rate_hz < 0):
            raise ValueError("rates must be non-negative")
        if self.resolution_ps <= 0:
            raise ValueError("resolution_ps must be positive")
        units = self.trial_length_s / (self.resolution_ps * 1e-12)
        if abs(units - round(units)) > 1e-6 * units:
            raise ValueError("trial length must be a whole number of resolution units")
        if self.kernel_tau_max_gamma is None:
            object.__setattr__(self, "kernel_tau_max_gamma", self._default_kernel_tau())
        if self.kernel_tau_max_gamma * self.params.chi <= 3.0:
            raise ValueError(
                f"kernel truncation {self.kernel_tau_max_gamma:.3g}/Gamma must exceed "
                f"3/chi = {3.0 / self.params.chi:.3g}/Gamma")

    def _default_kernel_tau(self) -> float:
        return max(self.gamma * DEFAULT_KERNEL_TAU_MAX_S, 4.0 / self.params.chi)

    @property
    def gamma(self) -> float:
        """Angular decay rate Gamma in 1/s."""
        return 2.0 * math.pi * self.gamma_hz

    @property
    def trial_length_units(self) -> int:
        return int(round(self.trial_length_s / (self.resolution_ps * 1e-12)))

    def resolved_pair_rate(self) -> float:
        if self.pair_rate_hz is not None:
            return self.pair_rate_hz
        return calibrate_pair_rate(self)

    def expected_records(self) -> float:
        m1, m2 = envelope_moments(self.envelope, self.trial_length_s)
        per_field = self.background_rate_hz * m1 + self.resolved_pair_rate() * m2
        eff = self.detector.efficiency
        split = self.detector.splitter_ratio
        rate = 0.0
        for ch in DetectorChannel:
            s = split[ch.field - 1]
            share = s if ch.arm == "a" else 1.0 - s
            rate += per_field * share * eff[ch] + self.detector.dark_rate_hz[ch]
        return rate * self.trial_length_s * self.trial_count

    def replace(self, **changes) -> "SimConfig":
        defaulted = self.kernel_tau_max_gamma == self._default_kernel_tau()
        if defaulted and "kernel_tau_max_gamma" not in changes and ({"gamma_hz", "params"} & set(changes)):
            changes["kernel_tau_max_gamma"] = None
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["params"] = self.params.as_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown SimConfig fields: {sorted(unknown)}")
        if "params" in data and not isinstance(data["params"], ModelParams):
            data["params"] = ModelParams(**data["params"])
        env = data.get("envelope")
        if isinstance(env, dict):
            data["envelope"] = RateEnvelope(**env)
        det = data.get("detector")
        if isinstance(det, dict):
            data["detector"] = DetectorConfig(**det)
        return cls(**data)


# --- pair kernel -----------------------------------------------------------


def kernel_density(x, params: ModelParams):
    """Unnormalised pair-delay density in Gamma*tau units (even in x)."""
    ax = np.abs(np.asarray(x, dtype=float))
    return params.f * (1.0 + np.exp(-params.chi * ax)
                       - 2.0 * np.cos(params.delta_prime_ratio * ax) * np.exp(-0.5 * params.chi * ax))


def kernel_mass(params: ModelParams, tau_max: float) -> float:
    """Closed-form integral of the unnormalised bracket over [-tau_max, tau_max]."""
    c, d = params.chi, params.delta_prime_ratio
    h = 0.5 * c
    tail = math.exp(-h * tau_max)
    osc = (h + (d * math.sin(d * tau_max) - h * math.cos(d * tau_max)) * tail) / (h * h + d * d)
    return 2.0 * (tau_max + (1.0 - math.exp(-c * tau_max)) / c - 2.0 * osc)


@dataclass(frozen=True)
class PairKernel:
    """Tabulated inverse CDF of the pair-delay density on [-tau_max, tau_max]."""

    params: ModelParams
    tau_max: float
    grid: np.ndarray
    cdf: np.ndarray

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.interp(rng.random(n), self.cdf, self.grid)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        norm = self.params.f * kernel_mass(self.params, self.tau_max)
        return np.where(np.abs(x) <= self.tau_max, kernel_density(x, self.params) / norm, 0.0)


def build_pair_kernel(params: ModelParams, tau_max: float, table_size: int = 4096) -> PairKernel:
    """Inverse-CDF table for the pair delay (field 2 minus field 1), in units of 1/Gamma.

    The table uses trapezoidal integration on a uniform grid with at least
    ``table_size`` points and at least 50 points per beat period.
    """
    if table_size < 1000:
        raise ValueError("table_size must be at least 1000")
    if not tau_max > 0:
        raise ValueError("tau_max must be positive")
    if not params.f > 0:
        raise SimulationError("pair kernel has zero mass")
    period = oscillation_period(params.delta_prime_ratio)
    n = table_size
    if math.isfinite(period):
        n = max(n, int(math.ceil(50.0 * 2.0 * tau_max / period)) + 1)
    grid = np.linspace(-tau_max, tau_max, n)
    dens = kernel_density(grid, params)
    cdf = cumulative_trapezoid(dens, grid, initial=0.0)
    if not cdf[-1] > 0:
        raise SimulationError("pair kernel has zero mass")
    cdf /= cdf[-1]
    return PairKernel(params=params, tau_max=float(tau_max), grid=grid, cdf=cdf)


def calibrate_pair_rate(config: SimConfig) -> float:
    """Pair rate giving a full-trial cross-correlation excess of ``4 f / pi^2`` times the bracket.

    Within the kernel support the measured cross-correlation is
    ``1 + P <r^2> K(tau) / (B <r> + P <r^2>)^2`` for pair rate ``P``,
    background ``B``, envelope ``r`` and normalised kernel ``K``. Setting this
    equal to the target gives a quadratic in ``P``; the root with the smaller
    pair fraction is returned. Dark counts are ignored.
    """
    p = config.params
    mass_s = kernel_mass(p, config.kernel_tau_max_gamma) / config.gamma
    a = AMPLITUDE * p.f * mass_s
    m1, m2 = envelope_moments(config.envelope, config.trial_length_s)
    b = config.background_rate_hz * m1
    disc = 1.0 - 4.0 * a * b
    if disc < 0:
        raise SimulationError(
            f"background {config.background_rate_hz:.3g} Hz too high for f={p.f}: "
            f"maximum is {1.0 / (4.0 * a * m1):.3g} Hz")
    if b == 0:
        raise SimulationError("cannot calibrate pair rate without background")
    u = (1.0 - 2.0 * a * b - math.sqrt(disc)) / (2.0 * a)
    return u / m2


# --- generation ------------------------------------------------------------


def block_rng(seed: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(block),))
    return np.random.Generator(np.random.Philox(ss))


def _bernoulli_positions(rng, n_total: int, q: float) -> np.ndarray:
    """Indices of successes in ``n_total`` Bernoulli(q) trials, via geometric gaps."""
    if q <= 0 or n_total <= 0:
        return np.zeros(0, dtype=np.int64)
    if q >= 1:
        return np.arange(n_total, dtype=np.int64)
    mean = n_total * q
    chunks = []
    pos = -1
    while True:
        size = int(mean + 6.0 * math.sqrt(mean) + 16)
        steps = np.cumsum(rng.geometric(q, size=size)) + pos
        chunks.append(steps)
        pos = int(steps[-1])
        if pos >= n_total:
            break
    out = np.concatenate(chunks)
    return out[out < n_total]


def _thermal_field(rng, rate, n_trials, trial_length_s, coherence_s, envelope):
    """Background photons of one field as (trial, t_seconds).

    Counts in each coherence slice are geometric with the slice mean, which
    is a Poisson count under an exponentially distributed intensity. Only
    occupied slices are materialised.
    """
    if rate <= 0:
        return np.zeros(0, np.int64), np.zeros(0)
    per_trial = int(math.ceil(trial_length_s / coherence_s))
    mu_max = rate * coherence_s
    q_max = mu_max / (1.0 + mu_max)
    slots = _bernoulli_positions(rng, n_trials * per_trial, q_max)
    trial, j = np.divmod(slots, per_trial)
    start = j * coherence_s
    width = np.minimum(coherence_s, trial_length_s - start)
    mu = rate * width * _envelope_at(envelope, start + 0.5 * width, trial_length_s)
    q = mu / (1.0 + mu)
    keep = rng.random(slots.size) * q_max < q
    trial, start, width, mu = trial[keep], start[keep], width[keep], mu[keep]
    counts = rng.geometric(1.0 / (1.0 + mu))
    trial = np.repeat(trial, counts)
    t = np.repeat(start, counts) + np.repeat(width, counts) * rng.random(trial.size)
    return trial, t


def _pairs(rng, rate, n_trials, trial_length_s, envelope, kernel: PairKernel, gamma):
    """Pair photons: field-1 (trial, t) and field-2 (trial, t) arrays."""
    n = rng.poisson(rate * trial_length_s * n_trials) if rate > 0 else 0
    trial = rng.integers(0, n_trials, size=n)
    t1 = rng.random(n) * trial_length_s
    if envelope is not None:
        keep = rng.random(n) < envelope(t1, trial_length_s) ** 2
        trial, t1 = trial[keep], t1[keep]
    t2 = t1 + kernel.sample(rng, t1.size) / gamma
    inside = (t2 >= 0.0) & (t2 < trial_length_s)
    return (trial, t1), (trial[inside], t2[inside])


def _simulate_block(config: SimConfig, kernel: PairKernel, pair_rate: float, block: int,
                    first_trial: int, n_trials: int) -> TagDataset:
    rng = block_rng(config.seed, block)
    L = config.trial_length_s
    det = config.detector
    res_s = config.resolution_ps * 1e-12
    L_units = config.trial_length_units

    (p1_trial, p1_t), (p2_trial, p2_t) = _pairs(
        rng, pair_rate, n_trials, L, config.envelope, kernel, config.gamma)
    trials, times, chans = [], [], []
    for fld, (pt, ptt) in ((1, (p1_trial, p1_t)), (2, (p2_trial, p2_t))):
        bt, btt = _thermal_field(rng, config.background_rate_hz, n_trials, L,
                                 config.thermal_coherence_s, config.envelope)
        tr = np.concatenate([pt, bt])
        tt = np.concatenate([ptt, btt])
        base = 0 if fld == 1 else 2
        ch = base + (rng.random(tr.size) >= det.splitter_ratio[fld - 1]).astype(np.int64)
        trials.append(tr)
        times.append(tt)
        chans.append(ch)
    trial = np.concatenate(trials)
    t = np.concatenate(times)
    channel = np.concatenate(chans)

    eff = np.asarray(det.efficiency)
    if np.any(eff < 1.0):
        keep = rng.random(trial.size) < eff[channel]
        trial, t, channel = trial[keep], t[keep], channel[keep]

    dark = [(ch, rate) for ch, rate in enumerate(det.dark_rate_hz) if rate > 0]
    for ch, rate in dark:
        n = rng.poisson(rate * L * n_trials)
        trial = np.concatenate([trial, rng.integers(0, n_trials, size=n)])
        t = np.concatenate([t, rng.random(n) * L])
        channel = np.concatenate([channel, np.full(n, ch, dtype=np.int64)])

    units = np.minimum(np.floor(t / res_s).astype(np.int64), L_units - 1)
    order = np.lexsort((channel, units, trial))
    trial, units, channel = trial[order], units[order], channel[order]
    if trial.size > 1:
        # two photons in one resolution slot on one channel register once
        dup = (np.diff(trial) == 0) & (np.diff(units) == 0) & (np.diff(channel) == 0)
        if dup.any():
            keep = np.concatenate([[True], ~dup])
            trial, units, channel = trial[keep], units[keep], channel[keep]

    dead_units = [int(math.ceil(d / res_s)) for d in det.dead_time_s]
    if any(dead_units):
        keep = np.ones(trial.size, dtype=bool)
        stride = L_units + max(dead_units) + 1
        for ch in range(4):
            if dead_units[ch] <= 0:
                continue
            idx = np.flatnonzero(channel == ch)
            keys = trial[idx] * stride + units[idx]
            keep[idx] = _kernels.dead_time_mask(np.ascontiguousarray(keys), dead_units[ch])
        trial, units, channel = trial[keep], units[keep], channel[keep]

    return TagDataset(
        resolution_ps=config.resolution_ps,
        trial_length_units=L_units,
        trial_count=n_trials,
        trial=trial,
        channel=channel,
        t=units,
    )


def _metadata(config: SimConfig, pair_rate: float) -> dict:
    p = config.params
    return {
        "source": "biphoton.simulator",
        "seed": str(config.seed),
        "delta_over_gamma": repr(p.delta_ratio),
        "delta_prime_over_gamma": repr(p.delta_prime_ratio),
        "f": repr(p.f),
        "chi": repr(p.chi),
        "gamma_hz": repr(config.gamma_hz),
        "pair_rate_hz": repr(pair_rate),
        "background_rate_hz": repr(config.background_rate_hz),
    }


def iter_blocks(config: SimConfig, threads: int = 1) -> Iterator[TagDataset]:
    """Yield the simulation block by block, in trial order.

    Each yielded dataset covers ``trials_per_block`` consecutive trials
    (fewer for the last block) with trial indices starting at 0; concatenating
    them in order reproduces :func:`simulate`. With ``threads > 1`` blocks are
    generated concurrently and yielded in order.
    """
    kernel = build_pair_kernel(config.params, config.kernel_tau_max_gamma, config.kernel_table_size)
    pair_rate = config.resolved_pair_rate()
    nblocks = -(-config.trial_count // config.trials_per_block)

    def job(b):
        first = b * config.trials_per_block
        n = min(config.trials_per_block, config.trial_count - first)
        return _simulate_block(config, kernel, pair_rate, b, first, n)

    if threads is None or threads <= 0:
        import os
        threads = os.cpu_count() or 1
    if threads == 1:
        for b in range(nblocks):
            yield job(b)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        window = 2 * threads
        pending = [pool.submit(job, b) for b in range(min(window, nblocks))]
        nxt = len(pending)
        while pending:
            ds = pending.pop(0).result()
            if nxt < nblocks:
                pending.append(pool.submit(job, nxt))
                nxt += 1
            yield ds


def simulate(config: SimConfig, threads: int = 1) -> TagDataset:
    """Generate a complete dataset; deterministic in ``config``."""
    expected = config.expected_records()
    if expected > config.max_records:
        raise MemoryCapExceeded(
            f"expected ~{expected:.3g} records exceeds max_records={config.max_records}; "
            f"about {expected * 13 / 1e9:.2f} GB on disk. Stream with iter_blocks instead.")
    pair_rate = config.resolved_pair_rate()
    return concat_trials(iter_blocks(config, threads), metadata=_metadata(config, pair_rate))


# --- scans -----------------------------------------------------------------

SCAN_AXES = ("delta_prime_ratio", "pair_rate_hz", "background_rate_hz", "f", "chi", "rate_scale")


def scan_configs(base: SimConfig, axis: str, values: Sequence[float]) -> list[SimConfig]:
    """One config per value; seeds derived as ``base.seed ^ index``.

    ``rate_scale`` multiplies the background rate by k and the pair rate by
    k^2, the way both respond to a change in pump intensity or atom number.
    """
    if axis not in SCAN_AXES:
        raise ValueError(f"unknown scan axis {axis!r}; choose from {SCAN_AXES}")
    out = []
    for i, v in enumerate(values):
        v = float(v)
        if not math.isfinite(v):
            raise ValueError(f"scan value {v} is not finite")
        seed = base.seed ^ i
        if axis in ("delta_prime_ratio", "f", "chi"):
            cfg = base.replace(params=base.params.with_values(**{axis: v}), seed=seed)
        elif axis == "rate_scale":
            pair = base.resolved_pair_rate()
            cfg = base.replace(background_rate_hz=base.background_rate_hz * v,
                               pair_rate_hz=pair * v * v, seed=seed)
        else:
            cfg = base.replace(**{axis: v}, seed=seed)
        out.append(cfg)
    return out


def scan(base: SimConfig, axis: str, values: Sequence[float], out_dir=None, threads: int = 1) -> list[dict]:
    """Simulate one dataset per scan value.

    Returns descriptors ``{"value", "seed", "config", "dataset"}``; with
    ``out_dir`` each dataset is written to ``scan_XXX.ttag`` and a
    ``manifest.json`` mapping value to file is emitted.
    """
    configs = scan_configs(base, axis, values)
    results = []
    for i, (v, cfg) in enumerate(zip(values, configs)):
        ds = simulate(cfg, threads=threads)
        entry = {"index": i, "value": float(v), "seed": cfg.seed, "config": cfg.to_dict(), "dataset": ds}
        if out_dir is not None:
            path = Path(out_dir) / f"scan_{i:03d}.ttag"
            save(ds, path)
            entry["file"] = path.name
        results.append(entry)
    if out_dir is not None:
        manifest = {
            "axis": axis,
            "base_seed": base.seed,
            "entries": [{k: e[k] for k in ("index", "value", "seed", "file")} for e in results],
        }
        (Path(out_dir) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return results
