"""Compare the compiled and NumPy kernel backends.

    python3 benchmarks/bench_kernels.py [--records 2e6] [--repeat 3]

Times the two inner loops on synthetic sorted keys, then a full four-curve
correlation of a simulated dataset, once per backend, and checks that the
outputs agree exactly.
"""

import argparse
import time

import numpy as np

from biphoton import _kernels
from biphoton.correlator import CorrelationRequest, correlate_many
from biphoton.simulator import SimConfig, simulate


def best_of(fn, repeat):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def same(x, y):
    if isinstance(x, (tuple, list)):
        return all(same(a, b) for a, b in zip(x, y))
    return np.array_equal(np.asarray(x), np.asarray(y))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--records", type=float, default=2e6)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    n = int(args.records)
    rng = np.random.default_rng(args.seed)
    # ~1 count per 500 slots per channel, like a busy detector
    a = np.sort(rng.choice(500 * n, n, replace=False)).astype(np.int64)
    b = np.sort(rng.choice(500 * n, n, replace=False)).astype(np.int64)
    keys = np.sort(rng.integers(0, 50 * n, n)).astype(np.int64)

    trials = max(1, int(n / 2e3))
    ds = simulate(SimConfig(trial_count=trials, background_rate_hz=1e6, seed=args.seed))
    reqs = [CorrelationRequest(p) for p in ("1a,2b", "1b,2a", "1a,1b", "2a,2b")]

    cases = [
        ("fine_coincidences +-300", lambda: _kernels.fine_coincidences(a, b, -300, 300)),
        ("dead_time_mask 500", lambda: _kernels.dead_time_mask(keys, 500)),
        (f"correlate_many ({len(ds):.2g} records)", lambda: [c.counts for c in correlate_many(ds, reqs)]),
    ]
    backends = _kernels.available_backends()
    print(f"backends: {', '.join(backends)}; {n:.2g} keys per channel, best of {args.repeat}")
    print(f"{'case':<36}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}  equal")
    previous = _kernels.BACKEND
    try:
        for name, fn in cases:
            times, outs = [], []
            for be in backends:
                _kernels.use_backend(be)
                t, out = best_of(fn, args.repeat)
                times.append(t)
                outs.append(out)
            speed = times[backends.index("python")] / times[backends.index("cython")] if len(backends) > 1 else 1.0
            agree = all(same(outs[0], o) for o in outs[1:])
            print(f"{name:<36}" + "".join(f"{t * 1e3:>10.1f}ms" for t in times) + f"{speed:>9.1f}x  {agree}")
    finally:
        _kernels.use_backend(previous)


if __name__ == "__main__":
    main()
