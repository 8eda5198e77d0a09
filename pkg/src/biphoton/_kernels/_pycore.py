"""NumPy fallback for the compiled kernels in ``_ccore``."""

import numpy as np

# Upper bound on pair-index temporaries materialised at once.
_CHUNK_PAIRS = 1 << 22


def fine_coincidences(a, b, tmin, tmax):
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    nbins = int(tmax - tmin + 1)
    out = np.zeros(nbins, dtype=np.int64)
    if a.size == 0 or b.size == 0:
        return out
    lo = np.searchsorted(b, a + tmin, side="left")
    hi = np.searchsorted(b, a + tmax, side="right")
    n = hi - lo
    csum = np.cumsum(n)
    start = 0
    while start < a.size:
        # grow the slice of `a` until it would exceed the pair budget
        base = csum[start - 1] if start else 0
        stop = int(np.searchsorted(csum, base + _CHUNK_PAIRS, side="right"))
        stop = max(stop, start + 1)
        counts = n[start:stop]
        total = int(counts.sum())
        if total:
            owner = np.repeat(np.arange(start, stop), counts)
            offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
            lags = b[lo[owner] + offsets] - a[owner]
            out += np.bincount(lags - tmin, minlength=nbins)
        start = stop
    return out


def dead_time_mask(keys, dead):
    keys = np.asarray(keys, dtype=np.int64)
    mask = np.ones(keys.size, dtype=bool)
    if keys.size == 0 or dead <= 0:
        return mask
    # only events closer than `dead` to their predecessor can be affected
    close = np.flatnonzero(np.diff(keys) < dead) + 1
    if close.size == 0:
        return mask
    last = None
    kl = keys.tolist()
    for i in range(keys.size):
        if last is not None and kl[i] - last < dead:
            mask[i] = False
        else:
            last = kl[i]
    return mask
