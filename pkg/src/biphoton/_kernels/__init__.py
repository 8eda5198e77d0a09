"""Hot inner loops, compiled when available.

The Cython extension ``_ccore`` is preferred; if it is not built the NumPy
implementation in ``_pycore`` is used. Both expose the same functions and
return identical results.
"""

from . import _pycore

try:
    from . import _ccore
except ImportError:  # extension not compiled
    _ccore = None

_BACKENDS = {"python": _pycore}
if _ccore is not None:
    _BACKENDS["cython"] = _ccore

BACKEND = "cython" if _ccore is not None else "python"
_impl = _BACKENDS[BACKEND]


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name):
    """Switch the active kernel implementation; returns the previous name."""
    global BACKEND, _impl
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available; have {available_backends()}")
    previous, BACKEND, _impl = BACKEND, name, _BACKENDS[name]
    return previous


def fine_coincidences(a, b, tmin, tmax):
    return _impl.fine_coincidences(a, b, int(tmin), int(tmax))


def dead_time_mask(keys, dead):
    return _impl.dead_time_mask(keys, int(dead))
