"""Counter-based uniform draws keyed by (seed, stream, row, column).

Every value is a pure function of its coordinates, so results never depend on
iteration order, chunking or thread count.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z):
    # splitmix64 finalizer; uint64 arithmetic wraps modulo 2**64
    z = z ^ (z >> np.uint64(30))
    z = z * _M1
    z = z ^ (z >> np.uint64(27))
    z = z * _M2
    return z ^ (z >> np.uint64(31))


def _key(seed, stream):
    s = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    t = np.uint64(int(stream) & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        return _mix(_mix(s + _GOLDEN) ^ (t * _GOLDEN + _M2))


def uniforms(seed, stream, rows, n_cols=1):
    """Return a ``(len(rows), n_cols)`` array of uniforms in [0, 1).

    ``rows`` holds absolute row indices; the same (seed, stream, row, col)
    always yields the same number.
    """
    rows = np.asarray(rows, dtype=np.uint64).reshape(-1, 1)
    cols = np.arange(n_cols, dtype=np.uint64).reshape(1, -1)
    key = _key(seed, stream)
    with np.errstate(over="ignore"):
        z = _mix(key ^ (rows * _GOLDEN))
        z = _mix(z + (cols + np.uint64(1)) * _M1)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def row_uniforms(seed, stream, n):
    """One uniform per row for rows ``0..n-1``."""
    return uniforms(seed, stream, np.arange(n), 1)[:, 0]
