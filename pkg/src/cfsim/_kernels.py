"""Inner loops over particles.

Every kernel has a pure-numpy implementation (``np_*``) and, when numba is
importable, a compiled twin (``nb_*``).  Both produce identical results; the
public names bound at import time pick the compiled twin unless the
environment variable ``CFSIM_DISABLE_NUMBA`` is set to a true value.
"""
import os

import numpy as np

_DISABLED = os.environ.get("CFSIM_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by CFSIM_DISABLE_NUMBA")
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def np_multinomial_indices(cumw, u):
    """Ancestor index for each uniform: smallest ``i`` with ``cumw[i] > u``."""
    idx = np.searchsorted(cumw, u, side="right")
    return np.minimum(idx, len(cumw) - 1).astype(np.int64)


def np_systematic_indices(cumw, u0, n):
    pos = (np.arange(n, dtype=np.float64) + u0) / n
    idx = np.searchsorted(cumw, pos, side="right")
    return np.minimum(idx, len(cumw) - 1).astype(np.int64)


def _np_mix(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def np_row_hashes(mat):
    """64-bit hash of each row's float64 bit pattern (``mat`` is C-contiguous)."""
    bits = np.ascontiguousarray(mat, dtype=np.float64).view(np.uint64)
    h = np.full(bits.shape[0], _GOLDEN, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for j in range(bits.shape[1]):
            h = _np_mix(h ^ bits[:, j]) + _GOLDEN
    return h


def np_ks_sup(f_sorted):
    """sup |F_n - F| given the model CDF evaluated at the sorted sample."""
    n = f_sorted.shape[0]
    i = np.arange(1, n + 1, dtype=np.float64)
    d_plus = np.max(i / n - f_sorted)
    d_minus = np.max(f_sorted - (i - 1.0) / n)
    return float(max(d_plus, d_minus))


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def nb_multinomial_indices(cumw, u):
        n_src = cumw.shape[0]
        out = np.empty(u.shape[0], dtype=np.int64)
        for k in range(u.shape[0]):
            x = u[k]
            lo = 0
            hi = n_src
            while lo < hi:
                mid = (lo + hi) >> 1
                if cumw[mid] > x:
                    hi = mid
                else:
                    lo = mid + 1
            out[k] = lo if lo < n_src else n_src - 1
        return out

    @njit(cache=True)
    def nb_systematic_indices(cumw, u0, n):
        n_src = cumw.shape[0]
        out = np.empty(n, dtype=np.int64)
        j = 0
        for k in range(n):
            pos = (k + u0) / n
            while j < n_src and cumw[j] <= pos:
                j += 1
            out[k] = j if j < n_src else n_src - 1
        return out

    @njit(cache=True)
    def nb_row_hashes(mat):
        bits = mat.view(np.uint64)
        nrow, ncol = bits.shape
        out = np.empty(nrow, dtype=np.uint64)
        m1 = np.uint64(0xBF58476D1CE4E5B9)
        m2 = np.uint64(0x94D049BB133111EB)
        g = np.uint64(0x9E3779B97F4A7C15)
        for i in range(nrow):
            h = g
            for j in range(ncol):
                z = h ^ bits[i, j]
                z = (z ^ (z >> np.uint64(30))) * m1
                z = (z ^ (z >> np.uint64(27))) * m2
                h = (z ^ (z >> np.uint64(31))) + g
            out[i] = h
        return out

    @njit(cache=True)
    def nb_ks_sup(f_sorted):
        n = f_sorted.shape[0]
        d = 0.0
        for k in range(n):
            a = (k + 1) / n - f_sorted[k]
            b = f_sorted[k] - k / n
            if a > d:
                d = a
            if b > d:
                d = b
        return d

    multinomial_indices = nb_multinomial_indices
    systematic_indices = nb_systematic_indices
    ks_sup = nb_ks_sup

    def row_hashes(mat):
        return nb_row_hashes(np.ascontiguousarray(mat, dtype=np.float64))

else:
    multinomial_indices = np_multinomial_indices
    systematic_indices = np_systematic_indices
    row_hashes = np_row_hashes
    ks_sup = np_ks_sup


def unique_row_count(mat):
    """Number of distinct rows of a 2-D float array."""
    if mat.shape[0] == 0:
        return 0
    if mat.shape[1] == 0:
        return 1
    # -0.0 and 0.0 must hash alike
    mat = np.where(mat == 0.0, 0.0, mat)
    return int(np.unique(row_hashes(mat)).shape[0])
