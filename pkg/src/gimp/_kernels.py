"""Row-wise numeric kernels used by the autodiff primitives.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy version
with identical semantics. The numba path is used when numba imports and the
environment variable ``GIMP_NUMBA`` is not set to ``0``; the numpy path is
always importable as ``np_<name>`` so tests and the benchmark can compare the
two. Kernels take 2-D (rows x features) or 3-D (batch x tokens x features)
C-contiguous float64 arrays; callers flatten leading dimensions.
"""

import os

import numpy as np

_flag = os.environ.get("GIMP_NUMBA", "1").strip().lower()
_want_numba = _flag not in ("0", "false", "no", "off")

try:
    if not _want_numba:
        raise ImportError("disabled by GIMP_NUMBA")
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE


def segment_bounds(T, m):
    """Start offsets of ``m`` contiguous segments over ``T`` tokens.

    The first ``T % m`` segments are one token longer. Returns an int64 array
    of length ``m + 1``.
    """
    base, rem = divmod(T, m)
    sizes = np.full(m, base, dtype=np.int64)
    sizes[:rem] += 1
    bounds = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(sizes, out=bounds[1:])
    return bounds


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def np_softmax_fwd(x):
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def np_softmax_bwd(y, gy):
    return y * (gy - (gy * y).sum(axis=-1, keepdims=True))


def np_layernorm_fwd(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def np_layernorm_bwd(gxhat, xhat, rstd):
    n = xhat.shape[-1]
    a = gxhat.sum(axis=-1, keepdims=True) / n
    b = (gxhat * xhat).sum(axis=-1, keepdims=True) / n
    return rstd[:, None] * (gxhat - a - xhat * b)


def np_segment_mean_fwd(x, bounds):
    sums = np.add.reduceat(x, bounds[:-1], axis=1)
    counts = np.diff(bounds).astype(np.float64)
    return sums / counts[None, :, None]


def np_segment_mean_bwd(g, bounds):
    counts = np.diff(bounds)
    scaled = g / counts.astype(np.float64)[None, :, None]
    return np.repeat(scaled, counts, axis=1)


def np_masked_abs_sum(diff, mask):
    # diff: (B, L, D); mask: (B, L) bool
    return (np.abs(diff) * mask[:, :, None]).sum(axis=(1, 2))


def np_masked_abs_grad(diff, mask, gout):
    return np.sign(diff) * (mask[:, :, None] * gout[:, None, None])


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @njit(cache=True, nogil=True)
    def nb_softmax_fwd(x):
        n, k = x.shape
        out = np.empty_like(x)
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, k):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(k):
                e = np.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(k):
                out[i, j] *= inv
        return out

    @njit(cache=True, nogil=True)
    def nb_softmax_bwd(y, gy):
        n, k = y.shape
        out = np.empty_like(y)
        for i in range(n):
            dot = 0.0
            for j in range(k):
                dot += gy[i, j] * y[i, j]
            for j in range(k):
                out[i, j] = y[i, j] * (gy[i, j] - dot)
        return out

    @njit(cache=True, nogil=True)
    def nb_layernorm_fwd(x, eps):
        n, k = x.shape
        xhat = np.empty_like(x)
        rstd = np.empty(n)
        for i in range(n):
            mu = 0.0
            for j in range(k):
                mu += x[i, j]
            mu /= k
            var = 0.0
            for j in range(k):
                c = x[i, j] - mu
                xhat[i, j] = c
                var += c * c
            r = 1.0 / np.sqrt(var / k + eps)
            rstd[i] = r
            for j in range(k):
                xhat[i, j] *= r
        return xhat, rstd

    @njit(cache=True, nogil=True)
    def nb_layernorm_bwd(gxhat, xhat, rstd):
        n, k = xhat.shape
        out = np.empty_like(xhat)
        for i in range(n):
            a = 0.0
            b = 0.0
            for j in range(k):
                a += gxhat[i, j]
                b += gxhat[i, j] * xhat[i, j]
            a /= k
            b /= k
            for j in range(k):
                out[i, j] = rstd[i] * (gxhat[i, j] - a - xhat[i, j] * b)
        return out

    @njit(cache=True, nogil=True)
    def nb_segment_mean_fwd(x, bounds):
        B, T, D = x.shape
        m = bounds.shape[0] - 1
        out = np.zeros((B, m, D))
        for b in range(B):
            for s in range(m):
                lo = bounds[s]
                hi = bounds[s + 1]
                for t in range(lo, hi):
                    for c in range(D):
                        out[b, s, c] += x[b, t, c]
                inv = 1.0 / (hi - lo)
                for c in range(D):
                    out[b, s, c] *= inv
        return out

    @njit(cache=True, nogil=True)
    def nb_segment_mean_bwd(g, bounds):
        B, m, D = g.shape
        T = bounds[m]
        out = np.empty((B, T, D))
        for b in range(B):
            for s in range(m):
                lo = bounds[s]
                hi = bounds[s + 1]
                inv = 1.0 / (hi - lo)
                for t in range(lo, hi):
                    for c in range(D):
                        out[b, t, c] = g[b, s, c] * inv
        return out

    @njit(cache=True, nogil=True)
    def nb_masked_abs_sum(diff, mask):
        B, L, D = diff.shape
        out = np.zeros(B)
        for b in range(B):
            acc = 0.0
            for t in range(L):
                if mask[b, t]:
                    for c in range(D):
                        acc += abs(diff[b, t, c])
            out[b] = acc
        return out

    @njit(cache=True, nogil=True)
    def nb_masked_abs_grad(diff, mask, gout):
        B, L, D = diff.shape
        out = np.zeros_like(diff)
        for b in range(B):
            g = gout[b]
            for t in range(L):
                if mask[b, t]:
                    for c in range(D):
                        v = diff[b, t, c]
                        if v > 0.0:
                            out[b, t, c] = g
                        elif v < 0.0:
                            out[b, t, c] = -g
        return out


def _pick(name):
    if USE_NUMBA:
        return globals()["nb_" + name]
    return globals()["np_" + name]


KERNEL_NAMES = (
    "softmax_fwd",
    "softmax_bwd",
    "layernorm_fwd",
    "layernorm_bwd",
    "segment_mean_fwd",
    "segment_mean_bwd",
    "masked_abs_sum",
    "masked_abs_grad",
)

softmax_fwd = _pick("softmax_fwd")
softmax_bwd = _pick("softmax_bwd")
layernorm_fwd = _pick("layernorm_fwd")
layernorm_bwd = _pick("layernorm_bwd")
segment_mean_fwd = _pick("segment_mean_fwd")
segment_mean_bwd = _pick("segment_mean_bwd")
masked_abs_sum = _pick("masked_abs_sum")
masked_abs_grad = _pick("masked_abs_grad")


def backend():
    return "numba" if USE_NUMBA else "numpy"
