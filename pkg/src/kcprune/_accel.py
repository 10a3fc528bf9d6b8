"""Hot inner loops, compiled with numba when available.

Every kernel exists twice: a plain-numpy version in :class:`numpy_impl` and an
``@njit`` version in :class:`numba_impl`.  The module-level names resolve to the
numba versions unless ``KCPRUNE_NUMBA=0`` is set in the environment (or numba is
not importable); im2col is the one exception and always uses numpy.  Both paths accumulate reductions in float64 with a fixed
element order, so each path is bit-deterministic on its own.
"""

import logging
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

_WANT_NUMBA = os.environ.get("KCPRUNE_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


class numpy_impl:
    """Reference implementations using vectorised numpy only."""

    @staticmethod
    def sum_squares(flat):
        x = flat.astype(np.float64)
        return float(np.sum(x * x))

    @staticmethod
    def mean_rows(rows):
        # axis-0 reduction over a C-contiguous 2-D array adds rows in ascending order
        acc = np.ascontiguousarray(rows, dtype=np.float64).sum(axis=0)
        return acc / rows.shape[0]

    @staticmethod
    def kernel_distances(kernels, center):
        # kernels: (C_out, C_in, K*K); center: (K*K,) float64
        diff = kernels.astype(np.float64) - center
        return np.sqrt(np.sum(diff * diff, axis=2))

    @staticmethod
    def im2col(xp, k, stride, ho, wo):
        n, c = xp.shape[:2]
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)

    @staticmethod
    def col2im(cols, n, c, hp, wp, k, stride, ho, wo):
        dc = cols.reshape(c, k, k, n, ho, wo)
        dxp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dc[:, i, j].transpose(1, 0, 2, 3)
        return dxp

    @staticmethod
    def maxpool_forward(x, k, stride, ho, wo):
        n, c = x.shape[:2]
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        win = win.reshape(n, c, ho, wo, k * k)
        arg = np.argmax(win, axis=4)
        out = np.take_along_axis(win, arg[..., None], axis=4)[..., 0]
        return np.ascontiguousarray(out), arg.astype(np.int64)

    @staticmethod
    def maxpool_backward(dout, arg, h, w, k, stride):
        n, c, ho, wo = dout.shape
        dx = np.zeros((n, c, h, w), dtype=dout.dtype)
        nn_, cc, oh, ow = np.indices((n, c, ho, wo), sparse=False)
        hi = oh * stride + arg // k
        wi = ow * stride + arg % k
        np.add.at(dx, (nn_, cc, hi, wi), dout)
        return dx


def _build_numba():
    njit = numba.njit(cache=True, nogil=True)

    @njit
    def sum_squares(flat):
        acc = 0.0
        for i in range(flat.size):
            v = np.float64(flat[i])
            acc += v * v
        return acc

    @njit
    def mean_rows(rows):
        n, m = rows.shape
        acc = np.zeros(m, dtype=np.float64)
        for i in range(n):
            for j in range(m):
                acc[j] += np.float64(rows[i, j])
        for j in range(m):
            acc[j] /= n
        return acc

    @njit
    def kernel_distances(kernels, center):
        co, ci, kk = kernels.shape
        out = np.empty((co, ci), dtype=np.float64)
        for a in range(co):
            for b in range(ci):
                acc = 0.0
                for e in range(kk):
                    d = np.float64(kernels[a, b, e]) - center[e]
                    acc += d * d
                out[a, b] = np.sqrt(acc)
        return out

    @njit
    def im2col(xp, k, stride, ho, wo):
        n, c, hp, wp = xp.shape
        cols = np.empty((c * k * k, n * ho * wo), dtype=xp.dtype)
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for s in range(n):
                        base = s * ho * wo
                        for oh in range(ho):
                            for ow in range(wo):
                                cols[row, base + oh * wo + ow] = xp[s, ch, oh * stride + i, ow * stride + j]
        return cols

    @njit
    def col2im(cols, n, c, hp, wp, k, stride, ho, wo):
        dxp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
        for i in range(k):
            for j in range(k):
                for ch in range(c):
                    src = cols[(ch * k + i) * k + j]
                    for s in range(n):
                        dst = dxp[s, ch]
                        base = s * ho * wo
                        for oh in range(ho):
                            drow = dst[oh * stride + i]
                            o = base + oh * wo
                            if stride == 1:
                                for ow in range(wo):
                                    drow[ow + j] += src[o + ow]
                            else:
                                for ow in range(wo):
                                    drow[ow * stride + j] += src[o + ow]
        return dxp

    @njit
    def maxpool_forward(x, k, stride, ho, wo):
        n, c = x.shape[0], x.shape[1]
        out = np.empty((n, c, ho, wo), dtype=x.dtype)
        arg = np.empty((n, c, ho, wo), dtype=np.int64)
        for s in range(n):
            for ch in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        best = x[s, ch, oh * stride, ow * stride]
                        bi = 0
                        for i in range(k):
                            for j in range(k):
                                v = x[s, ch, oh * stride + i, ow * stride + j]
                                if v > best:
                                    best = v
                                    bi = i * k + j
                        out[s, ch, oh, ow] = best
                        arg[s, ch, oh, ow] = bi
        return out, arg

    @njit
    def maxpool_backward(dout, arg, h, w, k, stride):
        n, c, ho, wo = dout.shape
        dx = np.zeros((n, c, h, w), dtype=dout.dtype)
        for s in range(n):
            for ch in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        a = arg[s, ch, oh, ow]
                        dx[s, ch, oh * stride + a // k, ow * stride + a % k] += dout[s, ch, oh, ow]
        return dx

    ns = {k: v for k, v in locals().items() if callable(v) and k != "njit"}
    return type("numba_impl", (), {k: staticmethod(v) for k, v in ns.items()})


numba_impl = _build_numba() if HAVE_NUMBA else None

USING_NUMBA = bool(_WANT_NUMBA and numba_impl is not None)
if _WANT_NUMBA and not HAVE_NUMBA:  # pragma: no cover
    logger.warning("numba not importable; using numpy kernels")

_active = numba_impl if USING_NUMBA else numpy_impl

sum_squares = _active.sum_squares
mean_rows = _active.mean_rows
kernel_distances = _active.kernel_distances
# im2col is a pure strided copy; numpy's version runs at memory bandwidth and
# beats the compiled loop (see benchmarks/bench_kernels.py), so it is used on both paths
im2col = numpy_impl.im2col
col2im = _active.col2im
maxpool_forward = _active.maxpool_forward
maxpool_backward = _active.maxpool_backward
