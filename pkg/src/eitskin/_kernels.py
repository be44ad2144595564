"""Hot data-movement kernels for the classifier, JIT-compiled when numba
is available (pure-numpy fallbacks otherwise). Only gather/scatter loops
live here; all math stays in classifier.py."""

from __future__ import annotations

import numpy as np

try:
    import numba

    @numba.njit(parallel=True, cache=True)
    def _im2col_fill(xp, k, cols):
        n, hp, wp, c = xp.shape
        ho = hp - k + 1
        wo = wp - k + 1
        for ni in numba.prange(n):
            for i in range(ho):
                for j in range(wo):
                    row = (ni * ho + i) * wo + j
                    idx = 0
                    for di in range(k):
                        for dj in range(k):
                            for ch in range(c):
                                cols[row, idx] = xp[ni, i + di, j + dj, ch]
                                idx += 1

    @numba.njit(parallel=True, cache=True)
    def _bn_stats(x, sums, sumsq):
        n, h, w, c = x.shape
        nt = numba.get_num_threads()
        part = np.zeros((nt, 2, c), dtype=x.dtype)
        for ni in numba.prange(n):
            t = numba.get_thread_id()
            for i in range(h):
                for j in range(w):
                    for ch in range(c):
                        v = x[ni, i, j, ch]
                        part[t, 0, ch] += v
                        part[t, 1, ch] += v * v
        for t in range(nt):
            for ch in range(c):
                sums[ch] += part[t, 0, ch]
                sumsq[ch] += part[t, 1, ch]

    @numba.njit(parallel=True, cache=True)
    def _bn_apply(x, scale, shift, out):
        n, h, w, c = x.shape
        for ni in numba.prange(n):
            for i in range(h):
                for j in range(w):
                    for ch in range(c):
                        out[ni, i, j, ch] = x[ni, i, j, ch] * scale[ch] + shift[ch]

    @numba.njit(parallel=True, cache=True)
    def _bn_back_stats(x, dout, mean, inv, dgamma, dbeta):
        n, h, w, c = x.shape
        nt = numba.get_num_threads()
        part = np.zeros((nt, 2, c), dtype=x.dtype)
        for ni in numba.prange(n):
            t = numba.get_thread_id()
            for i in range(h):
                for j in range(w):
                    for ch in range(c):
                        d = dout[ni, i, j, ch]
                        part[t, 0, ch] += d * (x[ni, i, j, ch] - mean[ch]) * inv[ch]
                        part[t, 1, ch] += d
        for t in range(nt):
            for ch in range(c):
                dgamma[ch] += part[t, 0, ch]
                dbeta[ch] += part[t, 1, ch]

    @numba.njit(parallel=True, cache=True)
    def _bn_back_dx(x, dout, mean, inv, gamma, dgamma, dbeta, m):
        n, h, w, c = x.shape
        for ni in numba.prange(n):
            for i in range(h):
                for j in range(w):
                    for ch in range(c):
                        xhat = (x[ni, i, j, ch] - mean[ch]) * inv[ch]
                        dout[ni, i, j, ch] = inv[ch] * gamma[ch] * (
                            dout[ni, i, j, ch] - dbeta[ch] / m
                            - xhat * dgamma[ch] / m)

    @numba.njit(parallel=True, cache=True)
    def _pool_fwd(x, out, row_win, col_win):
        n, h, w, c = x.shape
        for ni in numba.prange(n):
            for i in range(h // 2):
                for j in range(w // 2):
                    for ch in range(c):
                        a = x[ni, 2 * i, 2 * j, ch]
                        b = x[ni, 2 * i + 1, 2 * j, ch]
                        cc = x[ni, 2 * i, 2 * j + 1, ch]
                        d = x[ni, 2 * i + 1, 2 * j + 1, ch]
                        rw0 = a >= b
                        m0 = a if rw0 else b
                        rw1 = cc >= d
                        m1 = cc if rw1 else d
                        cw = m0 >= m1
                        row_win[ni, i, 2 * j, ch] = rw0
                        row_win[ni, i, 2 * j + 1, ch] = rw1
                        col_win[ni, i, j, ch] = cw
                        out[ni, i, j, ch] = m0 if cw else m1

    @numba.njit(cache=True)
    def _sgd_update(p, g, v, lr, momentum):
        for i in range(p.size):
            vi = momentum * v[i] - lr * g[i]
            v[i] = vi
            p[i] += vi

    @numba.njit(parallel=True, cache=True)
    def _pool_bwd(dout, row_win, col_win, dx):
        n, h, w, c = dx.shape
        for ni in numba.prange(n):
            for i in range(h // 2):
                for j in range(w // 2):
                    for ch in range(c):
                        g = dout[ni, i, j, ch]
                        cw = col_win[ni, i, j, ch]
                        jj = 2 * j if cw else 2 * j + 1
                        rw = row_win[ni, i, jj, ch]
                        ii = 2 * i if rw else 2 * i + 1
                        dx[ni, ii, jj, ch] = g

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is normally present
    HAVE_NUMBA = False


def im2col(xp: np.ndarray, k: int) -> np.ndarray:
    """(N, Hp, Wp, C) padded input -> (N*Ho*Wo, k*k*C) patch matrix, stride 1."""
    n, hp, wp, c = xp.shape
    ho = hp - k + 1
    wo = wp - k + 1
    if HAVE_NUMBA:
        cols = np.empty((n * ho * wo, k * k * c), dtype=xp.dtype)
        _im2col_fill(np.ascontiguousarray(xp), k, cols)
        return cols
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        n * ho * wo, k * k * c)


def bn_channel_stats(x: np.ndarray):
    """Per-channel mean and (biased) variance over (N, H, W)."""
    if HAVE_NUMBA:
        c = x.shape[3]
        sums = np.zeros(c, dtype=x.dtype)
        sumsq = np.zeros(c, dtype=x.dtype)
        _bn_stats(x, sums, sumsq)
        m = x.shape[0] * x.shape[1] * x.shape[2]
        mean = sums / m
        var = sumsq / m - mean * mean
        return mean, np.maximum(var, 0.0)
    return x.mean(axis=(0, 1, 2)), x.var(axis=(0, 1, 2))


def bn_apply(x: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """out = x * scale + shift, broadcast over the channel axis."""
    if HAVE_NUMBA:
        out = np.empty_like(x)
        _bn_apply(x, scale, shift, out)
        return out
    out = x * scale
    out += shift
    return out


def bn_backward_training(x, dout, mean, inv, gamma):
    """Training-mode batch-norm backward; returns (dx, dgamma, dbeta).

    dx is written into the dout buffer when the JIT path is available.
    """
    m = x.shape[0] * x.shape[1] * x.shape[2]
    if HAVE_NUMBA:
        c = x.shape[3]
        dgamma = np.zeros(c, dtype=x.dtype)
        dbeta = np.zeros(c, dtype=x.dtype)
        _bn_back_stats(x, dout, mean, inv, dgamma, dbeta)
        _bn_back_dx(x, dout, mean, inv, gamma, dgamma, dbeta, x.dtype.type(m))
        return dout, dgamma, dbeta
    xhat = (x - mean) * inv
    dgamma = (dout * xhat).sum(axis=(0, 1, 2))
    dbeta = dout.sum(axis=(0, 1, 2))
    dx = inv * gamma * (dout - dbeta / m - xhat * dgamma / m)
    return dx, dgamma, dbeta


def maxpool_forward(x: np.ndarray):
    """2x2 stride-2 max pool; returns (out, row_winners, col_winners)."""
    n, h, w, c = x.shape
    if HAVE_NUMBA:
        out = np.empty((n, h // 2, w // 2, c), dtype=x.dtype)
        row_win = np.empty((n, h // 2, w, c), dtype=np.bool_)
        col_win = np.empty((n, h // 2, w // 2, c), dtype=np.bool_)
        _pool_fwd(x, out, row_win, col_win)
        return out, row_win, col_win
    a = x[:, 0::2, :, :]
    b = x[:, 1::2, :, :]
    row_win = a >= b
    m1 = np.where(row_win, a, b)
    cc = m1[:, :, 0::2, :]
    d = m1[:, :, 1::2, :]
    col_win = cc >= d
    return np.where(col_win, cc, d), row_win, col_win


def sgd_update(p: np.ndarray, g: np.ndarray, v: np.ndarray,
               lr: float, momentum: float) -> None:
    """In-place momentum step: v = momentum*v - lr*g; p += v."""
    if HAVE_NUMBA:
        _sgd_update(p.reshape(-1), g.reshape(-1), v.reshape(-1),
                    p.dtype.type(lr), p.dtype.type(momentum))
        return
    v *= momentum
    v -= lr * g
    p += v


def maxpool_backward(dout, row_win, col_win, in_shape):
    """Scatter pooled gradients back to the winning input cells."""
    if HAVE_NUMBA:
        dx = np.zeros(in_shape, dtype=dout.dtype)
        _pool_bwd(dout, row_win, col_win, dx)
        return dx
    n, h, w, ch = in_shape
    dm1 = np.zeros((n, h // 2, w, ch), dtype=dout.dtype)
    dm1[:, :, 0::2, :] = dout * col_win
    dm1[:, :, 1::2, :] = dout * ~col_win
    dx = np.zeros(in_shape, dtype=dout.dtype)
    dx[:, 0::2, :, :] = dm1 * row_win
    dx[:, 1::2, :, :] = dm1 * ~row_win
    return dx
