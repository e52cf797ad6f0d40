"""Pure-numpy versions of the compiled kernels in ``_ext.pyx``.

Signatures and floating-point operation order match the compiled versions.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_TAU = 1e-12


def _last_argmax(values, mask):
    # np.argmax returns the first maximum; the compiled loop keeps the last (>=).
    if not mask.any():
        return -1, -np.inf
    v = np.where(mask, values, -np.inf)
    best = v.max()
    idx = np.flatnonzero(v == best)[-1]
    return int(idx), float(best)


def smo_solve(K, y, C, eps=1e-3, max_iter=100000):
    K = np.ascontiguousarray(K, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n = K.shape[0]
    alpha = np.zeros(n)
    G = -np.ones(n)
    diagK = np.diag(K).copy()
    pos = y > 0
    it = 0
    while it < max_iter:
        up = np.where(pos, alpha < C, alpha > 0)
        i, Gmax = _last_argmax(np.where(pos, -G, G), up)
        if i < 0:
            break
        yi = y[i]
        low = np.where(pos, alpha > 0, alpha < C)
        Gmax2 = -np.inf
        if low.any():
            Gmax2 = float(np.where(low, np.where(pos, G, -G), -np.inf).max())
        grad_diff = np.where(pos, Gmax + G, Gmax - G)
        Kit = K[i]
        quad = np.where(pos,
                        diagK[i] + diagK - 2.0 * yi * (yi * Kit),
                        diagK[i] + diagK + 2.0 * yi * (-yi * Kit))
        quad = np.where(quad <= 0, _TAU, quad)
        cand = low & (grad_diff > 0)
        j = -1
        if cand.any():
            obj = np.where(cand, -(grad_diff * grad_diff) / quad, np.inf)
            best = obj.min()
            j = int(np.flatnonzero(obj == best)[-1])
        if Gmax + Gmax2 < eps or j < 0:
            break
        it += 1

        yj = y[j]
        Kij = K[i, j]
        old_ai, old_aj = alpha[i], alpha[j]
        ai, aj = old_ai, old_aj
        if yi != yj:
            q = diagK[i] + diagK[j] + 2.0 * (yi * yj * Kij)
            if q <= 0:
                q = _TAU
            delta = (-G[i] - G[j]) / q
            diff = ai - aj
            ai += delta
            aj += delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            else:
                if ai < 0:
                    ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            else:
                if aj > C:
                    aj, ai = C, C + diff
        else:
            q = diagK[i] + diagK[j] - 2.0 * (yi * yj * Kij)
            if q <= 0:
                q = _TAU
            delta = (G[i] - G[j]) / q
            s = ai + aj
            ai -= delta
            aj += delta
            if s > C:
                if ai > C:
                    ai, aj = C, s - C
            else:
                if aj < 0:
                    aj, ai = 0.0, s
            if s > C:
                if aj > C:
                    aj, ai = C, s - C
            else:
                if ai < 0:
                    ai, aj = 0.0, s
        alpha[i], alpha[j] = ai, aj
        dai = ai - old_ai
        daj = aj - old_aj
        G += (yi * y * K[i]) * dai + (yj * y * K[j]) * daj

    return alpha, _rho(alpha, G, y, C), it


def _rho(alpha, G, y, C):
    yG = y * G
    upper = alpha >= C
    lower = alpha <= 0
    free = ~upper & ~lower
    if free.any():
        return float(yG[free].sum() / free.sum())
    ub_mask = (upper & (y < 0)) | (lower & (y > 0))
    lb_mask = (upper & (y > 0)) | (lower & (y < 0))
    ub = yG[ub_mask].min() if ub_mask.any() else np.inf
    lb = yG[lb_mask].max() if lb_mask.any() else -np.inf
    return float((ub + lb) / 2.0)


def maxpool2x2_forward(x):
    N, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    win = x[:, :, : 2 * Ho, : 2 * Wo].reshape(N, C, Ho, 2, Wo, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, 4)
    arg = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2x2_backward(dout, arg, H, W):
    N, C, Ho, Wo = dout.shape
    onehot = arg[..., None] == np.arange(4, dtype=np.int8)
    win = np.where(onehot, dout[..., None], 0).astype(dout.dtype)
    win = win.reshape(N, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros((N, C, H, W), dtype=dout.dtype)
    dx[:, :, : 2 * Ho, : 2 * Wo] = win.reshape(N, C, 2 * Ho, 2 * Wo)
    return dx


def im2col(x, kh, kw, stride):
    N, C = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * kh * kw)


def col2im(dcols, Hp, Wp, stride):
    N, Ho, Wo, C, kh, kw = dcols.shape
    dx = np.zeros((N, C, Hp, Wp), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dx
