"""Fused loops for the rational activation (the hot spot of every epoch).

Compiled with numba when it is importable; otherwise plain numpy versions
with identical results up to rounding are used.
"""

from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None


def _rational_forward_np(x, num, den):
    p = ((num[3] * x + num[2]) * x + num[1]) * x + num[0]
    q = (den[2] * x + den[1]) * x + den[0]
    return p / q, float(np.min(np.abs(q), initial=np.inf))


def _min_abs_quadratic_np(x, den):
    q = (den[2] * x + den[1]) * x + den[0]
    return float(np.min(np.abs(q), initial=np.inf))


def _rational_backward_np(g, x, num, den):
    q = (den[2] * x + den[1]) * x + den[0]
    p = ((num[3] * x + num[2]) * x + num[1]) * x + num[0]
    gp = g / q
    gq = -gp * (p / q)
    dp = (3.0 * num[3] * x + 2.0 * num[2]) * x + num[1]
    dq = 2.0 * den[2] * x + den[1]
    gx = gp * dp + gq * dq
    x2 = x * x
    gnum = np.array([gp.sum(), (gp * x).sum(), (gp * x2).sum(), (gp * x2 * x).sum()])
    gden = np.array([gq.sum(), (gq * x).sum(), (gq * x2).sum()])
    return gx, gnum, gden


if numba is not None:

    @numba.njit(cache=True, error_model="numpy")
    def _rational_forward_nb(x, num, den):
        flat = x.ravel()
        out = np.empty_like(flat)
        qmin = np.inf
        for i in range(flat.size):
            v = flat[i]
            p = ((num[3] * v + num[2]) * v + num[1]) * v + num[0]
            q = (den[2] * v + den[1]) * v + den[0]
            out[i] = p / q
            aq = abs(q)
            if aq < qmin:
                qmin = aq
        return out.reshape(x.shape), qmin

    @numba.njit(cache=True, error_model="numpy")
    def _min_abs_quadratic_nb(x, den):
        flat = x.ravel()
        qmin = np.inf
        for i in range(flat.size):
            v = flat[i]
            aq = abs((den[2] * v + den[1]) * v + den[0])
            if aq < qmin:
                qmin = aq
        return qmin

    @numba.njit(cache=True, error_model="numpy")
    def _rational_backward_nb(g, x, num, den):
        gf = g.ravel()
        xf = x.ravel()
        gx = np.empty_like(xf)
        gnum = np.zeros(4)
        gden = np.zeros(3)
        for i in range(xf.size):
            v = xf[i]
            q = (den[2] * v + den[1]) * v + den[0]
            p = ((num[3] * v + num[2]) * v + num[1]) * v + num[0]
            gp = gf[i] / q
            gq = -gp * (p / q)
            dp = (3.0 * num[3] * v + 2.0 * num[2]) * v + num[1]
            dq = 2.0 * den[2] * v + den[1]
            gx[i] = gp * dp + gq * dq
            v2 = v * v
            gnum[0] += gp
            gnum[1] += gp * v
            gnum[2] += gp * v2
            gnum[3] += gp * v2 * v
            gden[0] += gq
            gden[1] += gq * v
            gden[2] += gq * v2
        return gx.reshape(x.shape), gnum, gden

    def rational_forward(x, num, den):
        return _rational_forward_nb(np.ascontiguousarray(x, dtype=np.float64),
                                    np.asarray(num, dtype=np.float64), np.asarray(den, dtype=np.float64))

    def min_abs_quadratic(x, den):
        return _min_abs_quadratic_nb(np.ascontiguousarray(x, dtype=np.float64), np.asarray(den, dtype=np.float64))

    def rational_backward(g, x, num, den):
        return _rational_backward_nb(np.ascontiguousarray(g, dtype=np.float64),
                                     np.ascontiguousarray(x, dtype=np.float64),
                                     np.asarray(num, dtype=np.float64), np.asarray(den, dtype=np.float64))

else:  # pragma: no cover
    rational_forward = _rational_forward_np
    rational_backward = _rational_backward_np
    min_abs_quadratic = _min_abs_quadratic_np
