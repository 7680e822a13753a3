"""Elementwise and windowed hot loops.

Every kernel has two implementations: a numba ``@njit`` loop and a pure numpy
expression.  The numba path is used when numba imports and the environment
variable ``IMMUNEKIT_NUMBA`` is not set to ``0``; otherwise the numpy path is
used.  Both paths return bit-identical results for the elementwise kernels and
agree to rounding for the UIQI reduction.  ``benchmarks/bench_kernels.py``
compares them.
"""

import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("IMMUNEKIT_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")
BACKEND = "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy reference path


def _np_clip_to_ball(x, center, tau, lo, hi):
    # replace only on strict violation, as the numba loop does, so signed zeros match
    out = np.where(x < center - tau, center - tau, x)
    out = np.where(out < lo, lo, out)
    out = np.where(out > center + tau, center + tau, out)
    return np.where(out > hi, hi, out)


def _np_sign_step(x, grad, alpha, center, tau, lo, hi):
    s = (grad > 0).astype(np.float64) - (grad < 0)
    return _np_clip_to_ball(x - alpha * s, center, tau, lo, hi)


def _np_compute_mask(grad_in, grad_out):
    # ratio > 0  <=>  same strict sign; grad_out == 0 gives 0 by convention.
    # Compare signs rather than the product, which can underflow to 0.
    return ((np.sign(grad_in) * np.sign(grad_out)) > 0).astype(np.float64)


def _np_uiqi(a, b, win, stride):
    wa = np.lib.stride_tricks.sliding_window_view(a, (win, win))[::stride, ::stride]
    wb = np.lib.stride_tricks.sliding_window_view(b, (win, win))[::stride, ::stride]
    n = win * win
    ma = wa.sum(axis=(2, 3)) / n
    mb = wb.sum(axis=(2, 3)) / n
    da = wa - ma[..., None, None]
    db = wb - mb[..., None, None]
    va = (da * da).sum(axis=(2, 3)) / n
    vb = (db * db).sum(axis=(2, 3)) / n
    cov = (da * db).sum(axis=(2, 3)) / n
    d1 = va + vb
    d2 = ma * ma + mb * mb
    same = np.all(wa == wb, axis=(2, 3))
    skip = (d1 == 0) & (d2 == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = 4.0 * cov * ma * mb / (d1 * d2)
    q = np.where((d1 == 0) | (d2 == 0), 0.0, q)
    q = np.where(same, 1.0, q)
    keep = ~skip
    count = int(keep.sum())
    if count == 0:
        return np.nan
    return float(q[keep].sum() / count)


# --------------------------------------------------------------------------
# numba path

if HAS_NUMBA:

    @numba.njit(cache=True)
    def _nb_clip_flat(x, center, tau, lo, hi, out):
        for i in range(x.size):
            v = x[i]
            c = center[i]
            if v < c - tau:
                v = c - tau
            if v < lo:
                v = lo
            if v > c + tau:
                v = c + tau
            if v > hi:
                v = hi
            out[i] = v

    @numba.njit(cache=True)
    def _nb_sign_step_flat(x, grad, alpha, center, tau, lo, hi, out):
        for i in range(x.size):
            g = grad[i]
            s = 0.0
            if g > 0:
                s = 1.0
            elif g < 0:
                s = -1.0
            v = x[i] - alpha * s
            c = center[i]
            if v < c - tau:
                v = c - tau
            if v < lo:
                v = lo
            if v > c + tau:
                v = c + tau
            if v > hi:
                v = hi
            out[i] = v

    @numba.njit(cache=True)
    def _nb_mask_flat(grad_in, grad_out, out):
        for i in range(grad_in.size):
            go = grad_out[i]
            gi = grad_in[i]
            if (gi > 0.0 and go > 0.0) or (gi < 0.0 and go < 0.0):
                out[i] = 1.0
            else:
                out[i] = 0.0

    @numba.njit(cache=True)
    def _nb_uiqi(a, b, win, stride):
        rows, cols = a.shape
        n = win * win
        total = 0.0
        count = 0
        for i in range(0, rows - win + 1, stride):
            for j in range(0, cols - win + 1, stride):
                sa = 0.0
                sb = 0.0
                same = True
                for u in range(win):
                    for v in range(win):
                        pa = a[i + u, j + v]
                        pb = b[i + u, j + v]
                        sa += pa
                        sb += pb
                        if pa != pb:
                            same = False
                ma = sa / n
                mb = sb / n
                va = 0.0
                vb = 0.0
                cov = 0.0
                for u in range(win):
                    for v in range(win):
                        da = a[i + u, j + v] - ma
                        db = b[i + u, j + v] - mb
                        va += da * da
                        vb += db * db
                        cov += da * db
                va /= n
                vb /= n
                cov /= n
                d1 = va + vb
                d2 = ma * ma + mb * mb
                if d1 == 0.0 and d2 == 0.0:
                    continue
                count += 1
                if same:
                    total += 1.0
                elif d1 != 0.0 and d2 != 0.0:
                    total += 4.0 * cov * ma * mb / (d1 * d2)
        if count == 0:
            return np.nan
        return total / count


def _flat(a):
    return np.ascontiguousarray(a, dtype=np.float64).ravel()


def _nb_clip_to_ball(x, center, tau, lo, hi):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.size)
    _nb_clip_flat(_flat(x), _flat(center), float(tau), float(lo), float(hi), out)
    return out.reshape(x.shape)


def _nb_sign_step(x, grad, alpha, center, tau, lo, hi):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.size)
    _nb_sign_step_flat(_flat(x), _flat(grad), float(alpha), _flat(center), float(tau), float(lo), float(hi), out)
    return out.reshape(x.shape)


def _nb_compute_mask(grad_in, grad_out):
    grad_in = np.asarray(grad_in, dtype=np.float64)
    out = np.empty(grad_in.size)
    _nb_mask_flat(_flat(grad_in), _flat(grad_out), out)
    return out.reshape(grad_in.shape)


def _nb_uiqi_entry(a, b, win, stride):
    return float(_nb_uiqi(np.ascontiguousarray(a, dtype=np.float64), np.ascontiguousarray(b, dtype=np.float64), int(win), int(stride)))


NUMPY_IMPL = {
    "clip_to_ball": _np_clip_to_ball,
    "sign_step": _np_sign_step,
    "compute_mask": _np_compute_mask,
    "uiqi": _np_uiqi,
}

NUMBA_IMPL = (
    {
        "clip_to_ball": _nb_clip_to_ball,
        "sign_step": _nb_sign_step,
        "compute_mask": _nb_compute_mask,
        "uiqi": _nb_uiqi_entry,
    }
    if HAS_NUMBA
    else {}
)

_ACTIVE = NUMBA_IMPL if USE_NUMBA else NUMPY_IMPL

clip_to_ball = _ACTIVE["clip_to_ball"]
sign_step = _ACTIVE["sign_step"]
compute_mask = _ACTIVE["compute_mask"]
uiqi_window_mean = _ACTIVE["uiqi"]
