"""Compiled inner loops.

All routines operate on raw CSR arrays (``indptr``, ``indices``, ``data``)
plus the patient row pointer, so they are shared by the full and the reduced
(support-constrained) parameterizations.
"""
import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def tv_denoise(y, lam, out):
    """1-D total-variation proximal operator, direct (non-iterative) algorithm.

    Solves ``argmin_u 0.5*||u - y||^2 + lam * sum |u[k+1] - u[k]|`` in a single
    forward pass that tracks the admissible range of the current segment
    value and fuses samples into segments; results are written into ``out``.
    """
    n = y.size
    if n == 0:
        return
    if lam <= 0.0 or n == 1:
        for i in range(n):
            out[i] = y[i]
        return
    k = 0
    k0 = 0
    umin = lam
    umax = -lam
    vmin = y[0] - lam
    vmax = y[0] + lam
    kplus = 0
    kminus = 0
    twolam = 2.0 * lam
    minlam = -lam
    while True:
        while k == n - 1:
            if umin < 0.0:
                while True:
                    out[k0] = vmin
                    k0 += 1
                    if k0 > kminus:
                        break
                kminus = k0
                k = k0
                vmin = y[k0]
                umin = lam
                umax = vmin + umin - vmax
            elif umax > 0.0:
                while True:
                    out[k0] = vmax
                    k0 += 1
                    if k0 > kplus:
                        break
                kplus = k0
                k = k0
                vmax = y[k0]
                umax = minlam
                umin = vmax + umax - vmin
            else:
                vmin += umin / (k - k0 + 1)
                while True:
                    out[k0] = vmin
                    k0 += 1
                    if k0 > k:
                        break
                return
        umin += y[k + 1] - vmin
        if umin < minlam:
            while True:
                out[k0] = vmin
                k0 += 1
                if k0 > kminus:
                    break
            kplus = k0
            kminus = k0
            k = k0
            vmin = y[k0]
            vmax = vmin + twolam
            umin = lam
            umax = minlam
        else:
            umax += y[k + 1] - vmax
            if umax > lam:
                while True:
                    out[k0] = vmax
                    k0 += 1
                    if k0 > kplus:
                        break
                kplus = k0
                kminus = k0
                k = k0
                vmax = y[k0]
                vmin = vmax - twolam
                umin = lam
                umax = minlam
            else:
                k += 1
                if umin >= lam:
                    kminus = k
                    vmin += (umin - lam) / (kminus - k0 + 1)
                    umin = lam
                if umax <= minlam:
                    kplus = k
                    vmax += (umax + lam) / (kplus - k0 + 1)
                    umax = minlam


@njit(cache=True, nogil=True)
def group_soft_threshold(v, thr):
    """In-place ``max(0, 1 - thr/||v||) * v``; exact zeros when ``||v|| <= thr``."""
    s = 0.0
    for i in range(v.size):
        s += v[i] * v[i]
    norm = np.sqrt(s)
    # a few ulps of slack so ||v|| == thr computed another way still zeroes
    if norm <= thr * (1.0 + 8.0 * 2.220446049250313e-16):
        for i in range(v.size):
            v[i] = 0.0
    elif thr > 0.0:
        scale = 1.0 - thr / norm
        for i in range(v.size):
            v[i] *= scale


@njit(cache=True, nogil=True)
def prox_blocks(w, block_start, block_len, thr_tv, thr_gl, buf):
    """TV then group soft-thresholding on each block of ``w``, in place."""
    for b in range(block_start.size):
        s = block_start[b]
        n = block_len[b]
        seg = w[s:s + n]
        if thr_tv > 0.0:
            tv_denoise(seg.copy(), thr_tv, buf[:n])
            for i in range(n):
                seg[i] = buf[i]
        if thr_gl > 0.0:
            group_soft_threshold(seg, thr_gl)


@njit(cache=True, nogil=True)
def merge_rows(indptr, indices, data, row_ptr):
    """Group id of every row; consecutive identical rows of a patient share one.

    Returns ``(group, new_row_ptr)``.
    """
    n_rows = indptr.size - 1
    group = np.empty(n_rows, dtype=np.int64)
    new_ptr = np.empty(row_ptr.size, dtype=np.int64)
    g = -1
    new_ptr[0] = 0
    for i in range(row_ptr.size - 1):
        for r in range(row_ptr[i], row_ptr[i + 1]):
            same = r > row_ptr[i] and indptr[r + 1] - indptr[r] == indptr[r] - indptr[r - 1]
            if same:
                a = indptr[r - 1]
                b = indptr[r]
                for q in range(indptr[r + 1] - indptr[r]):
                    if indices[a + q] != indices[b + q] or data[a + q] != data[b + q]:
                        same = False
                        break
            if not same:
                g += 1
            group[r] = g
        new_ptr[i + 1] = g + 1
    return group, new_ptr


@njit(cache=True, nogil=True)
def patient_nll(indptr, indices, data, off, r0, r1, y, n_i, w, eta):
    """Per-patient loss ``n_i * lse(eta + off) - sum y*eta``.

    ``off`` holds the log multiplicity of each (merged) row.
    """
    mx = -np.inf
    ye = 0.0
    for r in range(r0, r1):
        s = 0.0
        for q in range(indptr[r], indptr[r + 1]):
            s += data[q] * w[indices[q]]
        ye += y[r] * s
        s += off[r]
        eta[r - r0] = s
        if s > mx:
            mx = s
    tot = 0.0
    for r in range(r0, r1):
        tot += np.exp(eta[r - r0] - mx)
    return n_i * (mx + np.log(tot)) - ye


@njit(cache=True, nogil=True)
def patient_grad_add(indptr, indices, data, off, r0, r1, y, n_i, w, scale, out, eta):
    """Add ``scale * grad`` of the per-patient loss to ``out``."""
    mx = -np.inf
    for r in range(r0, r1):
        s = off[r]
        for q in range(indptr[r], indptr[r + 1]):
            s += data[q] * w[indices[q]]
        eta[r - r0] = s
        if s > mx:
            mx = s
    tot = 0.0
    for r in range(r0, r1):
        e = np.exp(eta[r - r0] - mx)
        eta[r - r0] = e
        tot += e
    for r in range(r0, r1):
        coef = scale * (n_i * eta[r - r0] / tot - y[r])
        if coef != 0.0:
            for q in range(indptr[r], indptr[r + 1]):
                out[indices[q]] += coef * data[q]


@njit(cache=True, nogil=True)
def full_nll(indptr, indices, data, off, row_ptr, y, n_ev, cases, w, eta):
    """Mean per-case negative log-likelihood over ``cases`` (fixed order)."""
    tot = 0.0
    for t in range(cases.size):
        i = cases[t]
        tot += patient_nll(indptr, indices, data, off, row_ptr[i], row_ptr[i + 1], y, n_ev[i], w, eta)
    return tot / cases.size


@njit(cache=True, nogil=True)
def full_grad(indptr, indices, data, off, row_ptr, y, n_ev, cases, w, out, eta):
    for j in range(out.size):
        out[j] = 0.0
    inv = 1.0 / cases.size
    for t in range(cases.size):
        i = cases[t]
        patient_grad_add(indptr, indices, data, off, row_ptr[i], row_ptr[i + 1], y, n_ev[i], w, inv, out, eta)


@njit(cache=True, nogil=True)
def svrg_inner(indptr, indices, data, off, row_ptr, y, n_ev, samples, w, w_anchor, g_anchor,
               step, block_start, block_len, thr_tv, thr_gl, eta, v, buf):
    """Inner loop of proximal SVRG, updating ``w`` in place."""
    for t in range(samples.size):
        i = samples[t]
        r0 = row_ptr[i]
        r1 = row_ptr[i + 1]
        for j in range(v.size):
            v[j] = g_anchor[j]
        patient_grad_add(indptr, indices, data, off, r0, r1, y, n_ev[i], w, 1.0, v, eta)
        patient_grad_add(indptr, indices, data, off, r0, r1, y, n_ev[i], w_anchor, -1.0, v, eta)
        for j in range(w.size):
            w[j] -= step * v[j]
        prox_blocks(w, block_start, block_len, thr_tv, thr_gl, buf)
