# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; ``_fallback.py`` holds the numpy twins."""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, log, sin, cos, tan, atan2, sqrt, fabs, M_PI, INFINITY

cnp.import_array()

cdef double LOG2 = 0.6931471805599453


# ---------------------------------------------------------------------------
# angle equation and squared distances
# ---------------------------------------------------------------------------

cdef inline double _num_small(double phi) nogil:
    cdef double x = 2.0 * phi
    cdef double x2 = x * x
    return 0.5 * (x * x2 / 6.0 * (1.0 - x2 / 20.0 * (1.0 - x2 / 42.0 * (1.0 - x2 / 72.0 * (1.0 - x2 / 110.0)))))


cdef inline double _angle_num(double phi) nogil:
    if phi < 0.1:
        return _num_small(phi)
    return phi - 0.5 * sin(2.0 * phi)


cdef inline double _h_delta(double d) nogil:
    cdef double s = sin(d)
    return (M_PI - d + s * cos(d)) / (s * s)


cdef inline double _gfun(double phi) nogil:
    cdef double s
    if phi < 1e-8:
        return 2.0 * phi / 3.0
    if phi > 0.5 * M_PI:
        return _h_delta(M_PI - phi)
    s = sin(phi)
    return _angle_num(phi) / (s * s)


cdef double _solve_angle(double r) nogil:
    """phi in [0, pi] with G(phi) = r: bisection to 1e-6 relative, then Newton."""
    cdef double a, b, c, x, xn, fx, fn, dfx
    cdef int it
    if r < 1e-9:
        return 1.5 * r
    if r == INFINITY:
        return M_PI
    if r <= 0.5 * M_PI:
        a = 0.0
        b = 0.5 * M_PI
        for it in range(200):
            c = 0.5 * (a + b)
            if _gfun(c) < r:
                a = c
            else:
                b = c
            if b - a <= 1e-6 * b:
                break
        x = 0.5 * (a + b)
        for it in range(60):
            fx = _gfun(x)
            dfx = 2.0 * (1.0 - fx / tan(x))
            xn = x - (fx - r) / dfx
            if not (xn >= a and xn <= b):
                xn = 0.5 * (a + b)
            fn = _gfun(xn)
            if fn < r:
                a = xn
            else:
                b = xn
            if fabs(xn - x) <= 4e-16 * fabs(xn):
                x = xn
                break
            x = xn
        return x
    # decreasing H(d) = G(pi - d)
    a = 0.0
    b = 0.5 * M_PI
    for it in range(200):
        c = 0.5 * (a + b)
        if _h_delta(c) > r:
            a = c
        else:
            b = c
        if b - a <= 1e-6 * b:
            break
    x = 0.5 * (a + b)
    for it in range(60):
        fx = _h_delta(x)
        dfx = -2.0 * (1.0 + fx / tan(x))
        xn = x - (fx - r) / dfx
        if not (xn >= a and xn <= b):
            xn = 0.5 * (a + b)
        fn = _h_delta(xn)
        if fn > r:
            a = xn
        else:
            b = xn
        if fabs(xn - x) <= 4e-16 * fabs(xn):
            x = xn
            break
        x = xn
    return M_PI - x


cdef inline double _dist_sq(double rho2, double zabs, double c) nogil:
    cdef double r, phi, s, q, d
    if zabs == 0.0:
        return rho2
    if rho2 == 0.0:
        return M_PI * zabs / c
    r = zabs / (c * rho2)
    phi = _solve_angle(r)
    if phi <= 0.5 * M_PI:
        if phi < 1e-8:
            return rho2
        s = sin(phi)
        q = phi / s
        return rho2 * q * q
    d = M_PI - phi
    return phi * phi * zabs / (c * (M_PI - d + sin(d) * cos(d)))


def dist_sq_block(double[::1] rho2, double[::1] zabs, double c, int threads=1):
    cdef Py_ssize_t n = rho2.shape[0], i
    out = np.empty(n)
    cdef double[::1] o = out
    for i in prange(n, nogil=True, num_threads=threads, schedule="static"):
        o[i] = _dist_sq(rho2[i], fabs(zabs[i]), c)
    return out


def solve_angle_array(double[::1] r):
    cdef Py_ssize_t n = r.shape[0], i
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = _solve_angle(r[i])
    return out


# ---------------------------------------------------------------------------
# heat-kernel contour quadrature
# ---------------------------------------------------------------------------

cdef inline double _integrand(double x, double a, double b, double tau, double l0) nogil:
    cdef double s2r, s2i, s4r, s4i, rr, ri, cr, ci, pre, pim
    cdef double e2, er, ei, omr, omi, lom_r, lom_i, numr, numi, den, cothr, cothi
    cdef double scr, sci, lsr, lsi
    if x * x + tau * tau < 1e-6:
        s2r = x * x - tau * tau
        s2i = 2.0 * x * tau
        s4r = s2r * s2r - s2i * s2i
        s4i = 2.0 * s2r * s2i
        rr = 1.0 - s2r / 6.0 + 7.0 * s4r / 360.0
        ri = -s2i / 6.0 + 7.0 * s4i / 360.0
        cr = 1.0 + s2r / 3.0 - s4r / 45.0
        ci = s2i / 3.0 - s4i / 45.0
        pre = 0.5 * log(rr * rr + ri * ri) - a * cr - b * tau - l0
        pim = atan2(ri, rr) - a * ci + b * x
        return exp(pre) * cos(pim)
    e2 = exp(-2.0 * x)
    er = e2 * cos(2.0 * tau)
    ei = -e2 * sin(2.0 * tau)
    omr = 1.0 - er
    omi = -ei
    lom_r = 0.5 * log(omr * omr + omi * omi)
    lom_i = atan2(omi, omr)
    numr = 1.0 + er
    numi = ei
    den = omr * omr + omi * omi
    cothr = (numr * omr + numi * omi) / den
    cothi = (numi * omr - numr * omi) / den
    scr = x * cothr - tau * cothi
    sci = x * cothi + tau * cothr
    lsr = 0.5 * log(x * x + tau * tau)
    lsi = atan2(tau, x)
    pre = lsr - (x + lom_r - LOG2) - a * scr - b * tau - l0
    pim = lsi - (tau + lom_i) - a * sci + b * x
    return exp(pre) * cos(pim)


cdef inline void _gl(double x0, double x1, const double* nodes, const double* weights, int n,
                     double a, double b, double tau, double l0,
                     double* val, double* aval, double* peak) noexcept nogil:
    cdef double half = 0.5 * (x1 - x0)
    cdef double mid = 0.5 * (x1 + x0)
    cdef double s = 0.0, sa = 0.0, pk = 0.0, f
    cdef int k
    for k in range(n):
        f = _integrand(mid + half * nodes[k], a, b, tau, l0)
        s += weights[k] * f
        sa += weights[k] * fabs(f)
        if fabs(f) > pk:
            pk = fabs(f)
    val[0] = half * s
    aval[0] = half * sa
    peak[0] = pk


cdef int _contour(double a, double b, double tau, double l0, double width, double h0,
                  double hcap, const double* nodes, const double* weights, int n,
                  const double* nodes_lo, const double* weights_lo, int nlo,
                  double rel_tol, double tail_tol, long max_panels, double* result) noexcept nogil:
    cdef double total = 0.0, mass = 0.0, x = 0.0, h = h0, x1, peak
    cdef double p0, p1, pm, hi, ahi, pk, lo, alo, pklo
    cdef long count = 0
    cdef double st0[256]
    cdef double st1[256]
    cdef int top
    while True:
        x1 = x + h
        st0[0] = x
        st1[0] = x1
        top = 1
        peak = 0.0
        while top > 0:
            top -= 1
            p0 = st0[top]
            p1 = st1[top]
            _gl(p0, p1, nodes, weights, n, a, b, tau, l0, &hi, &ahi, &pk)
            _gl(p0, p1, nodes_lo, weights_lo, nlo, a, b, tau, l0, &lo, &alo, &pklo)
            count += 1
            if count > max_panels:
                result[0] = total
                return -1
            if (fabs(hi - lo) <= rel_tol * (mass + ahi)
                    or (p1 - p0) < 1e-14 * (1.0 + p1) or top >= 254):
                total += hi
                mass += ahi
                if pk > peak:
                    peak = pk
            else:
                pm = 0.5 * (p0 + p1)
                st0[top] = pm
                st1[top] = p1
                top += 1
                st0[top] = p0
                st1[top] = pm
                top += 1
        x = x1
        if peak < tail_tol * mass and x >= 3.0 * width:
            result[0] = total
            return <int>count
        if h < hcap:
            h = 2.0 * h
            if h > hcap:
                h = hcap


def log_kernel_integrals(double[::1] a, double[::1] b, double[::1] tau, double[::1] l0,
                         double[::1] width, double[::1] h0, double[::1] hcap,
                         double[::1] nodes, double[::1] weights, double[::1] nodes_lo,
                         double[::1] weights_lo, double rel_tol, double tail_tol,
                         long max_panels, int threads=1):
    cdef Py_ssize_t n = a.shape[0], i
    cdef int nn = nodes.shape[0]
    cdef int nlo = nodes_lo.shape[0]
    logm = np.empty(n)
    status = np.zeros(n, dtype=np.int64)
    cdef double[::1] lm = logm
    cdef long long[::1] st = status
    cdef double m
    cdef int used
    for i in prange(n, nogil=True, num_threads=threads, schedule="dynamic"):
        used = _contour(a[i], b[i], tau[i], l0[i], width[i], h0[i], hcap[i], &nodes[0],
                        &weights[0], nn, &nodes_lo[0], &weights_lo[0], nlo, rel_tol,
                        tail_tol, max_panels, &m)
        if used < 0:
            st[i] = 1
            lm[i] = 0.0 / 0.0
        elif not (m > 0.0):
            st[i] = 2
            lm[i] = 0.0 / 0.0
        else:
            lm[i] = log(m)
    return logm, status


# ---------------------------------------------------------------------------
# log-domain block-Toeplitz matvec
# ---------------------------------------------------------------------------

def _check_blocks(logK, g):
    nz, P = g.shape[0], g.shape[1]
    if logK.shape[0] != 2 * nz - 1 or logK.shape[1] != P or logK.shape[2] != P:
        raise ValueError("logK must have shape (2 nz - 1, P, P) for blocks of shape (nz, P)")


def log_block_matvec(double[:, :, ::1] logK, double[:, ::1] g, int threads=1):
    """``out[z0, p0] = log sum_{z1, p1} exp(logK[z1 - z0 + nz - 1, p0, p1] + g[z1, p1])``."""
    _check_blocks(logK, g)
    cdef Py_ssize_t nz = g.shape[0], P = g.shape[1]
    cdef Py_ssize_t p0, z0, z1, p1, k
    out = np.empty((nz, P))
    cdef double[:, ::1] o = out
    cdef double m, acc, v, cut
    cdef const double* row
    cdef const double* gr
    for p0 in prange(P, nogil=True, num_threads=threads, schedule="static"):
        for z0 in range(nz):
            m = -INFINITY
            for z1 in range(nz):
                k = z1 - z0 + nz - 1
                row = &logK[k, p0, 0]
                gr = &g[z1, 0]
                for p1 in range(P):
                    v = row[p1] + gr[p1]
                    if v > m:
                        m = v
            acc = 0.0
            cut = m - 60.0
            for z1 in range(nz):
                k = z1 - z0 + nz - 1
                row = &logK[k, p0, 0]
                gr = &g[z1, 0]
                for p1 in range(P):
                    v = row[p1] + gr[p1]
                    if v > cut:
                        acc = acc + exp(v - m)
            o[z0, p0] = m + log(acc)
    return out


def log_block_max(double[:, :, ::1] logK, double[:, ::1] g, int threads=1):
    """``out[z0, p0] = max_{z1, p1} (logK[z1 - z0 + nz - 1, p0, p1] + g[z1, p1])``."""
    _check_blocks(logK, g)
    cdef Py_ssize_t nz = g.shape[0], P = g.shape[1]
    cdef Py_ssize_t p0, z0, z1, p1, k
    out = np.empty((nz, P))
    cdef double[:, ::1] o = out
    cdef double m, v
    cdef const double* row
    cdef const double* gr
    for p0 in prange(P, nogil=True, num_threads=threads, schedule="static"):
        for z0 in range(nz):
            m = -INFINITY
            for z1 in range(nz):
                k = z1 - z0 + nz - 1
                row = &logK[k, p0, 0]
                gr = &g[z1, 0]
                for p1 in range(P):
                    v = row[p1] + gr[p1]
                    if v > m:
                        m = v
            o[z0, p0] = m
    return out


def sparse_support(double[:, :, ::1] logK, double[:, ::1] f, double[:, ::1] g,
                   double[:, ::1] rthr, double[:, ::1] cthr, int threads=1):
    """CSR support of ``logK + f (+) g`` above a row or a column threshold.

    Node ``(p, z)`` has flat index ``p * nz + z``.  Entry ``(i, j)`` is kept
    when its value reaches ``rthr`` of row ``i`` or ``cthr`` of column ``j``.
    Returns ``(indptr, indices, logvals)``.
    """
    _check_blocks(logK, g)
    for arr in (f, rthr, cthr):
        if arr.shape[0] != g.shape[0] or arr.shape[1] != g.shape[1]:
            raise ValueError("f and thresholds must match the block shape of g")
    cdef Py_ssize_t nz = g.shape[0], P = g.shape[1], N = nz * P
    cdef Py_ssize_t p0, z0, z1, p1, k, r, pos
    cdef double v, fi, rt
    cdef const double* row
    cdef const double* gr
    cdef const double* cr
    counts = np.zeros(N + 1, dtype=np.int64)
    cdef long long[::1] cnt = counts
    for p0 in prange(P, nogil=True, num_threads=threads, schedule="static"):
        for z0 in range(nz):
            r = 0
            fi = f[z0, p0]
            rt = rthr[z0, p0]
            for z1 in range(nz):
                k = z1 - z0 + nz - 1
                row = &logK[k, p0, 0]
                gr = &g[z1, 0]
                cr = &cthr[z1, 0]
                for p1 in range(P):
                    v = row[p1] + fi + gr[p1]
                    if v >= rt or v >= cr[p1]:
                        r = r + 1
            cnt[p0 * nz + z0 + 1] = r
    indptr = np.cumsum(counts)
    cdef long long nnz = indptr[N]
    indices = np.empty(nnz, dtype=np.int32)
    data = np.empty(nnz)
    cdef long long[::1] ip = indptr
    cdef int[::1] ind = indices
    cdef double[::1] dat = data
    for p0 in prange(P, nogil=True, num_threads=threads, schedule="static"):
        for z0 in range(nz):
            pos = ip[p0 * nz + z0]
            fi = f[z0, p0]
            rt = rthr[z0, p0]
            for p1 in range(P):
                for z1 in range(nz):
                    k = z1 - z0 + nz - 1
                    v = logK[k, p0, p1] + fi + g[z1, p1]
                    if v >= rt or v >= cthr[z1, p1]:
                        ind[pos] = <int>(p1 * nz + z1)
                        dat[pos] = v
                        pos = pos + 1
    return indptr, indices, data


# ---------------------------------------------------------------------------
# Philox4x32-10
# ---------------------------------------------------------------------------

from libc.stdint cimport uint32_t, uint64_t


cdef inline void _philox(uint32_t* c, uint32_t k0, uint32_t k1) noexcept nogil:
    cdef uint64_t p0, p1
    cdef uint32_t a0, a1, a2, a3
    cdef int r
    for r in range(10):
        if r:
            k0 = k0 + <uint32_t>0x9E3779B9
            k1 = k1 + <uint32_t>0xBB67AE85
        p0 = <uint64_t>c[0] * <uint64_t>0xD2511F53
        p1 = <uint64_t>c[2] * <uint64_t>0xCD9E8D57
        a0 = (<uint32_t>(p1 >> 32)) ^ c[1] ^ k0
        a1 = <uint32_t>p1
        a2 = (<uint32_t>(p0 >> 32)) ^ c[3] ^ k1
        a3 = <uint32_t>p0
        c[0] = a0
        c[1] = a1
        c[2] = a2
        c[3] = a3


cdef struct Quad:
    uint32_t a
    uint32_t b
    uint32_t c
    uint32_t d


cdef inline Quad _philox_q(uint32_t c0, uint32_t c1, uint32_t c2, uint32_t c3,
                           uint32_t k0, uint32_t k1) noexcept nogil:
    cdef uint32_t w[4]
    cdef Quad q
    w[0] = c0
    w[1] = c1
    w[2] = c2
    w[3] = c3
    _philox(w, k0, k1)
    q.a = w[0]
    q.b = w[1]
    q.c = w[2]
    q.d = w[3]
    return q


cdef inline double _u53(uint32_t a, uint32_t b) noexcept nogil:
    return ((<double>(a >> 5)) * 67108864.0 + <double>(b >> 6) + 0.5) / 9007199254740992.0


def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten Philox rounds on uint32 counter arrays with key ``(k0, k1)``."""
    cdef uint32_t[::1] a = np.array(c0, dtype=np.uint32, ndmin=1)
    cdef uint32_t[::1] b = np.array(c1, dtype=np.uint32, ndmin=1)
    cdef uint32_t[::1] c = np.array(c2, dtype=np.uint32, ndmin=1)
    cdef uint32_t[::1] d = np.array(c3, dtype=np.uint32, ndmin=1)
    cdef Py_ssize_t i
    cdef uint32_t w[4]
    for i in range(a.shape[0]):
        w[0] = a[i]
        w[1] = b[i]
        w[2] = c[i]
        w[3] = d[i]
        _philox(w, <uint32_t>k0, <uint32_t>k1)
        a[i] = w[0]
        b[i] = w[1]
        c[i] = w[2]
        d[i] = w[3]
    return np.asarray(a), np.asarray(b), np.asarray(c), np.asarray(d)


def philox_uniforms(seed, ids, word2, word3):
    """Two uniforms per id from counter ``(id_lo, id_hi, word2, word3)``."""
    cdef uint64_t[::1] idv = np.ascontiguousarray(ids, dtype=np.uint64)
    cdef Py_ssize_t n = idv.shape[0], i
    cdef uint64_t s = <uint64_t>(int(seed) & 0xFFFFFFFFFFFFFFFF)
    cdef uint32_t k0 = <uint32_t>s, k1 = <uint32_t>(s >> 32)
    cdef uint32_t w2 = <uint32_t>(int(word2) & 0xFFFFFFFF), w3 = <uint32_t>(int(word3) & 0xFFFFFFFF)
    u1 = np.empty(n)
    u2 = np.empty(n)
    cdef double[::1] o1 = u1, o2 = u2
    cdef uint32_t w[4]
    for i in range(n):
        w[0] = <uint32_t>idv[i]
        w[1] = <uint32_t>(idv[i] >> 32)
        w[2] = w2
        w[3] = w3
        _philox(w, k0, k1)
        o1[i] = _u53(w[0], w[1])
        o2[i] = _u53(w[2], w[3])
    return u1, u2


def philox_normals(seed, ids, step, int m, int threads=1):
    """Standard normals ``(len(ids), m)``; block ``j`` uses counter ``(id, step, j)``."""
    cdef uint64_t[::1] idv = np.ascontiguousarray(ids, dtype=np.uint64)
    cdef Py_ssize_t n = idv.shape[0], i
    cdef int j, nb = (m + 1) // 2
    cdef uint64_t s = <uint64_t>(int(seed) & 0xFFFFFFFFFFFFFFFF)
    cdef uint32_t k0 = <uint32_t>s, k1 = <uint32_t>(s >> 32)
    cdef uint32_t st = <uint32_t>(int(step) & 0xFFFFFFFF)
    out = np.empty((n, 2 * nb))
    cdef double[:, ::1] o = out
    cdef Quad q
    cdef double r, t
    for i in prange(n, nogil=True, num_threads=threads, schedule="static"):
        for j in range(nb):
            q = _philox_q(<uint32_t>idv[i], <uint32_t>(idv[i] >> 32), st, <uint32_t>j, k0, k1)
            r = sqrt(-2.0 * log(_u53(q.a, q.b)))
            t = 2.0 * M_PI * _u53(q.c, q.d)
            o[i, 2 * j] = r * cos(t)
            o[i, 2 * j + 1] = r * sin(t)
    return out[:, :m]
