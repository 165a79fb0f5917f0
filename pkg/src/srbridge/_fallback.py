"""Pure numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_core.pyx`` with the same
signature and the same arithmetic order, so the two backends agree to
rounding.
"""

from __future__ import annotations

import numpy as np

LOG2 = np.log(2.0)


# ---------------------------------------------------------------------------
# heat-kernel contour quadrature
# ---------------------------------------------------------------------------

def _integrand(x, a, b, tau, l0):
    """Real part of ``exp(psi(x + i tau) - l0)`` on an array of abscissae."""
    s = x + 1j * tau
    small = np.abs(s) < 1e-3
    out = np.empty(x.shape)
    if np.any(~small):
        ss = s[~small]
        e = np.exp(-2.0 * ss)
        one_m = 1.0 - e
        logsinh = ss + np.log(one_m) - LOG2
        coth = (1.0 + e) / one_m
        psi = np.log(ss) - logsinh - a * ss * coth + 1j * b * ss - l0
        out[~small] = np.exp(psi.real) * np.cos(psi.imag)
    if np.any(small):
        ss = s[small]
        s2 = ss * ss
        ratio = 1.0 - s2 / 6.0 + 7.0 * s2 * s2 / 360.0
        scoth = 1.0 + s2 / 3.0 - s2 * s2 / 45.0
        psi = np.log(ratio) - a * scoth + 1j * b * ss - l0
        out[small] = np.exp(psi.real) * np.cos(psi.imag)
    return out


def _gl(x0, x1, nodes, weights, a, b, tau, l0):
    half = 0.5 * (x1 - x0)
    mid = 0.5 * (x1 + x0)
    f = _integrand(mid + half * nodes, a, b, tau, l0)
    return half * np.dot(weights, f), half * np.dot(weights, np.abs(f)), np.max(np.abs(f))


def contour_integral(a, b, tau, l0, width, h0, hcap, nodes, weights, nodes_lo, weights_lo,
                     rel_tol, tail_tol, max_panels):
    """Normalised contour integral ``M`` and the number of panels used.

    Panels start at ``h0`` and double until ``hcap``.  Each panel is
    integrated with the high and the low order rule; on disagreement beyond
    ``rel_tol`` times the accumulated absolute mass it is bisected.  Marching
    stops once a panel's peak magnitude is below ``tail_tol`` times that mass
    and the abscissa is past ``3 * width``.  Returns ``(M, panels)`` with
    ``panels = -1`` when ``max_panels`` is exhausted.
    """
    total = 0.0
    mass = 0.0
    x = 0.0
    h = h0
    count = 0
    while True:
        x1 = x + h
        stack = [(x, x1)]
        peak = 0.0
        while stack:
            p0, p1 = stack.pop()
            hi, ahi, pk = _gl(p0, p1, nodes, weights, a, b, tau, l0)
            lo = _gl(p0, p1, nodes_lo, weights_lo, a, b, tau, l0)[0]
            count += 1
            if count > max_panels:
                return total, -1
            if abs(hi - lo) <= rel_tol * (mass + ahi) or (p1 - p0) < 1e-14 * (1.0 + p1):
                total += hi
                mass += ahi
                peak = max(peak, pk)
            else:
                pm = 0.5 * (p0 + p1)
                # right half pushed first so the left half is summed first
                stack.append((pm, p1))
                stack.append((p0, pm))
        x = x1
        if peak < tail_tol * mass and x >= 3.0 * width:
            return total, count
        if h < hcap:
            h = min(2.0 * h, hcap)


def log_kernel_integrals(a, b, tau, l0, width, h0, hcap, nodes, weights, nodes_lo,
                         weights_lo, rel_tol, tail_tol, max_panels, threads=1):
    """Vector driver: ``log M`` per entry (nan marks failure).

    Returns ``(logm, status)`` where status is 0 on success, 1 for panel
    cap exhaustion and 2 for a nonpositive integral.
    """
    n = a.shape[0]
    logm = np.empty(n)
    status = np.zeros(n, dtype=np.int64)
    for i in range(n):
        m, used = contour_integral(a[i], b[i], tau[i], l0[i], width[i], h0[i], hcap[i],
                                   nodes, weights, nodes_lo, weights_lo, rel_tol, tail_tol,
                                   max_panels)
        if used < 0:
            status[i] = 1
            logm[i] = np.nan
        elif not m > 0.0:
            status[i] = 2
            logm[i] = np.nan
        else:
            logm[i] = np.log(m)
    return logm, status


# ---------------------------------------------------------------------------
# log-domain block-Toeplitz matvec
# ---------------------------------------------------------------------------

def log_block_matvec(logK, g, threads=1, chunk=16):
    """Log-sum-exp product with a block-Toeplitz kernel.

    Parameters
    ----------
    logK : (2 nz - 1, P, P) array
        ``logK[k, p0, p1]`` couples ``(p0, z0)`` with ``(p1, z0 + k - nz + 1)``.
    g : (nz, P) array
        Log input values.

    Returns
    -------
    (nz, P) array with ``out[z0, p0] = log sum exp(logK + g)``.
    """
    logK = np.asarray(logK)
    g = np.asarray(g)
    nz, P = g.shape
    z = np.arange(nz)
    out = np.empty((nz, P))
    kidx = z[None, :] - z[:, None] + nz - 1          # [z0, z1]
    for s in range(0, P, chunk):
        blk = logK[:, s:s + chunk, :]                 # (K, c, P)
        T = blk[kidx] + g[None, :, None, :]           # (z0, z1, c, P)
        m = T.max(axis=(1, 3))
        acc = np.exp(T - m[:, None, :, None]).sum(axis=(1, 3))
        out[:, s:s + chunk] = m + np.log(acc)
    return out


def log_block_max(logK, g, threads=1, chunk=16):
    """Max-plus product with a block-Toeplitz kernel (see ``log_block_matvec``)."""
    logK = np.asarray(logK)
    g = np.asarray(g)
    nz, P = g.shape
    z = np.arange(nz)
    out = np.empty((nz, P))
    kidx = z[None, :] - z[:, None] + nz - 1
    for s in range(0, P, chunk):
        T = logK[:, s:s + chunk, :][kidx] + g[None, :, None, :]
        out[:, s:s + chunk] = T.max(axis=(1, 3))
    return out


def sparse_support(logK, f, g, rthr, cthr, threads=1):
    """CSR support of ``logK + f (+) g`` above a row or a column threshold.

    Node ``(p, z)`` has flat index ``p * nz + z``; columns within a row are
    ordered by ``(p1, z1)``.  Returns ``(indptr, indices, logvals)``.
    """
    logK = np.asarray(logK)
    f, g = np.asarray(f), np.asarray(g)
    nz, P = g.shape
    z = np.arange(nz)
    kidx = z[None, :] - z[:, None] + nz - 1          # [z0, z1]
    counts = np.zeros(nz * P + 1, dtype=np.int64)
    idx_parts, val_parts = [], []
    gT = g.T                                           # (P, nz) as [p1, z1]
    cT = np.asarray(cthr).T
    for p0 in range(P):
        # V[z0, p1, z1]
        V = logK[:, p0, :][kidx].transpose(0, 2, 1) + f[:, p0][:, None, None] + gT[None]
        keep = (V >= np.asarray(rthr)[:, p0][:, None, None]) | (V >= cT[None])
        flat = keep.reshape(nz, -1)
        counts[p0 * nz + 1:(p0 + 1) * nz + 1] = flat.sum(axis=1)
        zi, ci = np.nonzero(flat)
        idx_parts.append(ci.astype(np.int32))
        val_parts.append(V.reshape(nz, -1)[zi, ci])
    return (np.cumsum(counts), np.concatenate(idx_parts), np.concatenate(val_parts))


def dist_sq_block(rho2, zabs, c, threads=1):
    """Squared distances for flat arrays of ``(rho^2, |z|)`` with constant ``c``."""
    from .distance import angle_from_offset, dist_sq_from_angle
    phi = angle_from_offset(rho2, zabs, c)
    return dist_sq_from_angle(phi, rho2, zabs, c)


# ---------------------------------------------------------------------------
# Philox4x32-10 counter-based generator
# ---------------------------------------------------------------------------

_PHILOX_M0 = np.uint64(0xD2511F53)
_PHILOX_M1 = np.uint64(0xCD9E8D57)
_PHILOX_W0 = np.uint32(0x9E3779B9)
_PHILOX_W1 = np.uint32(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)


def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten Philox rounds on uint32 counter words with key ``(k0, k1)``."""
    c0, c1, c2, c3 = (np.asarray(v, dtype=np.uint32) for v in (c0, c1, c2, c3))
    k0 = np.uint32(k0)
    k1 = np.uint32(k1)
    with np.errstate(over="ignore"):
        for r in range(10):
            if r:
                k0 = np.uint32(k0 + _PHILOX_W0)
                k1 = np.uint32(k1 + _PHILOX_W1)
            p0 = c0.astype(np.uint64) * _PHILOX_M0
            p1 = c2.astype(np.uint64) * _PHILOX_M1
            hi0 = (p0 >> _S32).astype(np.uint32)
            lo0 = (p0 & _MASK32).astype(np.uint32)
            hi1 = (p1 >> _S32).astype(np.uint32)
            lo1 = (p1 & _MASK32).astype(np.uint32)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


def _u53(a, b):
    """Uniform in (0, 1) from two uint32 words, 53-bit resolution."""
    return ((a >> np.uint32(5)).astype(np.float64) * 67108864.0
            + (b >> np.uint32(6)).astype(np.float64) + 0.5) / 9007199254740992.0


def philox_uniforms(seed, ids, word2, word3):
    """Two uniforms per id from counter ``(id_lo, id_hi, word2, word3)``."""
    ids = np.asarray(ids, dtype=np.uint64)
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    lo = (ids & _MASK32).astype(np.uint32)
    hi = (ids >> _S32).astype(np.uint32)
    n = ids.shape[0]
    c2 = np.full(n, word2 & 0xFFFFFFFF, dtype=np.uint32)
    c3 = np.full(n, word3 & 0xFFFFFFFF, dtype=np.uint32)
    r0, r1, r2, r3 = philox4x32(lo, hi, c2, c3, seed & 0xFFFFFFFF, seed >> 32)
    return _u53(r0, r1), _u53(r2, r3)


def philox_normals(seed, ids, step, m, threads=1):
    """Standard normals of shape ``(len(ids), m)`` for one time step.

    Counter block ``j`` of particle ``i`` is ``(i_lo, i_hi, step, j)``; each
    block yields two normals by the Box-Muller transform.
    """
    ids = np.asarray(ids, dtype=np.uint64)
    out = np.empty((ids.shape[0], 2 * ((m + 1) // 2)))
    for j in range((m + 1) // 2):
        u1, u2 = philox_uniforms(seed, ids, step, j)
        r = np.sqrt(-2.0 * np.log(u1))
        t = 2.0 * np.pi * u2
        out[:, 2 * j] = r * np.cos(t)
        out[:, 2 * j + 1] = r * np.sin(t)
    return out[:, :m]
