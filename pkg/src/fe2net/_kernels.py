"""Compiled dynamic-relaxation kernel over a packed batch of RVEs.

Every RVE owns the node range ``node_off[r]:node_off[r+1]`` (free nodes
first) and the fiber range ``fib_off[r]:fib_off[r+1]``; fiber connectivity is
local to the RVE. One RVE is advanced start to finish by a single thread, so
results do not depend on the thread count or on which other RVEs share the
batch. The kernels release the GIL, so Python threads calling
:func:`relax_range` on disjoint RVE ranges run truly in parallel.
"""

import numpy as np
from numba import njit

CONVERGED = 0
MAX_ITER = 1
NON_FINITE = 2
COLLAPSE = 3


@njit(cache=True)
def _law(kind, B, buckling, s):
    # returns (g, energy density) for stretch - 1 = s
    if buckling and s < 0.0:
        return 0.0, 0.0
    if kind == 0:
        return s, 0.5 * s * s
    e = np.expm1(B * s) / B
    return e, (e - s) / B


@njit(cache=True)
def _forces(X, u, fib, EA, L0, kind, B, buckling, f, n0, n1, e0, e1):
    """Scatter fiber forces into ``f[n0:n1]``; returns (strain energy, ok)."""
    for i in range(n0, n1):
        f[i, 0] = 0.0
        f[i, 1] = 0.0
        f[i, 2] = 0.0
    W = 0.0
    for e in range(e0, e1):
        i = n0 + fib[e, 0]
        j = n0 + fib[e, 1]
        d0 = X[j, 0] + u[j, 0] - X[i, 0] - u[i, 0]
        d1 = X[j, 1] + u[j, 1] - X[i, 1] - u[i, 1]
        d2 = X[j, 2] + u[j, 2] - X[i, 2] - u[i, 2]
        ell = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
        if not ell > 1e-8 * L0[e]:
            return W, False
        g, w = _law(kind, B, buckling, ell / L0[e] - 1.0)
        W += EA[e] * L0[e] * w
        q = EA[e] * g / ell
        f[j, 0] += q * d0
        f[j, 1] += q * d1
        f[j, 2] += q * d2
        f[i, 0] -= q * d0
        f[i, 1] -= q * d1
        f[i, 2] -= q * d2
    return W, True


@njit(cache=True)
def _norms(f, n0, nf, n1):
    rf = 0.0
    for i in range(n0, nf):
        for k in range(3):
            rf += f[i, k] * f[i, k]
    rr = 0.0
    for i in range(nf, n1):
        for k in range(3):
            rr += f[i, k] * f[i, k]
    return np.sqrt(rf), np.sqrt(rr)


@njit(cache=True)
def _relax_one(r, X, u, v, a, f, fd, m, node_off, nfree, fib, fib_off, EA, L0,
               kind, B, buckling, dt, c, tol, floor, noise, n_max, energy_check,
               iters, resid, eps_out, kin_frac, status, energy_err, trace):
    n0 = node_off[r]
    n1 = node_off[r + 1]
    nf = n0 + nfree[r]
    e0 = fib_off[r]
    e1 = fib_off[r + 1]
    h = dt[r]
    cr = c[r]
    half = 0.5 * h

    W, ok = _forces(X, u, fib, EA, L0, kind[r], B[r], buckling[r], f, n0, n1, e0, e1)
    if not ok:
        status[r] = COLLAPSE
        iters[r] = 0
        return
    R, react = _norms(f, n0, nf, n1)
    eps = max(tol[r] * max(react, floor[r]), noise[r])
    KE = 0.0
    for i in range(n0, nf):
        for k in range(3):
            fd[i, k] = cr * m[i] * v[i, k]
            a[i, k] = -(f[i, k] + fd[i, k]) / m[i]
            KE += 0.5 * m[i] * v[i, k] * v[i, k]
    for i in range(nf, n1):
        for k in range(3):
            v[i, k] = 0.0
            a[i, k] = 0.0
            fd[i, k] = 0.0
    ntr = trace.shape[1]
    E0 = W + KE
    peak = abs(E0)
    dissipated = 0.0
    worst = 0.0
    if energy_check and ntr > 0:
        trace[r, 0] = E0
    n = 0
    while R > eps and n < n_max[r]:
        # half-step velocity and displacement update on free DOFs
        for i in range(n0, nf):
            for k in range(3):
                v[i, k] += half * a[i, k]
                u[i, k] += h * v[i, k]
        W, ok = _forces(X, u, fib, EA, L0, kind[r], B[r], buckling[r], f, n0, n1, e0, e1)
        if not ok:
            status[r] = COLLAPSE
            iters[r] = n + 1
            return
        R, react = _norms(f, n0, nf, n1)
        eps = max(tol[r] * max(react, floor[r]), noise[r])
        KE = 0.0
        vv = 0.0
        for i in range(n0, nf):
            for k in range(3):
                fd[i, k] = cr * m[i] * v[i, k]
                vv += m[i] * v[i, k] * v[i, k]
                a[i, k] = -(f[i, k] + fd[i, k]) / m[i]
                v[i, k] += half * a[i, k]
                KE += 0.5 * m[i] * v[i, k] * v[i, k]
        n += 1
        if not np.isfinite(R) or not np.isfinite(KE):
            status[r] = NON_FINITE
            iters[r] = n
            resid[r] = R
            return
        if energy_check:
            dissipated += cr * vv * h
            bal = W + KE + dissipated
            peak = max(peak, abs(W + KE))
            worst = max(worst, abs(bal - E0))
            if n < ntr:
                trace[r, n] = W + KE + dissipated
    iters[r] = n
    resid[r] = R
    eps_out[r] = eps
    tot = KE + W
    kin_frac[r] = KE / tot if tot > 0.0 else 0.0
    energy_err[r] = worst / peak if peak > 0.0 else 0.0
    status[r] = CONVERGED if R <= eps else MAX_ITER


@njit(nogil=True, cache=True)
def relax_range(r0, r1, X, u, v, a, f, fd, m, node_off, nfree, fib, fib_off, EA, L0,
                kind, B, buckling, dt, c, tol, floor, noise, n_max, energy_check,
                iters, resid, eps_out, kin_frac, status, energy_err, trace):
    """Relax RVEs ``r0 <= r < r1`` of the packed batch in place."""
    for r in range(r0, r1):
        _relax_one(r, X, u, v, a, f, fd, m, node_off, nfree, fib, fib_off, EA, L0,
                   kind, B, buckling, dt, c, tol, floor, noise, n_max, energy_check,
                   iters, resid, eps_out, kin_frac, status, energy_err, trace)
