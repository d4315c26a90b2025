"""Compiled loops over collision triples ``(species pair, v, v_*, omega)``.

All kernels recompute the collision geometry on the fly instead of storing
per-triple tables; the arithmetic is cheap next to memory traffic.

Array conventions: distributions are ``(nodes, nx)`` with the spatial index
contiguous, so the innermost loop runs over space for a fixed triple.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _star(p0, p1, p2, L, h, N, st, wt, row):
    """Seven-point quadratic star stencil around the node nearest ``p``.

    Exact for ``1, v_d, v_d^2``.  Returns False when ``p`` leaves the box.
    """
    if abs(p0) > L or abs(p1) > L or abs(p2) > L:
        return False
    r0 = (p0 + L) / h - 0.5
    r1 = (p1 + L) / h - 0.5
    r2 = (p2 + L) / h - 0.5
    c0 = min(max(int(np.floor(r0 + 0.5)), 1), N - 2)
    c1 = min(max(int(np.floor(r1 + 0.5)), 1), N - 2)
    c2 = min(max(int(np.floor(r2 + 0.5)), 1), N - 2)
    d0 = r0 - c0
    d1 = r1 - c1
    d2 = r2 - c2
    base = (c0 * N + c1) * N + c2
    st[row, 0] = base
    wt[row, 0] = 1.0 - d0 * d0 - d1 * d1 - d2 * d2
    st[row, 1] = base + N * N
    wt[row, 1] = 0.5 * (d0 * d0 + d0)
    st[row, 2] = base - N * N
    wt[row, 2] = 0.5 * (d0 * d0 - d0)
    st[row, 3] = base + N
    wt[row, 3] = 0.5 * (d1 * d1 + d1)
    st[row, 4] = base - N
    wt[row, 4] = 0.5 * (d1 * d1 - d1)
    st[row, 5] = base + 1
    wt[row, 5] = 0.5 * (d2 * d2 + d2)
    st[row, 6] = base - 1
    wt[row, 6] = 0.5 * (d2 * d2 - d2)
    return True


@njit(cache=True, inline="always")
def _lagrange_1d(r, N, order, idx, wt, row):
    """``order``-point Lagrange weights at fractional midpoint index ``r``."""
    if order == 2:
        i0 = min(max(int(np.floor(r)), 0), N - 2)
    else:
        i0 = min(max(int(np.floor(r + 0.5)) - 1, 0), N - 3)
    for a in range(order):
        w = 1.0
        for b in range(order):
            if b != a:
                w *= (r - (i0 + b)) / (a - b)
        idx[row, a] = i0 + a
        wt[row, a] = w


@njit(cache=True, inline="always")
def _tensor_interp(F, p0, p1, p2, L, h, N, order, idx, wt):
    """Tensor Lagrange interpolation (trilinear or triquadratic); NaN outside the box."""
    if abs(p0) > L or abs(p1) > L or abs(p2) > L:
        return np.nan
    _lagrange_1d((p0 + L) / h - 0.5, N, order, idx, wt, 0)
    _lagrange_1d((p1 + L) / h - 0.5, N, order, idx, wt, 1)
    _lagrange_1d((p2 + L) / h - 0.5, N, order, idx, wt, 2)
    val = 0.0
    for a in range(order):
        for b in range(order):
            base = (idx[0, a] * N + idx[1, b]) * N
            wab = wt[0, a] * wt[1, b]
            for c in range(order):
                val += wab * wt[2, c] * F[base + idx[2, c]]
    return val


@njit(cache=True)
def _pair_list(unordered):
    if unordered:
        return np.array([[0, 0], [0, 1], [1, 1]]), np.array([2.0, 2.0, 2.0])
    return np.array([[0, 0], [0, 1], [1, 0], [1, 1]]), np.ones(4)


@njit(cache=True)
def weak_collision(FA, FB, first, first_mult, rep_of, N, L, h, masses, table,
                   gamma, bpow, dirs, dirw, unordered, floor, outA, outB):
    """Accumulate the conservative entropic collision operator.

    ``outA``/``outB`` receive ``w_q * C(F)_q`` on stored nodes; divide by the
    stored quadrature weights afterwards.  ``table[a, b]`` holds the kernel
    constant times the geometric cross-section.
    """
    nx = FA.shape[1]
    nfull = N * N * N
    logA = np.log(np.maximum(FA, floor))
    logB = np.log(np.maximum(FB, floor))
    w = h * h * h
    pairs, pfac = _pair_list(unordered)
    st = np.empty((2, 7), np.int64)
    wt = np.empty((2, 7))
    sr = np.empty((2, 7), np.int64)
    for p in range(pairs.shape[0]):
        al = pairs[p, 0]
        be = pairs[p, 1]
        ma = masses[al]
        mb = masses[be]
        ca = 2.0 * mb / (ma + mb)
        cb = 2.0 * ma / (ma + mb)
        Fa = FA if al == 0 else FB
        Fb = FA if be == 0 else FB
        La = logA if al == 0 else logB
        Lb = logA if be == 0 else logB
        oa = outA if al == 0 else outB
        ob = outA if be == 0 else outB
        for ii in range(first.shape[0]):
            i = first[ii]
            ir = rep_of[i]
            i0 = i // (N * N)
            i1 = (i // N) % N
            i2 = i % N
            vi0 = -L + (i0 + 0.5) * h
            vi1 = -L + (i1 + 0.5) * h
            vi2 = -L + (i2 + 0.5) * h
            jstart = i + 1 if (unordered and al == be) else 0
            for j in range(jstart, nfull):
                if j == i:
                    continue
                jr = rep_of[j]
                vj0 = -L + (j // (N * N) + 0.5) * h
                vj1 = -L + ((j // N) % N + 0.5) * h
                vj2 = -L + (j % N + 0.5) * h
                g0 = vi0 - vj0
                g1 = vi1 - vj1
                g2 = vi2 - vj2
                gn = np.sqrt(g0 * g0 + g1 * g1 + g2 * g2)
                ggam = gn**gamma
                for k in range(dirs.shape[0]):
                    o0 = dirs[k, 0]
                    o1 = dirs[k, 1]
                    o2 = dirs[k, 2]
                    a = g0 * o0 + g1 * o1 + g2 * o2
                    if a == 0.0:
                        continue
                    B = table[al, be] * ggam * (abs(a) / gn) ** bpow
                    coef = 0.5 * pfac[p] * first_mult[ii] * w * w * dirw[k] * B
                    if not _star(vi0 - ca * a * o0, vi1 - ca * a * o1, vi2 - ca * a * o2, L, h, N, st, wt, 0):
                        continue
                    if not _star(vj0 + cb * a * o0, vj1 + cb * a * o1, vj2 + cb * a * o2, L, h, N, st, wt, 1):
                        continue
                    for s in range(7):
                        sr[0, s] = rep_of[st[0, s]]
                        sr[1, s] = rep_of[st[1, s]]
                    for x in range(nx):
                        lg = 0.0
                        for s in range(7):
                            lg += wt[0, s] * La[sr[0, s], x] + wt[1, s] * Lb[sr[1, s], x]
                        val = coef * (np.exp(lg) - Fa[ir, x] * Fb[jr, x])
                        for s in range(7):
                            oa[sr[0, s], x] -= val * wt[0, s]
                            ob[sr[1, s], x] -= val * wt[1, s]
                        oa[ir, x] += val
                        ob[jr, x] += val


@njit(cache=True)
def assemble_linear(muA, muB, first, first_mult, rep_of, N, L, h, masses, table,
                    gamma, bpow, dirs, dirw, unordered, Q):
    """Quadratic form of the linearised entropic operator.

    On return ``g^T Q h = <L g, h>`` in the quadrature inner product, with
    stacked unknowns ``(g_A, g_B)``.
    """
    K = muA.shape[0]
    nfull = N * N * N
    w = h * h * h
    pairs, pfac = _pair_list(unordered)
    st = np.empty((2, 7), np.int64)
    wt = np.empty((2, 7))
    idx = np.empty(16, np.int64)
    val = np.empty(16)
    isqA = 1.0 / np.sqrt(muA)
    isqB = 1.0 / np.sqrt(muB)
    for p in range(pairs.shape[0]):
        al = pairs[p, 0]
        be = pairs[p, 1]
        ma = masses[al]
        mb = masses[be]
        ca = 2.0 * mb / (ma + mb)
        cb = 2.0 * ma / (ma + mb)
        mua = muA if al == 0 else muB
        mub = muA if be == 0 else muB
        isa = isqA if al == 0 else isqB
        isb = isqA if be == 0 else isqB
        offa = 0 if al == 0 else K
        offb = 0 if be == 0 else K
        for ii in range(first.shape[0]):
            i = first[ii]
            ir = rep_of[i]
            vi0 = -L + (i // (N * N) + 0.5) * h
            vi1 = -L + ((i // N) % N + 0.5) * h
            vi2 = -L + (i % N + 0.5) * h
            jstart = i + 1 if (unordered and al == be) else 0
            for j in range(jstart, nfull):
                if j == i:
                    continue
                jr = rep_of[j]
                vj0 = -L + (j // (N * N) + 0.5) * h
                vj1 = -L + ((j // N) % N + 0.5) * h
                vj2 = -L + (j % N + 0.5) * h
                g0 = vi0 - vj0
                g1 = vi1 - vj1
                g2 = vi2 - vj2
                gn = np.sqrt(g0 * g0 + g1 * g1 + g2 * g2)
                ggam = gn**gamma
                pp = mua[ir] * mub[jr]
                for k in range(dirs.shape[0]):
                    o0 = dirs[k, 0]
                    o1 = dirs[k, 1]
                    o2 = dirs[k, 2]
                    a = g0 * o0 + g1 * o1 + g2 * o2
                    if a == 0.0:
                        continue
                    B = table[al, be] * ggam * (abs(a) / gn) ** bpow
                    coef = 0.5 * pfac[p] * first_mult[ii] * w * w * dirw[k] * B * pp
                    if not _star(vi0 - ca * a * o0, vi1 - ca * a * o1, vi2 - ca * a * o2, L, h, N, st, wt, 0):
                        continue
                    if not _star(vj0 + cb * a * o0, vj1 + cb * a * o1, vj2 + cb * a * o2, L, h, N, st, wt, 1):
                        continue
                    for s in range(7):
                        r = rep_of[st[0, s]]
                        idx[s] = offa + r
                        val[s] = wt[0, s] * isa[r]
                        r = rep_of[st[1, s]]
                        idx[7 + s] = offb + r
                        val[7 + s] = wt[1, s] * isb[r]
                    idx[14] = offa + ir
                    val[14] = -isa[ir]
                    idx[15] = offb + jr
                    val[15] = -isb[jr]
                    for s in range(16):
                        cs = coef * val[s]
                        r = idx[s]
                        for q in range(16):
                            Q[r, idx[q]] += cs * val[q]


@njit(cache=True)
def strong_collision(Fa, Fb, ma, mb, N, L, h, constant, gamma, bpow, dirs, dirw, order, out):
    """Pointwise ``Q^{ab}(F_a, F_b)`` with tensor Lagrange gain interpolation.

    ``Fa``/``Fb`` live on every Cartesian node; ``dirs`` holds one direction
    of each antipodal pair and ``dirw`` the single-node sphere weights.
    Triples whose post-collision velocities leave the box are dropped.
    """
    nfull = N * N * N
    w = h * h * h
    ca = 2.0 * mb / (ma + mb)
    cb = 2.0 * ma / (ma + mb)
    idx = np.empty((3, 3), np.int64)
    wt = np.empty((3, 3))
    for i in range(nfull):
        vi0 = -L + (i // (N * N) + 0.5) * h
        vi1 = -L + ((i // N) % N + 0.5) * h
        vi2 = -L + (i % N + 0.5) * h
        acc = 0.0
        for j in range(nfull):
            if j == i:
                continue
            vj0 = -L + (j // (N * N) + 0.5) * h
            vj1 = -L + ((j // N) % N + 0.5) * h
            vj2 = -L + (j % N + 0.5) * h
            g0 = vi0 - vj0
            g1 = vi1 - vj1
            g2 = vi2 - vj2
            gn = np.sqrt(g0 * g0 + g1 * g1 + g2 * g2)
            ggam = gn**gamma
            loss = Fa[i] * Fb[j]
            for k in range(dirs.shape[0]):
                o0 = dirs[k, 0]
                o1 = dirs[k, 1]
                o2 = dirs[k, 2]
                a = g0 * o0 + g1 * o1 + g2 * o2
                if a == 0.0:
                    continue
                fa = _tensor_interp(Fa, vi0 - ca * a * o0, vi1 - ca * a * o1, vi2 - ca * a * o2, L, h, N, order, idx, wt)
                if np.isnan(fa):
                    continue
                fb = _tensor_interp(Fb, vj0 + cb * a * o0, vj1 + cb * a * o1, vj2 + cb * a * o2, L, h, N, order, idx, wt)
                if np.isnan(fb):
                    continue
                B = constant * ggam * (abs(a) / gn) ** bpow
                acc += 2.0 * w * dirw[k] * B * (fa * fb - loss)
        out[i] = acc


@njit(cache=True)
def loss_frequency(mub, pts, N, L, h, constant, gamma, bpow, dirs, dirw, out):
    """``sum_j w mu_b(v_j) sum_k a_k B(v - v_j, omega_k)`` at points ``pts``.

    ``mub`` lives on every Cartesian node; coincident nodes are skipped.
    """
    nfull = N * N * N
    w = h * h * h
    for q in range(pts.shape[0]):
        acc = 0.0
        for j in range(nfull):
            g0 = pts[q, 0] - (-L + (j // (N * N) + 0.5) * h)
            g1 = pts[q, 1] - (-L + ((j // N) % N + 0.5) * h)
            g2 = pts[q, 2] - (-L + (j % N + 0.5) * h)
            gn = np.sqrt(g0 * g0 + g1 * g1 + g2 * g2)
            if gn == 0.0:
                continue
            ang = 0.0
            for k in range(dirs.shape[0]):
                a = abs(g0 * dirs[k, 0] + g1 * dirs[k, 1] + g2 * dirs[k, 2]) / gn
                ang += dirw[k] * a**bpow
            acc += w * mub[j] * gn**gamma * ang
        out[q] = constant * acc
