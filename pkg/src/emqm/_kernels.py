"""numba kernels for the bit-level simulator.

Conventions shared with :mod:`emqm.circuit`:

* ``perms[k]`` is one of the 24 permutations of ``range(4)``; the matrix ``Q``
  has ``Q[perm[e], e] = 1``.
* ``m[l, j]`` is the perturbation of brick ``j`` in layer ``l`` (0-based, ``s = l+1``);
  that brick acts on the bond starting at ``x0 = (2j + l % 2) % n``.
* ``a[0..S]`` are full N-bit labels of the forward planes; ``b[f, l]`` is the
  backward plane of flavor ``f`` (order +1, -1, +2, -2) at the output of layer ``l``.
"""

import numpy as np
from numba import njit

OK = 0
ERR_NO_FEASIBLE_E = 1


@njit(cache=True, inline="always")
def _shifts(x0, n):
    return n - 1 - x0, n - 1 - (x0 + 1) % n


@njit(cache=True, inline="always")
def _get_pair(label, hi, lo):
    return (((label >> hi) & 1) << 1) | ((label >> lo) & 1)


@njit(cache=True, inline="always")
def _set_pair(label, hi, lo, pair):
    label &= ~((1 << hi) | (1 << lo))
    return label | (((pair >> 1) & 1) << hi) | ((pair & 1) << lo)


@njit(cache=True)
def shift_tables(n):
    """Bit shifts ``(hi[parity, j], lo[parity, j])`` of every brick."""
    nb = n // 2
    his = np.empty((2, nb), dtype=np.int64)
    los = np.empty((2, nb), dtype=np.int64)
    for off in range(2):
        for j in range(nb):
            his[off, j], los[off, j] = _shifts((2 * j + off) % n, n)
    return his, los


@njit(cache=True)
def layer_maps(n, perm_idx, perms):
    """Forward label maps ``fwd[l, i]`` and their inverses for every layer."""
    S, nb = perm_idx.shape
    N = 1 << n
    fwd = np.empty((S, N), dtype=np.int64)
    inv = np.empty((S, N), dtype=np.int64)
    for l in range(S):
        off = l % 2
        for i in range(N):
            lab = i
            for j in range(nb):
                hi, lo = _shifts((2 * j + off) % n, n)
                c = _get_pair(lab, hi, lo)
                lab = _set_pair(lab, hi, lo, perms[perm_idx[l, j], c])
            fwd[l, i] = lab
            inv[l, lab] = i
    return fwd, inv


@njit(cache=True)
def backprop_phase(b, inv):
    """Relabel every backward plane one layer toward the bulk (old values)."""
    S = b.shape[1]
    for f in range(4):
        for l in range(S - 1):
            b[f, l] = inv[l + 1, b[f, l + 1]]


@njit(cache=True)
def boundary_phase(n, a_S, b, kplus, kminus, gen):
    """Sample the four boundary flavors at the top plane, all conditioned on ``a_S``."""
    S = b.shape[1]
    nb = n // 2
    for f in range(4):
        off = f // 2
        kern = kplus if f % 2 == 0 else kminus
        lab = a_S
        for j in range(nb):
            x0 = (2 * j + off) % n
            hi, lo = _shifts(x0, n)
            c = _get_pair(a_S, hi, lo)
            u = gen.random()
            acc = 0.0
            r = 3
            for rr in range(3):
                acc += kern[x0, rr, c]
                if u < acc:
                    r = rr
                    break
            lab = _set_pair(lab, hi, lo, r)
        b[f, S - 1] = lab


@njit(cache=True)
def forward_phase(n, perm_idx, perms, m, a, gen):
    """Synchronous forward update: plane ``s`` is drawn from the old plane ``s-1``."""
    S, nb = perm_idx.shape
    N = 1 << n
    his, los = shift_tables(n)
    prev = a[0]
    a[0] = int(gen.random() * N)
    for l in range(S):
        off = l & 1
        src = prev
        prev = a[l + 1]
        lab = src
        for j in range(nb):
            hi = his[off, j]
            lo = los[off, j]
            c = _get_pair(src, hi, lo)
            target = perms[perm_idx[l, j], c]
            u = gen.random()
            acc = 0.0
            r = 3
            for rr in range(3):
                acc += m[l, j, rr, c]
                if rr == target:
                    acc += 1.0
                if u < acc:
                    r = rr
                    break
            lab = _set_pair(lab, hi, lo, r)
        a[l + 1] = lab


@njit(cache=True)
def update_phase(n, perm_idx, perms, m, b, delta_m, gen, stats):
    """Rank-1 feedback updates of every brick; returns a status code."""
    S, nb = perm_idx.shape
    his, los = shift_tables(n)
    for l in range(S):
        if b[0, l] == b[1, l] and b[2, l] == b[3, l]:
            continue
        off = l & 1
        for j in range(nb):
            hi = his[off, j]
            lo = los[off, j]
            k_perm = perm_idx[l, j]
            for g in range(2):
                bp = _get_pair(b[2 * g, l], hi, lo)
                bm = _get_pair(b[2 * g + 1, l], hi, lo)
                if bp == bm:
                    continue
                nfeas = 0
                for e in range(4):
                    q = 1.0 if perms[k_perm, e] == bm else 0.0
                    if q + m[l, j, bm, e] >= delta_m:
                        nfeas += 1
                if nfeas == 0:
                    return ERR_NO_FEASIBLE_E
                k = int(gen.random() * nfeas)
                for e in range(4):
                    q = 1.0 if perms[k_perm, e] == bm else 0.0
                    if q + m[l, j, bm, e] >= delta_m:
                        if k == 0:
                            m[l, j, bp, e] += delta_m
                            m[l, j, bm, e] -= delta_m
                            stats[0] += 1
                            break
                        k -= 1
    return OK


@njit(cache=True)
def run_steps(nsteps, n, perm_idx, perms, m, a, b, inv, kplus, kminus, delta_m, gen, stats):
    """Advance the exact model by ``nsteps`` time steps; returns a status code.

    ``kplus[x0]``/``kminus[x0]`` are the 4x4 boundary kernels of bond ``x0``;
    ``stats[0]`` counts applied rank-1 updates.
    """
    S = perm_idx.shape[0]
    for _ in range(nsteps):
        backprop_phase(b, inv)
        boundary_phase(n, a[S], b, kplus, kminus, gen)
        forward_phase(n, perm_idx, perms, m, a, gen)
        status = update_phase(n, perm_idx, perms, m, b, delta_m, gen, stats)
        if status != OK:
            return status
    return OK


@njit(cache=True, inline="always")
def perm_inverse_lookup(perm, r):
    for e in range(4):
        if perm[e] == r:
            return e
    return -1


@njit(cache=True)
def propagate_deviation(n, perm_idx, perms, m):
    """``d = P_S - 1/N`` propagated brick by brick from the uniform input."""
    S, nb = perm_idx.shape
    N = 1 << n
    d = np.zeros(N)
    tmp = np.empty(4)
    invN = 1.0 / N
    for l in range(S):
        off = l % 2
        for j in range(nb):
            hi, lo = _shifts((2 * j + off) % n, n)
            perm = perms[perm_idx[l, j]]
            mb = m[l, j]
            rowsum = mb.sum(axis=1)
            for base in range(N):
                if _get_pair(base, hi, lo) != 0:
                    continue
                for c in range(4):
                    tmp[c] = d[_set_pair(base, hi, lo, c)]
                for r in range(4):
                    acc = rowsum[r] * invN
                    for c in range(4):
                        acc += mb[r, c] * tmp[c]
                    d[_set_pair(base, hi, lo, r)] = acc + tmp[perm_inverse_lookup(perm, r)]
    return d


@njit(cache=True)
def localize_all(beta, fwd, n):
    """Back-propagate an N x N count matrix through every layer and localize it.

    The plane at the output of layer ``l`` carries ``beta_l[i, j] =
    beta_{l+1}[fwd[l+1, i], fwd[l+1, j]]``; returns the ``(S, n/2, 4, 4)`` pair
    marginals of every brick.
    """
    S, N = fwd.shape
    nb = n // 2
    out = np.zeros((S, nb, 4, 4), dtype=np.float64)
    cur = beta.astype(np.float64)
    nxt = np.empty_like(cur)
    pairs = np.empty((nb, N), dtype=np.int64)
    for l in range(S - 1, -1, -1):
        off = l % 2
        for j in range(nb):
            hi, lo = _shifts((2 * j + off) % n, n)
            for i in range(N):
                pairs[j, i] = _get_pair(i, hi, lo)
        for i in range(N):
            for k in range(N):
                v = cur[i, k]
                if v != 0.0:
                    for j in range(nb):
                        out[l, j, pairs[j, i], pairs[j, k]] += v
        if l > 0:
            f = fwd[l]
            for i in range(N):
                fi = f[i]
                for k in range(N):
                    nxt[i, k] = cur[fi, f[k]]
            cur, nxt = nxt, cur
    return out
