"""Numba kernels for the hash-grid hot paths.

Single fused passes over (points x levels x corners) replace chains of
large numpy temporaries. Parallel loops only ever write rows owned by one
point, and the table scatters run sequentially, so results are
deterministic. The numpy implementations in hashgrid.py remain the
reference; tests assert agreement.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def encode_value(x, res, strides, dense, offsets, primes, mask_bits, table,
                 feat):
    n, d = x.shape
    nl = res.shape[0]
    nf = table.shape[1]
    two_d = 1 << d
    for i in prange(n):
        for l in range(nl):
            cell = np.empty(d, dtype=np.int64)
            frac = np.empty(d, dtype=table.dtype)
            for a in range(d):
                xv = x[i, a]
                if xv < 0.0:
                    xv = 0.0
                elif xv > 1.0:
                    xv = 1.0
                p = xv * res[l, a]
                c = int(p)
                if c > res[l, a] - 1:
                    c = res[l, a] - 1
                cell[a] = c
                frac[a] = p - c
            for corner in range(two_d):
                w = 1.0
                if dense[l]:
                    idx = 0
                    for a in range(d):
                        bit = (corner >> (d - 1 - a)) & 1
                        idx += (cell[a] + bit) * strides[l, a]
                        w *= frac[a] if bit else 1.0 - frac[a]
                else:
                    h = np.uint64(0)
                    for a in range(d):
                        bit = (corner >> (d - 1 - a)) & 1
                        h ^= np.uint64(cell[a] + bit) * primes[a]
                        w *= frac[a] if bit else 1.0 - frac[a]
                    idx = np.int64(h & mask_bits)
                row = idx + offsets[l]
                for fcol in range(nf):
                    feat[i, l * nf + fcol] += w * table[row, fcol]


@njit(parallel=True, cache=True)
def encode_grad(x, res, strides, dense, offsets, primes, mask_bits, table,
                feat, gidx, wout, dwout, tvout):
    n, d = x.shape
    nl = res.shape[0]
    nf = table.shape[1]
    two_d = 1 << d
    for i in prange(n):
        for l in range(nl):
            cell = np.empty(d, dtype=np.int64)
            frac = np.empty(d, dtype=table.dtype)
            for a in range(d):
                xv = x[i, a]
                if xv < 0.0:
                    xv = 0.0
                elif xv > 1.0:
                    xv = 1.0
                p = xv * res[l, a]
                c = int(p)
                if c > res[l, a] - 1:
                    c = res[l, a] - 1
                cell[a] = c
                frac[a] = p - c
            for corner in range(two_d):
                w = 1.0
                if dense[l]:
                    idx = 0
                    for a in range(d):
                        bit = (corner >> (d - 1 - a)) & 1
                        idx += (cell[a] + bit) * strides[l, a]
                        w *= frac[a] if bit else 1.0 - frac[a]
                else:
                    h = np.uint64(0)
                    for a in range(d):
                        bit = (corner >> (d - 1 - a)) & 1
                        h ^= np.uint64(cell[a] + bit) * primes[a]
                        w *= frac[a] if bit else 1.0 - frac[a]
                    idx = np.int64(h & mask_bits)
                row = idx + offsets[l]
                gidx[i, l, corner] = row
                wout[i, l, corner] = w
                for b in range(d):
                    dwb = 1.0
                    for a in range(d):
                        bit = (corner >> (d - 1 - a)) & 1
                        if a == b:
                            dwb *= res[l, a] if bit else -res[l, a]
                        else:
                            dwb *= frac[a] if bit else 1.0 - frac[a]
                    dwout[i, l, corner, b] = dwb
                for fcol in range(nf):
                    tv = table[row, fcol]
                    tvout[i, l, corner, fcol] = tv
                    feat[i, l * nf + fcol] += w * tv


@njit(cache=True)
def scatter_weighted(gidx, w, fb, tgrad):
    n, nl, c = gidx.shape
    nf = fb.shape[2]
    for i in range(n):
        for l in range(nl):
            for corner in range(c):
                row = gidx[i, l, corner]
                wv = w[i, l, corner]
                for fcol in range(nf):
                    tgrad[row, fcol] += wv * fb[i, l, fcol]


@njit(cache=True)
def scatter_second(gidx, r, u, tgrad):
    n, nl, c = gidx.shape
    nf = u.shape[2]
    for i in range(n):
        for l in range(nl):
            for corner in range(c):
                row = gidx[i, l, corner]
                rv = r[i, l, corner]
                for fcol in range(nf):
                    tgrad[row, fcol] += rv * u[i, l, fcol]


@njit(parallel=True, cache=True)
def project_gradient(tv, dw, u, g):
    n, nl, c, nf = tv.shape
    d = dw.shape[3]
    for i in prange(n):
        for l in range(nl):
            for corner in range(c):
                s = 0.0
                for fcol in range(nf):
                    s += tv[i, l, corner, fcol] * u[i, l, fcol]
                for a in range(d):
                    g[i, a] += s * dw[i, l, corner, a]


@njit(parallel=True, cache=True)
def backproject_gradient(tv, dw, gbar, ub, r):
    n, nl, c, nf = tv.shape
    d = dw.shape[3]
    for i in prange(n):
        for l in range(nl):
            for corner in range(c):
                s = 0.0
                for a in range(d):
                    s += dw[i, l, corner, a] * gbar[i, a]
                r[i, l, corner] = s
                for fcol in range(nf):
                    ub[i, l, fcol] += s * tv[i, l, corner, fcol]
