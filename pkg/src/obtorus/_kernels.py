"""Compiled inner loop of the Taylor evaluator."""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def taylor_contract(stack, lam, nval, ngrad, flat, r, val, gval, block=512):
    """Sum D^l f(node) r^l / l! over the first ``nval`` graded rows of ``stack``.

    stack is (rows, C, N) with nodal derivative fields, lam the multi-index
    of each row, flat the node index per point and r (3, M) the offsets.
    If ngrad > 0 the gradient is accumulated into gval (C, 3, M) from rows
    below ngrad, using d/dr_j r^l / l! = r^(l - e_j) / (l - e_j)!.
    """
    C = stack.shape[1]
    M = flat.shape[0]
    rows = max(nval, ngrad)
    top = 0
    for l in range(rows):
        s = lam[l, 0] + lam[l, 1] + lam[l, 2]
        if s > top:
            top = s
    pw = np.empty((3, top + 1, block))
    coef = np.empty(block)
    src = np.empty((C, block))
    acc = np.empty((C, block))
    gacc = np.empty((C, 3, block))
    identity = True
    for n in range(M):
        if flat[n] != n:
            identity = False
            break
    for lo in range(0, M, block):
        m = min(block, M - lo)
        for ax in range(3):
            for n in range(m):
                pw[ax, 0, n] = 1.0
            for a in range(1, top + 1):
                for n in range(m):
                    pw[ax, a, n] = pw[ax, a - 1, n] * r[ax, lo + n] / a
        acc[:] = 0.0
        gacc[:] = 0.0
        for l in range(rows):
            if identity:
                for ci in range(C):
                    for n in range(m):
                        src[ci, n] = stack[l, ci, lo + n]
            else:
                for ci in range(C):
                    for n in range(m):
                        src[ci, n] = stack[l, ci, flat[lo + n]]
            a = lam[l, 0]
            b = lam[l, 1]
            c = lam[l, 2]
            if l < nval:
                for n in range(m):
                    coef[n] = pw[0, a, n] * pw[1, b, n] * pw[2, c, n]
                for ci in range(C):
                    for n in range(m):
                        acc[ci, n] += coef[n] * src[ci, n]
            if l < ngrad:
                for j in range(3):
                    e0 = a - 1 if j == 0 else a
                    e1 = b - 1 if j == 1 else b
                    e2 = c - 1 if j == 2 else c
                    if e0 < 0 or e1 < 0 or e2 < 0:
                        continue
                    for n in range(m):
                        coef[n] = pw[0, e0, n] * pw[1, e1, n] * pw[2, e2, n]
                    for ci in range(C):
                        for n in range(m):
                            gacc[ci, j, n] += coef[n] * src[ci, n]
        for ci in range(C):
            for n in range(m):
                val[ci, lo + n] = acc[ci, n]
            if ngrad > 0:
                for j in range(3):
                    for n in range(m):
                        gval[ci, j, lo + n] = gacc[ci, j, n]
