"""Jit-compiled Q-network kernels.

Same contract and parameter order as numpy_backend, written loop-style so
numba can compile it: per-sample outer loop, per-head 2-D matmuls, hand
softmax. No fastmath and no threading, so results stay bit-stable and
match the reference backend to float64 roundoff.

Importing this module compiles both kernels on a tiny warmup problem;
with cache=True later imports reuse the on-disk cache.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _softmax_rows(S):
    M, N = S.shape
    A = np.empty_like(S)
    for i in range(M):
        mx = S[i, 0]
        for j in range(1, N):
            if S[i, j] > mx:
                mx = S[i, j]
        tot = 0.0
        for j in range(N):
            e = np.exp(S[i, j] - mx)
            A[i, j] = e
            tot += e
        inv = 1.0 / tot
        for j in range(N):
            A[i, j] *= inv
    return A


@njit(cache=True)
def qvalues_batch(F, theta, offs, embed, heads, blocks, hidden):
    B, M, fdim = F.shape
    d = embed // heads
    scale = 1.0 / np.sqrt(d)
    dbase = 4 + 8 * blocks
    actions = int(offs[dbase + 4] - offs[dbase + 3])

    W1 = theta[offs[0]:offs[1]].reshape(fdim, embed)
    b1 = theta[offs[1]:offs[2]]
    W2 = theta[offs[2]:offs[3]].reshape(embed, embed)
    b2 = theta[offs[3]:offs[4]]
    dw1 = theta[offs[dbase]:offs[dbase + 1]].reshape(embed, hidden)
    db1 = theta[offs[dbase + 1]:offs[dbase + 2]]
    aw = theta[offs[dbase + 2]:offs[dbase + 3]].reshape(hidden, actions)
    ab = theta[offs[dbase + 3]:offs[dbase + 4]]

    out = np.empty((B, actions))
    for b in range(B):
        X = np.maximum(np.dot(F[b], W1) + b1, 0.0)
        X = np.maximum(np.dot(X, W2) + b2, 0.0)
        for k in range(blocks):
            base = 4 + 8 * k
            wq = theta[offs[base]:offs[base + 1]].reshape(embed, embed)
            bq = theta[offs[base + 1]:offs[base + 2]]
            wk = theta[offs[base + 2]:offs[base + 3]].reshape(embed, embed)
            bk = theta[offs[base + 3]:offs[base + 4]]
            wv = theta[offs[base + 4]:offs[base + 5]].reshape(embed, embed)
            bv = theta[offs[base + 5]:offs[base + 6]]
            wo = theta[offs[base + 6]:offs[base + 7]].reshape(embed, embed)
            bo = theta[offs[base + 7]:offs[base + 8]]
            Q = np.dot(X, wq) + bq
            K = np.dot(X, wk) + bk
            V = np.dot(X, wv) + bv
            O = np.empty((M, embed))
            for h in range(heads):
                lo, hi = h * d, (h + 1) * d
                Qh = np.ascontiguousarray(Q[:, lo:hi])
                Kh = np.ascontiguousarray(K[:, lo:hi])
                Vh = np.ascontiguousarray(V[:, lo:hi])
                A = _softmax_rows(np.dot(Qh, Kh.T) * scale)
                O[:, lo:hi] = np.dot(A, Vh)
            X = X + np.dot(O, wo) + bo
        pooled = np.sum(X, axis=0)
        Hd = np.maximum(np.dot(pooled, dw1) + db1, 0.0)
        out[b] = np.dot(Hd, aw) + ab
    return out


@njit(cache=True)
def grad_batch(F, dQ, theta, offs, embed, heads, blocks, hidden):
    B, M, fdim = F.shape
    d = embed // heads
    scale = 1.0 / np.sqrt(d)
    dbase = 4 + 8 * blocks
    actions = int(offs[dbase + 4] - offs[dbase + 3])

    W1 = theta[offs[0]:offs[1]].reshape(fdim, embed)
    b1 = theta[offs[1]:offs[2]]
    W2 = theta[offs[2]:offs[3]].reshape(embed, embed)
    b2 = theta[offs[3]:offs[4]]
    dw1 = theta[offs[dbase]:offs[dbase + 1]].reshape(embed, hidden)
    db1 = theta[offs[dbase + 1]:offs[dbase + 2]]
    aw = theta[offs[dbase + 2]:offs[dbase + 3]].reshape(hidden, actions)

    g = np.zeros_like(theta)
    gW1 = g[offs[0]:offs[1]].reshape(fdim, embed)
    gb1 = g[offs[1]:offs[2]]
    gW2 = g[offs[2]:offs[3]].reshape(embed, embed)
    gb2 = g[offs[3]:offs[4]]
    gdw1 = g[offs[dbase]:offs[dbase + 1]].reshape(embed, hidden)
    gdb1 = g[offs[dbase + 1]:offs[dbase + 2]]
    gaw = g[offs[dbase + 2]:offs[dbase + 3]].reshape(hidden, actions)
    gab = g[offs[dbase + 3]:offs[dbase + 4]]

    # per-sample activation caches, refilled each outer iteration
    Xs = np.empty((blocks + 1, M, embed))
    Qc = np.empty((blocks, M, embed))
    Kc = np.empty((blocks, M, embed))
    Vc = np.empty((blocks, M, embed))
    Ac = np.empty((blocks, heads, M, M))
    Oc = np.empty((blocks, M, embed))

    for b in range(B):
        Fb = F[b]
        X1 = np.maximum(np.dot(Fb, W1) + b1, 0.0)
        X2 = np.maximum(np.dot(X1, W2) + b2, 0.0)
        Xs[0] = X2
        for k in range(blocks):
            base = 4 + 8 * k
            wq = theta[offs[base]:offs[base + 1]].reshape(embed, embed)
            bq = theta[offs[base + 1]:offs[base + 2]]
            wk = theta[offs[base + 2]:offs[base + 3]].reshape(embed, embed)
            bk = theta[offs[base + 3]:offs[base + 4]]
            wv = theta[offs[base + 4]:offs[base + 5]].reshape(embed, embed)
            bv = theta[offs[base + 5]:offs[base + 6]]
            wo = theta[offs[base + 6]:offs[base + 7]].reshape(embed, embed)
            bo = theta[offs[base + 7]:offs[base + 8]]
            X = Xs[k]
            Qc[k] = np.dot(X, wq) + bq
            Kc[k] = np.dot(X, wk) + bk
            Vc[k] = np.dot(X, wv) + bv
            for h in range(heads):
                lo, hi = h * d, (h + 1) * d
                Qh = np.ascontiguousarray(Qc[k][:, lo:hi])
                Kh = np.ascontiguousarray(Kc[k][:, lo:hi])
                Vh = np.ascontiguousarray(Vc[k][:, lo:hi])
                A = _softmax_rows(np.dot(Qh, Kh.T) * scale)
                Ac[k, h] = A
                Oc[k][:, lo:hi] = np.dot(A, Vh)
            Xs[k + 1] = X + np.dot(Oc[k], wo) + bo
        pooled = np.sum(Xs[blocks], axis=0)
        Hd = np.maximum(np.dot(pooled, dw1) + db1, 0.0)

        dq = dQ[b]
        gab += dq
        gaw += np.outer(Hd, dq)
        dZd = np.where(Hd > 0, np.dot(aw, dq), 0.0)
        gdb1 += dZd
        gdw1 += np.outer(pooled, dZd)
        dpooled = np.dot(dw1, dZd)
        dX = np.empty((M, embed))
        for i in range(M):
            dX[i] = dpooled

        for k in range(blocks - 1, -1, -1):
            base = 4 + 8 * k
            wq = theta[offs[base]:offs[base + 1]].reshape(embed, embed)
            wk = theta[offs[base + 2]:offs[base + 3]].reshape(embed, embed)
            wv = theta[offs[base + 4]:offs[base + 5]].reshape(embed, embed)
            wo = theta[offs[base + 6]:offs[base + 7]].reshape(embed, embed)
            Xin = Xs[k]
            dP = dX
            gwo = g[offs[base + 6]:offs[base + 7]].reshape(embed, embed)
            gbo = g[offs[base + 7]:offs[base + 8]]
            gwo += np.dot(np.ascontiguousarray(Oc[k].T), dP)
            gbo += np.sum(dP, axis=0)
            dO = np.dot(dP, np.ascontiguousarray(wo.T))
            dQm = np.empty((M, embed))
            dKm = np.empty((M, embed))
            dVm = np.empty((M, embed))
            for h in range(heads):
                lo, hi = h * d, (h + 1) * d
                dOh = np.ascontiguousarray(dO[:, lo:hi])
                Qh = np.ascontiguousarray(Qc[k][:, lo:hi])
                Kh = np.ascontiguousarray(Kc[k][:, lo:hi])
                Vh = np.ascontiguousarray(Vc[k][:, lo:hi])
                A = np.ascontiguousarray(Ac[k, h])
                dA = np.dot(dOh, Vh.T)
                dVh = np.dot(A.T, dOh)
                dS = np.empty((M, M))
                for i in range(M):
                    s = 0.0
                    for j in range(M):
                        s += dA[i, j] * A[i, j]
                    for j in range(M):
                        dS[i, j] = A[i, j] * (dA[i, j] - s) * scale
                dQm[:, lo:hi] = np.dot(dS, Kh)
                dKm[:, lo:hi] = np.dot(np.ascontiguousarray(dS.T), Qh)
                dVm[:, lo:hi] = dVh
            XinT = np.ascontiguousarray(Xin.T)
            gwq = g[offs[base]:offs[base + 1]].reshape(embed, embed)
            gbq = g[offs[base + 1]:offs[base + 2]]
            gwk = g[offs[base + 2]:offs[base + 3]].reshape(embed, embed)
            gbk = g[offs[base + 3]:offs[base + 4]]
            gwv = g[offs[base + 4]:offs[base + 5]].reshape(embed, embed)
            gbv = g[offs[base + 5]:offs[base + 6]]
            gwq += np.dot(XinT, dQm)
            gbq += np.sum(dQm, axis=0)
            gwk += np.dot(XinT, dKm)
            gbk += np.sum(dKm, axis=0)
            gwv += np.dot(XinT, dVm)
            gbv += np.sum(dVm, axis=0)
            dX = (
                dP
                + np.dot(dQm, np.ascontiguousarray(wq.T))
                + np.dot(dKm, np.ascontiguousarray(wk.T))
                + np.dot(dVm, np.ascontiguousarray(wv.T))
            )

        dZ2 = np.where(X2 > 0, dX, 0.0)
        gW2 += np.dot(np.ascontiguousarray(X1.T), dZ2)
        gb2 += np.sum(dZ2, axis=0)
        dZ1 = np.where(X1 > 0, np.dot(dZ2, np.ascontiguousarray(W2.T)), 0.0)
        gW1 += np.dot(np.ascontiguousarray(Fb.T), dZ1)
        gb1 += np.sum(dZ1, axis=0)
    return g


def _warmup():
    # compile both kernels on a toy problem so a broken install fails at
    # import, where the dispatcher can still fall back
    shapes = [(6, 2), (2,), (2, 2), (2,)]
    for _ in range(1):
        for nm in range(8):
            shapes.append((2, 2) if nm % 2 == 0 else (2,))
    shapes += [(2, 3), (3,), (3, 12), (12,)]
    sizes = [int(np.prod(np.array(s))) for s in shapes]
    offs = np.zeros(len(sizes) + 1, dtype=np.int64)
    offs[1:] = np.cumsum(np.array(sizes))
    theta = np.linspace(-0.1, 0.1, offs[-1])
    F = np.ones((1, 2, 6))
    q = qvalues_batch(F, theta, offs, 2, 1, 1, 3)
    grad_batch(F, np.ones_like(q), theta, offs, 2, 1, 1, 3)


_warmup()
