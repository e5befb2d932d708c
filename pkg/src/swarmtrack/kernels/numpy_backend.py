"""Reference numpy implementation of the Q-network kernels.

Batched over sets that share one cardinality M: inputs are (B, M, 6)
feature stacks and a flat float64 parameter vector sliced by a cumulative
offsets array. The jit backend must agree with this one to float64
roundoff; tests pin the two together.

Parameter order inside the flat vector (offsets index in brackets):
[0..3]   psi_w1, psi_b1, psi_w2, psi_b2
[4+8k..] per block k: wq, bq, wk, bk, wv, bv, wo, bo
[last 4] dec_w1, dec_b1, dec_w2, dec_b2
"""

from __future__ import annotations

import math

import numpy as np


def qvalues_batch(F, theta, offs, embed, heads, blocks, hidden):
    """Q-values for a batch of same-cardinality sets, shape (B, n_actions)."""
    B, M, fdim = F.shape
    d = embed // heads
    scale = 1.0 / math.sqrt(d)
    dbase = 4 + 8 * blocks
    actions = int(offs[dbase + 4] - offs[dbase + 3])

    def v(i, shape):
        return theta[offs[i]:offs[i + 1]].reshape(shape)

    X = np.maximum(F @ v(0, (fdim, embed)) + v(1, (embed,)), 0.0)
    X = np.maximum(X @ v(2, (embed, embed)) + v(3, (embed,)), 0.0)
    for k in range(blocks):
        base = 4 + 8 * k
        wq, bq = v(base, (embed, embed)), v(base + 1, (embed,))
        wk, bk = v(base + 2, (embed, embed)), v(base + 3, (embed,))
        wv, bv = v(base + 4, (embed, embed)), v(base + 5, (embed,))
        wo, bo = v(base + 6, (embed, embed)), v(base + 7, (embed,))
        # (B, heads, M, d) per-head views
        Q = (X @ wq + bq).reshape(B, M, heads, d).transpose(0, 2, 1, 3)
        K = (X @ wk + bk).reshape(B, M, heads, d).transpose(0, 2, 1, 3)
        V = (X @ wv + bv).reshape(B, M, heads, d).transpose(0, 2, 1, 3)
        S = Q @ K.transpose(0, 1, 3, 2) * scale
        S -= S.max(axis=-1, keepdims=True)
        A = np.exp(S)
        A /= A.sum(axis=-1, keepdims=True)
        O = (A @ V).transpose(0, 2, 1, 3).reshape(B, M, embed)
        X = X + O @ wo + bo
    pooled = X.sum(axis=1)
    Hd = np.maximum(pooled @ v(dbase, (embed, hidden)) + v(dbase + 1, (hidden,)), 0.0)
    return Hd @ v(dbase + 2, (hidden, actions)) + v(dbase + 3, (actions,))


def grad_batch(F, dQ, theta, offs, embed, heads, blocks, hidden):
    """Parameter gradient of sum_b dQ[b] . qvalues(F[b]), flat like theta.

    Recomputes the forward pass with cached activations, then runs exact
    reverse-mode through decoder, attention blocks, and encoder. Relu
    subgradient at 0 is 0.
    """
    B, M, fdim = F.shape
    d = embed // heads
    scale = 1.0 / math.sqrt(d)
    dbase = 4 + 8 * blocks
    actions = int(offs[dbase + 4] - offs[dbase + 3])

    def v(vec, i, shape):
        return vec[offs[i]:offs[i + 1]].reshape(shape)

    W1, b1 = v(theta, 0, (fdim, embed)), v(theta, 1, (embed,))
    W2, b2 = v(theta, 2, (embed, embed)), v(theta, 3, (embed,))
    dw1, db1 = v(theta, dbase, (embed, hidden)), v(theta, dbase + 1, (hidden,))
    aw, ab = v(theta, dbase + 2, (hidden, actions)), v(theta, dbase + 3, (actions,))

    # forward, caching what the reverse sweep needs
    X1 = np.maximum(F @ W1 + b1, 0.0)
    X2 = np.maximum(X1 @ W2 + b2, 0.0)
    X = X2
    Xs, Qs, Ks, Vs, As, Os = [X2], [], [], [], [], []
    for k in range(blocks):
        base = 4 + 8 * k
        wq, bq = v(theta, base, (embed, embed)), v(theta, base + 1, (embed,))
        wk, bk = v(theta, base + 2, (embed, embed)), v(theta, base + 3, (embed,))
        wv, bv = v(theta, base + 4, (embed, embed)), v(theta, base + 5, (embed,))
        wo, bo = v(theta, base + 6, (embed, embed)), v(theta, base + 7, (embed,))
        Q = (X @ wq + bq).reshape(B, M, heads, d).transpose(0, 2, 1, 3)
        K = (X @ wk + bk).reshape(B, M, heads, d).transpose(0, 2, 1, 3)
        V = (X @ wv + bv).reshape(B, M, heads, d).transpose(0, 2, 1, 3)
        S = Q @ K.transpose(0, 1, 3, 2) * scale
        S -= S.max(axis=-1, keepdims=True)
        A = np.exp(S)
        A /= A.sum(axis=-1, keepdims=True)
        O = (A @ V).transpose(0, 2, 1, 3).reshape(B, M, embed)
        X = X + O @ wo + bo
        Qs.append(Q); Ks.append(K); Vs.append(V); As.append(A); Os.append(O)
        Xs.append(X)
    pooled = X.sum(axis=1)
    Hd = np.maximum(pooled @ dw1 + db1, 0.0)

    g = np.zeros_like(theta)
    # decoder
    v(g, dbase + 3, (actions,))[...] += dQ.sum(axis=0)
    v(g, dbase + 2, (hidden, actions))[...] += Hd.T @ dQ
    dZd = (dQ @ aw.T) * (Hd > 0)
    v(g, dbase + 1, (hidden,))[...] += dZd.sum(axis=0)
    v(g, dbase, (embed, hidden))[...] += pooled.T @ dZd
    # sum pooling broadcasts the pooled gradient to every set element
    dX = np.repeat((dZd @ dw1.T)[:, None, :], M, axis=1)

    for k in range(blocks - 1, -1, -1):
        base = 4 + 8 * k
        wq = v(theta, base, (embed, embed))
        wk = v(theta, base + 2, (embed, embed))
        wv = v(theta, base + 4, (embed, embed))
        wo = v(theta, base + 6, (embed, embed))
        Xin = Xs[k]
        dP = dX
        v(g, base + 6, (embed, embed))[...] += np.einsum("bme,bmf->ef", Os[k], dP)
        v(g, base + 7, (embed,))[...] += dP.sum(axis=(0, 1))
        dO = (dP @ wo.T).reshape(B, M, heads, d).transpose(0, 2, 1, 3)
        A = As[k]
        dA = dO @ Vs[k].transpose(0, 1, 3, 2)
        dVh = A.transpose(0, 1, 3, 2) @ dO
        # softmax backward: dS = A * (dA - rowsum(dA * A))
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
        dQh = dS @ Ks[k]
        dKh = dS.transpose(0, 1, 3, 2) @ Qs[k]
        dQm = dQh.transpose(0, 2, 1, 3).reshape(B, M, embed)
        dKm = dKh.transpose(0, 2, 1, 3).reshape(B, M, embed)
        dVm = dVh.transpose(0, 2, 1, 3).reshape(B, M, embed)
        v(g, base, (embed, embed))[...] += np.einsum("bme,bmf->ef", Xin, dQm)
        v(g, base + 1, (embed,))[...] += dQm.sum(axis=(0, 1))
        v(g, base + 2, (embed, embed))[...] += np.einsum("bme,bmf->ef", Xin, dKm)
        v(g, base + 3, (embed,))[...] += dKm.sum(axis=(0, 1))
        v(g, base + 4, (embed, embed))[...] += np.einsum("bme,bmf->ef", Xin, dVm)
        v(g, base + 5, (embed,))[...] += dVm.sum(axis=(0, 1))
        dX = dP + dQm @ wq.T + dKm @ wk.T + dVm @ wv.T

    dZ2 = dX * (X2 > 0)
    v(g, 2, (embed, embed))[...] += np.einsum("bme,bmf->ef", X1, dZ2)
    v(g, 3, (embed,))[...] += dZ2.sum(axis=(0, 1))
    dZ1 = (dZ2 @ W2.T) * (X1 > 0)
    v(g, 0, (fdim, embed))[...] += np.einsum("bmi,bme->ie", F, dZ1)
    v(g, 1, (embed,))[...] += dZ1.sum(axis=(0, 1))
    return g
