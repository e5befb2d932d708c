"""Shared test utilities: a slow reference forward and FD conditioning.

reference_forward re-derives the network output for ONE set with plain
per-set numpy, independent of the batched kernels, and reports the
smallest absolute relu preactivation seen. Finite-difference tests
filter out inputs whose margin is small enough that a 1e-3 parameter
step could flip a relu mask.
"""

import math

import numpy as np


def reference_forward(Fs, p):
    """(q, min_abs_preactivation) for a single (M, 6) feature set."""
    cfg = p.cfg
    z1 = Fs @ p.view("psi_w1") + p.view("psi_b1")
    x = np.maximum(z1, 0.0)
    z2 = x @ p.view("psi_w2") + p.view("psi_b2")
    x = np.maximum(z2, 0.0)
    margin = min(np.abs(z1).min(), np.abs(z2).min())
    d = cfg.embed_dim // cfg.n_heads
    for k in range(cfg.n_attention_blocks):
        blk = p.block(k)
        Q = x @ blk["wq"] + blk["bq"]
        K = x @ blk["wk"] + blk["bk"]
        V = x @ blk["wv"] + blk["bv"]
        O = np.empty_like(x)
        for h in range(cfg.n_heads):
            lo, hi = h * d, (h + 1) * d
            S = Q[:, lo:hi] @ K[:, lo:hi].T / math.sqrt(d)
            S = S - S.max(axis=1, keepdims=True)
            A = np.exp(S)
            A = A / A.sum(axis=1, keepdims=True)
            O[:, lo:hi] = A @ V[:, lo:hi]
        x = x + O @ blk["wo"] + blk["bo"]
    pooled = x.sum(axis=0)
    zd = pooled @ p.view("dec_w1") + p.view("dec_b1")
    margin = min(margin, np.abs(zd).min())
    h = np.maximum(zd, 0.0)
    return h @ p.view("dec_w2") + p.view("dec_b2"), margin


def draw_conditioned_sets(rng, params, n_sets, max_card, margin=5e-3):
    """Random feature sets whose relu preactivations all clear ``margin``."""
    sets = []
    while len(sets) < n_sets:
        M = int(rng.integers(1, max_card + 1))
        Fs = rng.normal(0.0, 1.5, size=(M, params.cfg.feature_dim))
        _, m = reference_forward(Fs, params)
        if m > margin:
            sets.append(Fs)
    return sets


def fd_gradient(loss, theta, eps=1e-3):
    """Central finite differences of a scalar function of the flat vector."""
    g = np.empty_like(theta)
    for i in range(len(theta)):
        up = theta.copy()
        up[i] += eps
        dn = theta.copy()
        dn[i] -= eps
        g[i] = (loss(up) - loss(dn)) / (2.0 * eps)
    return g
