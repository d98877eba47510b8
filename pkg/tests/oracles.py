"""Slow, loop-based reference implementations used only by the tests."""

import numpy as np


def compose_loops(A, B, C, w=None):
    I, F = A.shape
    J, K = B.shape[0], C.shape[0]
    w = np.ones(F) if w is None else w
    X = np.zeros((I, J, K))
    for i in range(I):
        for j in range(J):
            for k in range(K):
                X[i, j, k] = sum(w[f] * A[i, f] * B[j, f] * C[k, f] for f in range(F))
    return X


def mttkrp_loops(X, A, B, C, mode):
    I, J, K = X.shape
    F = A.shape[1]
    out = np.zeros(((I, J, K)[mode - 1], F))
    for i in range(I):
        for j in range(J):
            for k in range(K):
                for f in range(F):
                    if mode == 1:
                        out[i, f] += X[i, j, k] * B[j, f] * C[k, f]
                    elif mode == 2:
                        out[j, f] += X[i, j, k] * A[i, f] * C[k, f]
                    else:
                        out[k, f] += X[i, j, k] * A[i, f] * B[j, f]
    return out


def masked_loss_loops(X, A, B, C, w=None):
    """Frobenius norm over off-diagonal (i != j) cells."""
    R = X - compose_loops(A, B, C, w)
    tot = 0.0
    I, J, K = X.shape
    for i in range(I):
        for j in range(J):
            if i != j:
                tot += float(np.sum(R[i, j] ** 2))
    return np.sqrt(tot)


def masked_block_nnls(X, A, B, C, mode):
    """Exact masked nonnegative least-squares solution for one factor.

    Row by row: the unknowns are that row of the factor, the design matrix
    has one row per observed (off-diagonal) cell.
    """
    from scipy.optimize import nnls

    I, J, K = X.shape
    F = A.shape[1]
    n = (I, J, K)[mode - 1]
    out = np.zeros((n, F))
    for r in range(n):
        rows, rhs = [], []
        for i in range(I):
            for j in range(J):
                if i == j:
                    continue
                for k in range(K):
                    if (i, j, k)[mode - 1] != r:
                        continue
                    if mode == 1:
                        rows.append(B[j] * C[k])
                    elif mode == 2:
                        rows.append(A[i] * C[k])
                    else:
                        rows.append(A[i] * B[j])
                    rhs.append(X[i, j, k])
        out[r], _ = nnls(np.array(rows), np.array(rhs))
    return out


def walk_distance_loops(W, t, loops=True):
    """Vertex distances from an explicit t-fold product of the walk matrix."""
    n = W.shape[0]
    W = W.astype(float).copy()
    if loops:
        for i in range(n):
            m = np.count_nonzero(W[i])
            if m:
                W[i, i] = W[i].sum() / m
    d = W.sum(axis=1)
    P = np.zeros_like(W)
    for i in range(n):
        if d[i] > 0:
            P[i] = W[i] / d[i]
    Pt = np.eye(n)
    for _ in range(t):
        Pt = Pt @ P
    r = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(n):
                if d[k] > 0:
                    s += (Pt[i, k] - Pt[j, k]) ** 2 / d[k]
            r[i, j] = np.sqrt(s)
    return r
