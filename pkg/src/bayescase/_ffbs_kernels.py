"""Compiled forward-filter / backward-sampler loops for the companion-form DLM.

Standard normal variates are supplied by the caller so the random stream
stays in numpy and results match the pure-numpy path draw for draw.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def forward(y, V, phi, omega, m0, C0):
    T = y.shape[0]
    p = phi.shape[0]
    m = np.zeros((T + 1, p))
    C = np.zeros((T + 1, p, p))
    a = np.zeros((T + 1, p))
    R = np.zeros((T + 1, p, p))
    f = np.zeros(T + 1)
    Q = np.zeros(T + 1)
    e = np.zeros(T + 1)
    m[0] = m0
    C[0] = C0
    gc = np.zeros((p, p))
    for t in range(1, T + 1):
        s = 0.0
        for j in range(p):
            s += phi[j] * m[t - 1, j]
        a[t, 0] = s
        for i in range(1, p):
            a[t, i] = m[t - 1, i - 1]
        for k in range(p):
            s = 0.0
            for j in range(p):
                s += phi[j] * C[t - 1, j, k]
            gc[0, k] = s
        for i in range(1, p):
            for k in range(p):
                gc[i, k] = C[t - 1, i - 1, k]
        for i in range(p):
            s = 0.0
            for j in range(p):
                s += gc[i, j] * phi[j]
            R[t, i, 0] = s
            for k in range(1, p):
                R[t, i, k] = gc[i, k - 1]
        R[t, 0, 0] += omega
        f[t] = a[t, 0]
        Q[t] = R[t, 0, 0] + V[t - 1]
        if not Q[t] > 0.0:
            return a, R, m, C, f, Q, e, t
        e[t] = y[t - 1] - f[t]
        for i in range(p):
            m[t, i] = a[t, i] + R[t, i, 0] / Q[t] * e[t]
        for i in range(p):
            for k in range(p):
                C[t, i, k] = R[t, i, k] - R[t, i, 0] * R[t, k, 0] / Q[t]
        for i in range(p):
            for k in range(i + 1, p):
                v = 0.5 * (C[t, i, k] + C[t, k, i])
                C[t, i, k] = v
                C[t, k, i] = v
    return a, R, m, C, f, Q, e, 0


@njit(cache=True)
def psd_cholesky(cov):
    """Lower factor L with L L' = cov for symmetric PSD cov; zero pivots give zero columns."""
    p = cov.shape[0]
    L = np.zeros((p, p))
    scale = 0.0
    for i in range(p):
        scale = max(scale, abs(cov[i, i]))
    tol = 1e-13 * max(scale, 1e-300)
    for j in range(p):
        d = cov[j, j]
        for k in range(j):
            d -= L[j, k] * L[j, k]
        if d <= tol:
            continue
        L[j, j] = np.sqrt(d)
        for i in range(j + 1, p):
            s = 0.5 * (cov[i, j] + cov[j, i])
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    return L


@njit(cache=True)
def _psd_draw(mean, cov, z):
    return mean + psd_cholesky(cov) @ z


@njit(cache=True)
def backward(a, R, m, C, G, z):
    T = m.shape[0] - 1
    p = m.shape[1]
    theta = np.zeros((T + 1, p))
    theta[T] = _psd_draw(m[T], C[T], z[T])
    n_singular = 0
    for t in range(T - 1, -1, -1):
        cg = C[t] @ G.T
        Rn = R[t + 1]
        dmax = 0.0
        for i in range(p):
            dmax = max(dmax, Rn[i, i])
        # B' = R^{-1} (C G')'
        ok = True
        L = np.zeros((p, p))
        for i in range(p):
            for j in range(i + 1):
                s = Rn[i, j]
                for k in range(j):
                    s -= L[i, k] * L[j, k]
                if i == j:
                    if s <= 1e-14 * max(dmax, 1e-300):
                        ok = False
                        break
                    L[i, i] = np.sqrt(s)
                else:
                    L[i, j] = s / L[j, j]
            if not ok:
                break
        if ok:
            Bt = np.linalg.solve(Rn, cg.T)
            B = Bt.T
        else:
            n_singular += 1
            B = cg @ np.linalg.pinv(Rn)
        mean = m[t] + B @ (theta[t + 1] - a[t + 1])
        cov = C[t] - B @ Rn @ B.T
        theta[t] = _psd_draw(mean, cov, z[t])
    return theta, n_singular
