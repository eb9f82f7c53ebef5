"""Numba-compiled implementations of the hot numeric kernels.

Signature-compatible with `_impl_numpy`; selected through `backend` when
numba is importable and ``GP_PATHWISE_BACKEND`` allows it.  All inner loops
are written out explicitly so the functions compile in nopython mode, and
linear algebra on growing systems (triangular solves, Cholesky extension,
rank-1 downdates) avoids temporaries.
"""

from __future__ import annotations

import numpy as np
from numba import njit

SQRT5 = np.sqrt(5.0)


@njit(cache=True)
def matern52_cross_gram(X, Z, inv_ls, amplitude):
    n, d = X.shape
    m = Z.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            sq = 0.0
            for k in range(d):
                diff = (X[i, k] - Z[j, k]) * inv_ls[k]
                sq += diff * diff
            r = np.sqrt(sq)
            out[i, j] = amplitude * (1.0 + SQRT5 * r + (5.0 / 3.0) * sq) * np.exp(-SQRT5 * r)
    return out


@njit(cache=True)
def matern52_grad_accum(x, Z, v, inv_ls2, amplitude):
    m, d = Z.shape
    grad = np.zeros(d)
    for j in range(m):
        sq = 0.0
        for k in range(d):
            diff = x[k] - Z[j, k]
            sq += diff * diff * inv_ls2[k]
        r = np.sqrt(sq)
        coef = -amplitude * (5.0 / 3.0) * (1.0 + SQRT5 * r) * np.exp(-SQRT5 * r) * v[j]
        for k in range(d):
            grad[k] += coef * (x[k] - Z[j, k]) * inv_ls2[k]
    return grad


@njit(cache=True)
def rff_features(X, freqs, phases, scale):
    n, d = X.shape
    ell = freqs.shape[0]
    out = np.empty((n, ell))
    for i in range(n):
        for j in range(ell):
            t = phases[j]
            for k in range(d):
                t += freqs[j, k] * X[i, k]
            out[i, j] = scale * np.cos(t)
    return out


@njit(cache=True)
def rff_value_grad(x, freqs, phases, scale, w):
    ell, d = freqs.shape
    val = 0.0
    grad = np.zeros(d)
    for j in range(ell):
        t = phases[j]
        for k in range(d):
            t += freqs[j, k] * x[k]
        val += w[j] * np.cos(t)
        coef = -scale * w[j] * np.sin(t)
        for k in range(d):
            grad[k] += coef * freqs[j, k]
    return scale * val, grad


@njit(cache=True)
def rank1_downdate_core(L, v):
    m = L.shape[0]
    for k in range(m):
        d2 = L[k, k] * L[k, k] - v[k] * v[k]
        tol = 1e-14 * L[k, k] * L[k, k]
        if d2 < -tol:
            return 1
        if d2 <= tol:
            for j in range(k + 1, m):
                if abs(L[j, k] * v[k] - v[j] * L[k, k]) > 1e-10:
                    return 1
            L[k, k] = 0.0
            for j in range(k + 1, m):
                L[j, k] = 0.0
            continue
        r = np.sqrt(d2)
        c = r / L[k, k]
        s = v[k] / L[k, k]
        L[k, k] = r
        for j in range(k + 1, m):
            L[j, k] = (L[j, k] - s * v[j]) / c
            v[j] = c * v[j] - s * L[j, k]
    return 0


@njit(cache=True)
def cholesky_with_status(A, jitter):
    m = A.shape[0]
    L = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1):
            acc = A[i, j]
            if i == j:
                acc += jitter
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            if i == j:
                if acc <= 0.0:
                    return L, 1
                L[i, i] = np.sqrt(acc)
            else:
                L[i, j] = acc / L[j, j]
    return L, 0


@njit(cache=True)
def _row_logsumexp(C, eps, f, g, out):
    n, m = C.shape
    for i in range(n):
        hi = -np.inf
        for j in range(m):
            v = (f[i] + g[j] - C[i, j]) / eps
            if v > hi:
                hi = v
        acc = 0.0
        for j in range(m):
            acc += np.exp((f[i] + g[j] - C[i, j]) / eps - hi)
        out[i] = hi + np.log(acc)


@njit(cache=True)
def _col_logsumexp(C, eps, f, g, out):
    n, m = C.shape
    for j in range(m):
        hi = -np.inf
        for i in range(n):
            v = (f[i] + g[j] - C[i, j]) / eps
            if v > hi:
                hi = v
        acc = 0.0
        for i in range(n):
            acc += np.exp((f[i] + g[j] - C[i, j]) / eps - hi)
        out[j] = hi + np.log(acc)


@njit(cache=True)
def sinkhorn_level(C, eps, f, g, loga, logb, max_iters, tol, check_every):
    n, m = C.shape
    lse_r = np.empty(n)
    lse_c = np.empty(m)
    a = np.exp(loga)
    it = 0
    violation = np.inf
    while it < max_iters:
        stop = min(it + check_every, max_iters)
        while it < stop:
            _row_logsumexp(C, eps, f, g, lse_r)
            for i in range(n):
                f[i] += eps * (loga[i] - lse_r[i])
            _col_logsumexp(C, eps, f, g, lse_c)
            for j in range(m):
                g[j] += eps * (logb[j] - lse_c[j])
            it += 1
        _row_logsumexp(C, eps, f, g, lse_r)
        violation = 0.0
        for i in range(n):
            diff = abs(np.exp(lse_r[i]) - a[i])
            if diff > violation:
                violation = diff
        if violation < tol:
            break
    return it, violation


@njit(cache=True)
def sinkhorn_cost(C, eps, f, g):
    n, m = C.shape
    total = 0.0
    for i in range(n):
        for j in range(m):
            total += np.exp((f[i] + g[j] - C[i, j]) / eps) * C[i, j]
    return total


@njit(cache=True)
def _forward_solve(L, b, size, out):
    for i in range(size):
        acc = b[i]
        for k in range(i):
            acc -= L[i, k] * out[k]
        out[i] = acc / L[i, i]


@njit(cache=True)
def _backward_solve_t(L, b, size, out):
    for i in range(size - 1, -1, -1):
        acc = b[i]
        for k in range(i + 1, size):
            acc -= L[k, i] * out[k]
        out[i] = acc / L[i, i]


@njit(cache=True)
def iterative_rollout_ensemble(
    Z,
    prior_chol,
    mu,
    sigma_chol,
    inv_ls,
    amps,
    s0,
    controls,
    dt,
    noise_scales,
    zeta_drift,
    zeta_evo,
):
    count, T, p = zeta_drift.shape
    m = Z.shape[0]
    din = Z.shape[1]
    n_max = m + T
    traj = np.empty((count, T + 1, p))
    fallbacks = 0

    Zb = np.empty((n_max, din))
    Lb = np.empty((p, n_max, n_max))
    mub = np.empty((p, n_max))
    lam = np.empty((p, m, m))
    kvec = np.empty(n_max)
    cvec = np.empty(n_max)
    avec = np.empty(n_max)
    lam_a = np.empty(m)
    vdown = np.empty(m)
    vwork = np.empty(m)
    x = np.empty(din)
    drift = np.empty(p)
    state = np.empty(p)

    for c in range(count):
        for j in range(m):
            for k in range(din):
                Zb[j, k] = Z[j, k]
        for i in range(p):
            for a_ in range(m):
                for b_ in range(m):
                    Lb[i, a_, b_] = prior_chol[i, a_, b_]
                    lam[i, a_, b_] = sigma_chol[i, a_, b_]
                mub[i, a_] = mu[i, a_]
        for i in range(p):
            state[i] = s0[i]
            traj[c, 0, i] = s0[i]
        for t in range(T):
            size = m + t
            for i in range(p):
                x[i] = state[i]
            x[din - 1] = controls[t]
            for i in range(p):
                for j in range(size):
                    sq = 0.0
                    for k in range(din):
                        diff = (x[k] - Zb[j, k]) * inv_ls[i, k]
                        sq += diff * diff
                    r = np.sqrt(sq)
                    kvec[j] = amps[i] * (1.0 + SQRT5 * r + (5.0 / 3.0) * sq) * np.exp(-SQRT5 * r)
                _forward_solve(Lb[i], kvec, size, cvec)
                _backward_solve_t(Lb[i], cvec, size, avec)
                for a_ in range(m):
                    acc = 0.0
                    for b_ in range(a_, m):
                        acc += lam[i, b_, a_] * avec[b_]
                    lam_a[a_] = acc
                csq = 0.0
                for j in range(size):
                    csq += cvec[j] * cvec[j]
                lsq = 0.0
                for a_ in range(m):
                    lsq += lam_a[a_] * lam_a[a_]
                var = amps[i] - csq + lsq
                if var < 1e-12:
                    var = 1e-12
                sd = np.sqrt(var)
                mean = 0.0
                for j in range(size):
                    mean += avec[j] * mub[i, j]
                fval = mean + sd * zeta_drift[c, t, i]
                drift[i] = fval
                for a_ in range(m):
                    acc = 0.0
                    for b_ in range(a_ + 1):
                        acc += lam[i, a_, b_] * lam_a[b_]
                    vdown[a_] = acc / sd
                scale = (fval - mean) / sd
                for a_ in range(m):
                    mub[i, a_] += vdown[a_] * scale
                mub[i, size] = fval
                for a_ in range(m):
                    vwork[a_] = vdown[a_]
                if rank1_downdate_core(lam[i], vwork) != 0:
                    S = np.empty((m, m))
                    for a_ in range(m):
                        for b_ in range(m):
                            acc = 0.0
                            for k in range(m):
                                acc += lam[i, a_, k] * lam[i, b_, k]
                            S[a_, b_] = acc - vdown[a_] * vdown[b_]
                    for a_ in range(m):
                        for b_ in range(a_):
                            sym = 0.5 * (S[a_, b_] + S[b_, a_])
                            S[a_, b_] = sym
                            S[b_, a_] = sym
                    tr = 0.0
                    for a_ in range(m):
                        tr += S[a_, a_]
                    jit = 1e-12 * max(tr / m, 1.0)
                    newL, status = cholesky_with_status(S, jit)
                    while status != 0 and jit < 1.0:
                        jit *= 100.0
                        newL, status = cholesky_with_status(S, jit)
                    for a_ in range(m):
                        for b_ in range(m):
                            lam[i, a_, b_] = newL[a_, b_]
                    fallbacks += 1
                gamma2 = amps[i] - csq
                if gamma2 < 1e-12 * amps[i]:
                    gamma2 = 1e-12 * amps[i]
                for j in range(size):
                    Lb[i, size, j] = cvec[j]
                Lb[i, size, size] = np.sqrt(gamma2)
            for k in range(din):
                Zb[size, k] = x[k]
            for i in range(p):
                state[i] = state[i] + drift[i] + noise_scales[i] * zeta_evo[c, t, i]
                traj[c, t + 1, i] = state[i]
    return traj, fallbacks


@njit(cache=True)
def decoupled_rollout_ensemble(
    freqs,
    phases,
    scales,
    W,
    Z,
    V,
    inv_ls,
    amps,
    s0,
    controls,
    noise_scales,
    zeta_evo,
):
    count, T, p = zeta_evo.shape
    m, din = Z.shape
    ell = freqs.shape[1]
    traj = np.empty((count, T + 1, p))
    states = np.empty((count, p))
    for c in range(count):
        for i in range(p):
            states[c, i] = s0[i]
            traj[c, 0, i] = s0[i]
    x = np.empty(din)
    for t in range(T):
        for c in range(count):
            for i in range(p):
                x[i] = states[c, i]
            x[din - 1] = controls[t]
            for i in range(p):
                val = 0.0
                for j in range(ell):
                    arg = phases[i, j]
                    for k in range(din):
                        arg += freqs[i, j, k] * x[k]
                    val += W[i, c, j] * np.cos(arg)
                val *= scales[i]
                for j in range(m):
                    sq = 0.0
                    for k in range(din):
                        diff = (x[k] - Z[j, k]) * inv_ls[i, k]
                        sq += diff * diff
                    r = np.sqrt(sq)
                    val += V[i, c, j] * amps[i] * (1.0 + SQRT5 * r + (5.0 / 3.0) * sq) * np.exp(-SQRT5 * r)
                states[c, i] = states[c, i] + val + noise_scales[i] * zeta_evo[c, t, i]
                traj[c, t + 1, i] = states[c, i]
    return traj
