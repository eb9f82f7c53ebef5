"""Pure-NumPy implementations of the hot numeric kernels.

These are the reference implementations; `_impl_numba` provides JIT-compiled
equivalents of the same signatures.  Which set is live is decided in
`backend` (env var ``GP_PATHWISE_BACKEND``).  Everything here operates on
contiguous float64 arrays and is deterministic: all randomness is drawn by
the caller and passed in as arrays.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

SQRT5 = np.sqrt(5.0)


def matern52_cross_gram(X, Z, inv_ls, amplitude):
    """Pairwise Matern-5/2 covariance between row sets X (n,d) and Z (m,d).

    `inv_ls` holds reciprocal lengthscales, one per input dimension.  The
    accumulation loops over dimensions so that transposing the arguments
    yields the bit-exact transpose of the result.
    """
    n, d = X.shape
    m = Z.shape[0]
    sq = np.zeros((n, m))
    for k in range(d):
        diff = (X[:, k, None] - Z[None, :, k]) * inv_ls[k]
        sq += diff * diff
    r = np.sqrt(sq)
    return amplitude * (1.0 + SQRT5 * r + (5.0 / 3.0) * sq) * np.exp(-SQRT5 * r)


def matern52_grad_accum(x, Z, v, inv_ls2, amplitude):
    """Gradient at x of sum_j v_j * k(x, z_j) for the Matern-5/2 kernel."""
    diff = x[None, :] - Z  # (m, d)
    sq = np.einsum("md,d,md->m", diff, inv_ls2, diff)
    r = np.sqrt(sq)
    coef = -amplitude * (5.0 / 3.0) * (1.0 + SQRT5 * r) * np.exp(-SQRT5 * r) * v
    return (coef @ diff) * inv_ls2


def rff_features(X, freqs, phases, scale):
    """Cosine feature matrix scale*cos(X freqs^T + phases), shape (n, ell)."""
    return scale * np.cos(X @ freqs.T + phases[None, :])


def rff_value_grad(x, freqs, phases, scale, w):
    """Value and spatial gradient of the feature expansion sum_i w_i phi_i(x)."""
    t = freqs @ x + phases
    val = scale * (w @ np.cos(t))
    grad = -scale * ((w * np.sin(t)) @ freqs)
    return val, grad


def rank1_downdate_core(L, v):
    """In-place Cholesky downdate of L so that L L^T loses v v^T.

    Returns 0 on success, 1 if the downdate is not positive semi-definite.
    Uses hyperbolic rotations column by column; a zero pivot is accepted
    only when the remaining column/tail pair is consistently zero
    (semi-definite boundary case).
    """
    m = L.shape[0]
    for k in range(m):
        d2 = L[k, k] * L[k, k] - v[k] * v[k]
        tol = 1e-14 * L[k, k] * L[k, k]
        if d2 < -tol:
            return 1
        if d2 <= tol:
            tail_l = L[k + 1 :, k]
            tail_v = v[k + 1 :]
            if np.any(np.abs(tail_l * v[k] - tail_v * L[k, k]) > 1e-10):
                return 1
            L[k, k] = 0.0
            L[k + 1 :, k] = 0.0
            continue
        r = np.sqrt(d2)
        c = r / L[k, k]
        s = v[k] / L[k, k]
        L[k, k] = r
        if k + 1 < m:
            L[k + 1 :, k] = (L[k + 1 :, k] - s * v[k + 1 :]) / c
            v[k + 1 :] = c * v[k + 1 :] - s * L[k + 1 :, k]
    return 0


def cholesky_with_status(A, jitter):
    """Lower Cholesky of A + jitter*I; returns (L, 0) or (garbage, 1)."""
    try:
        L = np.linalg.cholesky(A + jitter * np.eye(A.shape[0]))
        return L, 0
    except np.linalg.LinAlgError:
        return np.zeros_like(A), 1


def sinkhorn_level(C, eps, f, g, loga, logb, max_iters, tol, check_every):
    """Log-domain Sinkhorn iterations at one regularization level.

    Updates the potentials f, g in place and returns (iterations used,
    final L-inf marginal violation).  The g-update is applied last, so the
    column marginal is exact and only the row marginal needs checking.
    """
    a = np.exp(loga)
    it = 0
    violation = np.inf
    while it < max_iters:
        stop = min(it + check_every, max_iters)
        while it < stop:
            M = (f[:, None] + g[None, :] - C) / eps
            f += eps * (loga - logsumexp(M, axis=1))
            M = (f[:, None] + g[None, :] - C) / eps
            g += eps * (logb - logsumexp(M, axis=0))
            it += 1
        M = (f[:, None] + g[None, :] - C) / eps
        row = np.exp(logsumexp(M, axis=1))
        violation = np.max(np.abs(row - a))
        if violation < tol:
            break
    return it, violation


def sinkhorn_cost(C, eps, f, g):
    """Transport cost <P, C> of the entropic plan defined by potentials."""
    P = np.exp((f[:, None] + g[None, :] - C) / eps)
    return float(np.sum(P * C))


def iterative_rollout_ensemble(
    Z,
    prior_chol,
    mu,
    sigma_chol,
    inv_ls,
    amps,
    s0,
    controls,
    noise_scales,
    zeta_drift,
    zeta_evo,
):
    """Unroll trajectories by iteratively conditioning the inducing model.

    Per step: sample the marginal posterior drift at the current input,
    condition the (per-output) inducing distribution on the sampled value,
    append the input as a new inducing location, and advance the state.
    The appended variables are observed exactly, so the nonzero block of the
    inducing covariance stays m x m and is maintained via rank-1 downdates;
    the growing prior Cholesky is extended one row per step.

    Shapes: Z (m, din), prior_chol (p, m, m), mu (p, m), sigma_chol
    (p, m, m), inv_ls (p, din), amps (p,), s0 (p,), controls (T,),
    noise_scales (p,), zeta_* (count, T, p) with p output dims.

    Returns (trajectories (count, T+1, p), number of downdate fallbacks).
    """
    count, T, p = zeta_drift.shape
    m = Z.shape[0]
    din = Z.shape[1]
    n_max = m + T
    traj = np.empty((count, T + 1, p))
    fallbacks = 0

    for c in range(count):
        Zb = np.empty((n_max, din))
        Zb[:m] = Z
        Lb = np.stack([np.zeros((n_max, n_max)) for _ in range(p)])
        for i in range(p):
            Lb[i, :m, :m] = prior_chol[i]
        mub = np.zeros((p, n_max))
        mub[:, :m] = mu
        lam = sigma_chol.copy()
        state = s0.copy()
        traj[c, 0] = state
        for t in range(T):
            size = m + t
            x = np.empty(din)
            x[:p] = state
            x[p:] = controls[t]
            drift = np.empty(p)
            for i in range(p):
                kvec = matern52_cross_gram(
                    x[None, :], Zb[:size], inv_ls[i], amps[i]
                )[0]
                L = Lb[i, :size, :size]
                cvec = solve_triangular(L, kvec, lower=True)
                avec = solve_triangular(L, cvec, lower=True, trans="T")
                lam_a = lam[i].T @ avec[:m]
                var = amps[i] - cvec @ cvec + lam_a @ lam_a
                var = max(var, 1e-12)
                sd = np.sqrt(var)
                mean = avec @ mub[i, :size]
                fval = mean + sd * zeta_drift[c, t, i]
                drift[i] = fval
                # condition the inducing distribution on f(x) = fval
                vdown = (lam[i] @ lam_a) / sd
                mub[i, :m] += vdown * ((fval - mean) / sd)
                mub[i, size] = fval
                if rank1_downdate_core(lam[i], vdown.copy()) != 0:
                    S = lam[i] @ lam[i].T - np.outer(vdown, vdown)
                    S = 0.5 * (S + S.T)
                    jit = 1e-12 * max(np.trace(S) / m, 1.0)
                    newL, status = cholesky_with_status(S, jit)
                    while status != 0 and jit < 1.0:
                        jit *= 100.0
                        newL, status = cholesky_with_status(S, jit)
                    lam[i] = newL
                    fallbacks += 1
                # extend the prior Cholesky with the new location
                gamma2 = max(amps[i] - cvec @ cvec, 1e-12 * amps[i])
                Lb[i, size, :size] = cvec
                Lb[i, size, size] = np.sqrt(gamma2)
            Zb[size] = x
            state = state + drift + noise_scales * zeta_evo[c, t]
            traj[c, t + 1] = state
    return traj, fallbacks


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
    """Unroll trajectories with per-trajectory fixed decoupled function draws.

    All trajectories advance in lockstep; each carries its own prior weights
    W (p, count, ell) and update coefficients V (p, count, m), while the
    Fourier basis and anchor set are shared per output dimension.

    Returns trajectories of shape (count, T+1, p).
    """
    count, T, p = zeta_evo.shape
    din = Z.shape[1]
    traj = np.empty((count, T + 1, p))
    states = np.tile(s0, (count, 1))
    traj[:, 0] = states
    X = np.empty((count, din))
    for t in range(T):
        X[:, :p] = states
        X[:, p:] = controls[t]
        drift = np.empty((count, p))
        for i in range(p):
            F = rff_features(X, freqs[i], phases[i], scales[i])
            prior = np.einsum("cl,cl->c", F, W[i])
            G = matern52_cross_gram(X, Z, inv_ls[i], amps[i])
            update = np.einsum("cm,cm->c", G, V[i])
            drift[:, i] = prior + update
        states = states + drift + noise_scales[None, :] * zeta_evo[:, t]
        traj[:, t + 1] = states
    return traj
