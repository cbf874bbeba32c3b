"""Numba kernels for the solver hot loop.

The public modules (`gp`, `reachability`, `constraints`, `performance`) are
the reference implementations; plan certification only ever goes through
them. These kernels re-express the same formulas on packed plain arrays so
that a full safety-chain or belief-chain evaluation is a single compiled
call, which is what makes penalty optimization with finite-difference
gradients affordable. Equivalence against the reference path is covered in
the test suite.

Conventions
-----------
* GP data is packed as (Zt (n,d), alphas (p,n), chols (p,n,n)) plus
  per-output kernel parameter arrays; `family` is 0=linear, 1=matern52,
  2=sum.
* Priors are affine: h(x, u) = Ah x + Bh u + ch.
* Propagation scheme: 0 = locally constant model approximation,
  1 = mean linearization.
"""

import numpy as np
from numba import njit

FAM_LINEAR = 0
FAM_MATERN = 1
FAM_SUM = 2

SQRT5 = np.sqrt(5.0)
RECT_EPS = 1e-9
POINT_EPS = 1e-9


@njit(cache=True)
def _kvec(Zt, z, family, ls, sv, lw, out):
    """k(z, Zt_i) into out (n,), single output's kernel parameters."""
    n, d = Zt.shape
    for i in range(n):
        val = 0.0
        if family != FAM_MATERN:
            for j in range(d):
                val += lw[j] * z[j] * Zt[i, j]
        if family != FAM_LINEAR:
            r2 = 0.0
            for j in range(d):
                dz = (z[j] - Zt[i, j]) / ls[j]
                r2 += dz * dz
            dd = np.sqrt(r2) * SQRT5
            val += sv * (1.0 + dd + dd * dd / 3.0) * np.exp(-dd)
        out[i] = val


@njit(cache=True)
def _kdiag(z, family, ls, sv, lw):
    """k(z, z) for one output."""
    val = 0.0
    if family != FAM_MATERN:
        for j in range(z.shape[0]):
            val += lw[j] * z[j] * z[j]
    if family != FAM_LINEAR:
        val += sv
    return val


@njit(cache=True)
def _fwd_subst(L, b, out):
    """Solve L out = b for lower-triangular L."""
    n = L.shape[0]
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * out[k]
        out[i] = s / L[i, i]


@njit(cache=True)
def _bwd_subst(L, b, out):
    """Solve L^T out = b for lower-triangular L."""
    n = L.shape[0]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, n):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]


@njit(cache=True)
def gp_mean_sigma(Zt, alphas, chols, family, ls, sv, lw, z, mu, sig,
                  shared=False):
    """Posterior mean and std for all outputs at a single input z.

    With `shared` the outputs use one common kernel and Gram factor, so the
    cross-covariances and the triangular solve are computed once.
    """
    n = Zt.shape[0]
    p = alphas.shape[0]
    kn = np.empty(n)
    tmp = np.empty(n)
    for j in range(p):
        if shared and j > 0:
            if n == 0:
                mu[j] = 0.0
            else:
                m = 0.0
                for i in range(n):
                    m += alphas[j, i] * kn[i]
                mu[j] = m
            sig[j] = sig[0]
            continue
        prior = _kdiag(z, family, ls[j], sv[j], lw[j])
        if n == 0:
            mu[j] = 0.0
            sig[j] = np.sqrt(max(prior, 0.0))
            continue
        _kvec(Zt, z, family, ls[j], sv[j], lw[j], kn)
        m = 0.0
        for i in range(n):
            m += alphas[j, i] * kn[i]
        mu[j] = m
        _fwd_subst(chols[j], kn, tmp)
        v2 = 0.0
        for i in range(n):
            v2 += tmp[i] * tmp[i]
        sig[j] = np.sqrt(max(prior - v2, 0.0))


@njit(cache=True)
def _fill_kernel_grad(Zt, z, family, ls_j, sv_j, lw_j, Jk):
    """d k(z, Zt_i) / d z into Jk (n, d) for one output's kernel."""
    n, d = Zt.shape
    for i in range(n):
        if family != FAM_MATERN:
            for a in range(d):
                Jk[i, a] = lw_j[a] * Zt[i, a]
        else:
            for a in range(d):
                Jk[i, a] = 0.0
        if family != FAM_LINEAR:
            r2 = 0.0
            for a in range(d):
                dz = (z[a] - Zt[i, a]) / ls_j[a]
                r2 += dz * dz
            dd = np.sqrt(r2) * SQRT5
            coef = -(5.0 / 3.0) * sv_j * (1.0 + dd) * np.exp(-dd)
            for a in range(d):
                Jk[i, a] += coef * (z[a] - Zt[i, a]) / (ls_j[a] * ls_j[a])


@njit(cache=True)
def gp_mean_jac(Zt, alphas, family, ls, sv, lw, z, dmu, shared=False):
    """d mean / d z for all outputs at z, shape (p, d). No factor solves:
    the mean gradient only needs the kernel gradient and the weights."""
    n, d = Zt.shape
    p = alphas.shape[0]
    Jk = np.empty((n, d))
    for j in range(p):
        if n == 0:
            for a in range(d):
                dmu[j, a] = 0.0
            continue
        if not (shared and j > 0):
            _fill_kernel_grad(Zt, z, family, ls[j], sv[j], lw[j], Jk)
        for a in range(d):
            s = 0.0
            for i in range(n):
                s += Jk[i, a] * alphas[j, i]
            dmu[j, a] = s


@njit(cache=True)
def gp_jacobians(Zt, alphas, chols, family, ls, sv, lw, z, dmu, dsig,
                 shared=False):
    """d mean / d z and d std / d z for all outputs at z; shapes (p, d)."""
    n, d = Zt.shape
    p = alphas.shape[0]
    kn = np.empty(n)
    tmp = np.empty(n)
    gamma = np.empty(n)
    Jk = np.empty((n, d))
    for j in range(p):
        for a in range(d):
            dmu[j, a] = 0.0
            dsig[j, a] = 0.0
        if n == 0:
            prior = _kdiag(z, family, ls[j], sv[j], lw[j])
            s = np.sqrt(max(prior, 0.0))
            if s > 1e-12 and family != FAM_MATERN:
                for a in range(d):
                    dsig[j, a] = lw[j, a] * z[a] / s
            continue
        if shared and j > 0:
            for a in range(d):
                s = 0.0
                for i in range(n):
                    s += Jk[i, a] * alphas[j, i]
                dmu[j, a] = s
                dsig[j, a] = dsig[0, a]
            continue
        _kvec(Zt, z, family, ls[j], sv[j], lw[j], kn)
        _fill_kernel_grad(Zt, z, family, ls[j], sv[j], lw[j], Jk)
        for a in range(d):
            s = 0.0
            for i in range(n):
                s += Jk[i, a] * alphas[j, i]
            dmu[j, a] = s
        _fwd_subst(chols[j], kn, tmp)
        _bwd_subst(chols[j], tmp, gamma)
        prior = _kdiag(z, family, ls[j], sv[j], lw[j])
        v2 = 0.0
        for i in range(n):
            v2 += tmp[i] * tmp[i]
        s2 = max(prior - v2, 0.0)
        s = np.sqrt(s2)
        if s > 1e-12:
            for a in range(d):
                gprior = 2.0 * lw[j, a] * z[a] if family != FAM_MATERN else 0.0
                acc = 0.0
                for i in range(n):
                    acc += Jk[i, a] * gamma[i]
                dsig[j, a] = (gprior - 2.0 * acc) / (2.0 * s)


@njit(cache=True)
def _chol_success(A, out):
    """Lower Cholesky of A into out; returns False when A is not PD."""
    n = A.shape[0]
    for i in range(n):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= out[i, k] * out[j, k]
            if i == j:
                if s <= 0.0:
                    return False
                out[i, i] = np.sqrt(s)
            else:
                out[i, j] = s / out[j, j]
        for j in range(i + 1, n):
            out[i, j] = 0.0
    return True


@njit(cache=True)
def _lambda_max_psd(M, iters):
    """Certified largest eigenvalue of a symmetric PSD matrix.

    Same scheme as the reference path: all-ones power iteration, Rayleigh
    polish, then a definiteness certificate with bisection fallback so the
    value never undershoots.
    """
    n = M.shape[0]
    v = np.ones(n) / np.sqrt(n)
    lam = v @ (M @ v)
    for _ in range(iters):
        w = M @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        lam = v @ (M @ v)
    eye = np.eye(n)
    scratch = np.empty((n, n))
    for _ in range(3):
        shift = lam * (1.0 + 1e-10) + 1e-300
        A = M - shift * eye
        if np.abs(np.linalg.det(A)) < 1e-300:
            break
        w = np.linalg.solve(A, v)
        nw = np.linalg.norm(w)
        if not np.isfinite(nw) or nw == 0.0:
            break
        v = w / nw
        lam_new = v @ (M @ v)
        if not np.isfinite(lam_new):
            break
        if lam_new > lam:
            lam = lam_new
    hi = lam * (1.0 + 1e-9) + 1e-300
    if _chol_success(hi * eye - M, scratch):
        return lam
    lo = lam
    hi = np.trace(M) + 1e-300
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _chol_success(mid * eye - M, scratch):
            hi = mid
        else:
            lo = mid
    return hi


@njit(cache=True)
def max_scaled_distance_arr(Q, StS, iters):
    """sqrt of max ||S x||^2 over E(0, Q), via the symmetric reduction
    M = L^T StS L. Mirrors ellipsoids.max_scaled_distance."""
    L = np.linalg.cholesky(Q)
    M = L.T @ (StS @ L)
    M = 0.5 * (M + M.T)
    lam = _lambda_max_psd(M, iters)
    return np.sqrt(max(lam, 0.0))


@njit(cache=True)
def safety_chain(x0, q0_eps, ks, Kfb, Ah, Bh, ch,
                 lip_grad_h, lip_g, lip_g_matrix, use_g_matrix,
                 lip_grad_mu, lip_sigma, scheme, beta,
                 Zt, alphas, chols, family, ls, sv, lw,
                 HX, hX, HU, hU, HS, hS, shared=False):
    """Propagate the T-step safety tube and evaluate all residuals.

    Returns (res, centers, shapes, ok). Residual layout: state rows for
    R_1..R_{T-1} (T-1 blocks of len(hX)), control rows for t=0..T-1
    (T blocks of len(hU)), terminal rows (len(hS)). ok flips to False on a
    non-finite intermediate.
    """
    T, q = ks.shape
    p = x0.shape[0]
    d = p + q
    mx = hX.shape[0]
    mu_rows = hU.shape[0]
    ms = hS.shape[0]
    centers = np.empty((T + 1, p))
    shapes = np.empty((T + 1, p, p))
    centers[0] = x0
    shapes[0] = q0_eps * np.eye(p)
    res = np.empty((T - 1) * mx + T * mu_rows + ms)
    ok = True

    z = np.empty(d)
    mu = np.empty(p)
    sig = np.empty(p)
    dmu = np.empty((p, d))
    StS = np.empty((p, p))
    Hmat = np.empty((p, p))

    for t in range(T):
        K = Kfb[t]
        # z-bar = (center, feedforward)
        for a in range(p):
            z[a] = centers[t, a]
        for a in range(q):
            z[p + a] = ks[t, a]
        gp_mean_sigma(Zt, alphas, chols, family, ls, sv, lw, z, mu, sig, shared)
        # l = max ||S (x - p_t)||, S = [I; K]
        for a in range(p):
            for b in range(p):
                acc = 1.0 if a == b else 0.0
                for r in range(q):
                    acc += K[r, a] * K[r, b]
                StS[a, b] = acc
        Lq = np.linalg.cholesky(shapes[t])
        lmax = max_scaled_distance_arr(shapes[t], StS, p * p)

        if scheme == 0:
            for a in range(p):
                for b in range(p):
                    acc = Ah[a, b]
                    for r in range(q):
                        acc += Bh[a, r] * K[r, b]
                    Hmat[a, b] = acc
        else:
            gp_mean_jac(Zt, alphas, family, ls, sv, lw, z, dmu, shared)
            for a in range(p):
                for b in range(p):
                    acc = Ah[a, b] + dmu[a, b]
                    for r in range(q):
                        acc += (Bh[a, r] + dmu[a, p + r]) * K[r, b]
                    Hmat[a, b] = acc

        # control residuals at time t: H_u k + ||H_u K L|| - h_u
        base = (T - 1) * mx + t * mu_rows
        for i in range(mu_rows):
            lin = 0.0
            for r in range(q):
                lin += HU[i, r] * ks[t, r]
            spread = 0.0
            for b in range(p):
                acc = 0.0
                for r in range(q):
                    rowk = 0.0
                    for a in range(p):
                        rowk += K[r, a] * Lq[a, b]
                    acc += HU[i, r] * rowk
                spread += acc * acc
            res[base + i] = lin + np.sqrt(spread) - hU[i]

        # next-step center and shape
        for a in range(p):
            acc = ch[a] + mu[a]
            for b in range(p):
                acc += Ah[a, b] * centers[t, b]
            for r in range(q):
                acc += Bh[a, r] * ks[t, r]
            centers[t + 1, a] = acc

        HL = Hmat @ Lq
        Qa = HL @ HL.T
        tra = 0.0
        trr = 0.0
        dvec = np.empty(p)
        supports = np.zeros(d)
        if use_g_matrix and scheme == 0:
            # per-coordinate supports: row norms of [I; K] L
            for i in range(p):
                acc = 0.0
                for b in range(p):
                    acc += Lq[i, b] * Lq[i, b]
                supports[i] = np.sqrt(acc)
            for r in range(q):
                acc = 0.0
                for b in range(p):
                    row = 0.0
                    for a in range(p):
                        row += K[r, a] * Lq[a, b]
                    acc += row * row
                supports[p + r] = np.sqrt(acc)
        for a in range(p):
            if scheme == 0:
                if use_g_matrix:
                    g_term = 0.0
                    for i in range(d):
                        g_term += lip_g_matrix[a, i] * supports[i]
                else:
                    g_term = lip_g[a] * lmax
                dd = beta * sig[a] + 0.5 * lip_grad_h[a] * lmax * lmax + g_term
            else:
                dd = beta * (sig[a] + lip_sigma[a] * lmax) \
                    + 0.5 * (lip_grad_h[a] + lip_grad_mu[a]) * lmax * lmax
            if dd < RECT_EPS:
                dd = RECT_EPS
            dvec[a] = dd
            tra += Qa[a, a]
            trr += p * dd * dd
        c = np.sqrt(tra / trr) if tra > 0.0 else 1e-12
        for a in range(p):
            for b in range(p):
                val = (1.0 + 1.0 / c) * Qa[a, b]
                if a == b:
                    val += (1.0 + c) * p * dvec[a] * dvec[a]
                shapes[t + 1, a, b] = val
        for a in range(p):
            if not np.isfinite(centers[t + 1, a]):
                ok = False
                return res, centers, shapes, ok

    # state residuals for R_1..R_{T-1}
    for t in range(1, T):
        Lt = np.linalg.cholesky(shapes[t])
        base = (t - 1) * mx
        for i in range(mx):
            lin = 0.0
            for a in range(p):
                lin += HX[i, a] * centers[t, a]
            spread = 0.0
            for b in range(p):
                acc = 0.0
                for a in range(p):
                    acc += HX[i, a] * Lt[a, b]
                spread += acc * acc
            res[base + i] = lin + np.sqrt(spread) - hX[i]

    # terminal residuals for R_T
    LT = np.linalg.cholesky(shapes[T])
    base = (T - 1) * mx + T * mu_rows
    for i in range(ms):
        lin = 0.0
        for a in range(p):
            lin += HS[i, a] * centers[T, a]
        spread = 0.0
        for b in range(p):
            acc = 0.0
            for a in range(p):
                acc += HS[i, a] * LT[a, b]
            spread += acc * acc
        res[base + i] = lin + np.sqrt(spread) - hS[i]
    return res, centers, shapes, ok


@njit(cache=True)
def belief_chain(m0, us, Ah, Bh, ch,
                 Zt, alphas, chols, family, ls, sv, lw, shared=False):
    """First-order moment propagation of the performance trajectory.

    Returns (means (H+1, p), covs (H+1, p, p)); the initial belief is the
    point m0 with zero covariance.
    """
    H, q = us.shape
    p = m0.shape[0]
    d = p + q
    means = np.empty((H + 1, p))
    covs = np.zeros((H + 1, p, p))
    means[0] = m0
    z = np.empty(d)
    mu = np.empty(p)
    sig = np.empty(p)
    dmu = np.empty((p, d))
    for t in range(H):
        for a in range(p):
            z[a] = means[t, a]
        for r in range(q):
            z[p + r] = us[t, r]
        gp_mean_sigma(Zt, alphas, chols, family, ls, sv, lw, z, mu, sig, shared)
        gp_mean_jac(Zt, alphas, family, ls, sv, lw, z, dmu, shared)
        for a in range(p):
            acc = ch[a] + mu[a]
            for b in range(p):
                acc += Ah[a, b] * means[t, b]
            for r in range(q):
                acc += Bh[a, r] * us[t, r]
            means[t + 1, a] = acc
        J = np.empty((p, p))
        for a in range(p):
            for b in range(p):
                J[a, b] = Ah[a, b] + dmu[a, b]
        Sn = J @ (covs[t] @ J.T)
        for a in range(p):
            Sn[a, a] += sig[a] * sig[a]
        covs[t + 1] = 0.5 * (Sn + Sn.T)
    return means, covs


@njit(cache=True)
def expected_saturating_sum(means, covs, W, xg, gamma, H):
    """sum_{t<H} gamma^t E[1 - exp(-0.5 (x-xg)^T W (x-xg))] under N(m_t, S_t)."""
    p = xg.shape[0]
    total = 0.0
    disc = 1.0
    eye = np.eye(p)
    for t in range(H):
        A = eye + covs[t] @ W
        det = np.linalg.det(A)
        if det <= 1e-12 or not np.isfinite(det):
            return np.inf
        diff = means[t] - xg
        y = np.linalg.solve(A, diff)
        quad = diff @ (W @ y)
        total += disc * (1.0 - np.exp(-0.5 * quad) / np.sqrt(det))
        disc *= gamma
    return total


@njit(cache=True)
def confidence_minus_deviation(means, covs, centers, Qperf, T, H):
    """sum_{t<=H} tr(S_t^{1/2}) - sum_{t=1..min(T,H)} (m_t-p_t)^T Qperf (m_t-p_t)."""
    total = 0.0
    for t in range(H + 1):
        evals = np.linalg.eigvalsh(covs[t])
        for a in range(evals.shape[0]):
            if evals[a] > 0.0:
                total += np.sqrt(evals[a])
    m_end = min(T, H)
    for t in range(1, m_end + 1):
        diff = means[t] - centers[t]
        total -= diff @ (Qperf @ diff)
    return total


@njit(cache=True)
def center_tracking_cost(centers, Wtrack, xg, T):
    """sum_{t<T} (p_t - xg)^T Wtrack (p_t - xg) over safety-tube centers."""
    total = 0.0
    for t in range(T):
        diff = centers[t] - xg
        total += diff @ (Wtrack @ diff)
    return total


@njit(cache=True)
def chance_residuals(means, covs, us, HX, hX, HU, hU, kappa):
    """Chance-constraint residuals for the performance-only baseline.

    State rows (mean +- kappa std) for t=1..H, control rows pointwise for
    t=0..H-1.
    """
    H = us.shape[0]
    mx = hX.shape[0]
    mu_rows = hU.shape[0]
    res = np.empty(H * mx + H * mu_rows)
    for t in range(1, H + 1):
        base = (t - 1) * mx
        for i in range(mx):
            lin = 0.0
            for a in range(means.shape[1]):
                lin += HX[i, a] * means[t, a]
            quad = 0.0
            for a in range(means.shape[1]):
                for b in range(means.shape[1]):
                    quad += HX[i, a] * covs[t, a, b] * HX[i, b]
            res[base + i] = lin + kappa * np.sqrt(max(quad, 0.0)) - hX[i]
    for t in range(H):
        base = H * mx + t * mu_rows
        for i in range(mu_rows):
            lin = 0.0
            for r in range(us.shape[1]):
                lin += HU[i, r] * us[t, r]
            res[base + i] = lin - hU[i]
    return res


@njit(cache=True)
def penalty_from_residuals(res, rho):
    """rho * sum relu(res)^2."""
    total = 0.0
    for i in range(res.shape[0]):
        if res[i] > 0.0:
            total += res[i] * res[i]
    return rho * total
