"""Independent reference computations used as test oracles.

None of these import the fitting code paths they check.
"""

import numpy as np
from scipy import optimize


def lmm_negloglik(params, blocks, d_a):
    """Marginal Gaussian log-likelihood of a linear mixed model, beta profiled out by GLS.

    params = (log sigma_y, entries of the lower Cholesky factor of Sigma_a with log diagonal).
    """
    log_sy = params[0]
    L = np.zeros((d_a, d_a))
    L[np.tril_indices(d_a)] = params[1:]
    L[np.diag_indices(d_a)] = np.exp(np.diag(L))
    S = L @ L.T
    s2 = np.exp(2 * log_sy)
    XtVX, XtVy, parts = 0.0, 0.0, []
    for X, Z, y in blocks:
        V = Z @ S @ Z.T + s2 * np.eye(len(y))
        Vi = np.linalg.inv(V)
        XtVX = XtVX + X.T @ Vi @ X
        XtVy = XtVy + X.T @ Vi @ y
        parts.append((X, y, V, Vi))
    beta = np.linalg.solve(XtVX, XtVy)
    ll = 0.0
    for X, y, V, Vi in parts:
        r = y - X @ beta
        ll += -0.5 * (len(y) * np.log(2 * np.pi) + np.linalg.slogdet(V)[1] + r @ Vi @ r)
    return -ll, beta, S, np.sqrt(s2)


def lmm_mle(blocks, d_a, start=None):
    """Direct numerical maximization; returns (beta, sigma_y, Sigma_a, loglik)."""
    x0 = np.zeros(1 + d_a * (d_a + 1) // 2) if start is None else start
    f = lambda p: lmm_negloglik(p, blocks, d_a)[0]
    res = optimize.minimize(f, x0, method="BFGS", options={"gtol": 1e-10, "maxiter": 2000})
    res = optimize.minimize(f, res.x, method="Nelder-Mead",
                            options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000})
    nll, beta, S, sy = lmm_negloglik(res.x, blocks, d_a)
    return beta, sy, S, -nll


def lmm_information_beta(blocks, sigma_a, sigma_y):
    """Per-subject average Fisher information for beta: mean of X^T V^-1 X."""
    tot = 0.0
    for X, Z, y in blocks:
        V = Z @ sigma_a @ Z.T + sigma_y ** 2 * np.eye(len(y))
        tot = tot + X.T @ np.linalg.inv(V) @ X
    return tot / len(blocks)


def cox_partial_mle(z, delta, w, tol=1e-13):
    """Breslow-ties Cox partial likelihood maximized by plain Newton; time-constant covariates."""
    z, delta, w = np.asarray(z), np.asarray(delta), np.atleast_2d(np.asarray(w, float))
    if w.shape[0] != z.size:
        w = w.T
    beta = np.zeros(w.shape[1])
    times = np.unique(z[delta == 1])
    for _ in range(100):
        g = np.zeros_like(beta)
        H = np.zeros((beta.size, beta.size))
        eta = np.exp(w @ beta)
        for t in times:
            risk = z >= t
            dead = (z == t) & (delta == 1)
            s0 = eta[risk].sum()
            s1 = (eta[risk, None] * w[risk]).sum(0)
            s2 = (eta[risk, None, None] * w[risk, :, None] * w[risk, None, :]).sum(0)
            m = dead.sum()
            g += w[dead].sum(0) - m * s1 / s0
            H -= m * (s2 / s0 - np.outer(s1, s1) / s0 ** 2)
        step = np.linalg.solve(H, -g)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            break
    return beta


def cox_log_partial(beta, z, delta, w):
    z, delta = np.asarray(z), np.asarray(delta)
    w = np.atleast_2d(np.asarray(w, float))
    eta = w @ np.atleast_1d(beta)
    out = 0.0
    for t in np.unique(z[delta == 1]):
        dead = (z == t) & (delta == 1)
        out += eta[dead].sum() - dead.sum() * np.log(np.exp(eta[z >= t]).sum())
    return out


def breslow_textbook(beta, z, delta, w):
    """Jump sizes d_k / sum_{Z_j >= t_k} exp(w_j^T beta) at the distinct event times."""
    z, delta = np.asarray(z), np.asarray(delta)
    w = np.atleast_2d(np.asarray(w, float))
    eta = np.exp(w @ np.atleast_1d(beta))
    times = np.unique(z[delta == 1])
    return times, np.array([((z == t) & (delta == 1)).sum() / eta[z >= t].sum() for t in times])


def grid_integrate(f, lo=-10.0, hi=10.0, m=200001):
    """Composite trapezoid on a fine grid for a 1-d integrand vectorized over a."""
    a = np.linspace(lo, hi, m)
    v = f(a)
    return np.trapezoid(v, a) if hasattr(np, "trapezoid") else np.trapz(v, a)


def gaussian_subject_blocks(data):
    blocks = []
    for s in data.subjects:
        X, Z = s.design()
        if s.n_meas:
            blocks.append((X, Z, s.y))
    return blocks
