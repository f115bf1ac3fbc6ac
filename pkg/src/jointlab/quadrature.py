"""Gauss-Hermite rules and posterior moments of the random effect.

Integrals over the random effect ``a`` are written against a standard normal
weight after the affine change of variables ``a = center + L b``.  With
``adaptive=True`` the center and scale come from the Gaussian posterior that
ignores the survival factor; otherwise from the N(0, Sigma_a) prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp

from .design import Design, build_design
from .model import (Dataset, ModelError, NumericalError, StepCumHazard, SubjectRecord,
                    ThetaParams)

LOG_2PI = np.log(2.0 * np.pi)
MAX_DIM = 4


class UnsupportedDimensionError(ModelError):
    pass


@dataclass(frozen=True, eq=False)
class QuadRule:
    """Tensor-product probabilists' Gauss-Hermite rule: sum(w f(x)) ~ E f(N(0, I))."""

    dim: int
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return self.weights.size

    @property
    def points(self) -> int:
        return int(round(self.size ** (1.0 / self.dim)))


@lru_cache(maxsize=32)
def _rule(m: int, dim: int) -> QuadRule:
    x, w = hermegauss(m)
    # exact symmetry about 0, so odd moments cancel pairwise
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    w = w / w.sum()
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    wgrid = np.meshgrid(*([w] * dim), indexing="ij")
    weights = np.prod(np.stack([g.ravel() for g in wgrid], axis=1), axis=1)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadRule(dim, nodes, weights)


def gauss_hermite_rule(m: int, dim: int) -> QuadRule:
    if dim < 1 or dim > MAX_DIM:
        raise UnsupportedDimensionError(f"random-effect dimension {dim} not in [1, {MAX_DIM}]")
    if not 1 <= m <= 64:
        raise ModelError(f"points per dimension must be in [1, 64], got {m}")
    return _rule(int(m), int(dim))


@dataclass
class PosteriorSummary:
    log_norm: float
    mean: np.ndarray
    second_moment: np.ndarray
    extra: dict[str, float] = field(default_factory=dict)

    @property
    def cov(self) -> np.ndarray:
        return self.second_moment - np.outer(self.mean, self.mean)


@dataclass(eq=False)
class EStep:
    """Quadrature representation of every subject's posterior over ``a``.

    ``a[i, j]`` are the nodes for subject ``i``; ``post[i, j]`` their normalized
    posterior weights; ``ewt[i, j, s] = exp((phi o W~_s)^T a[i, j])`` for each
    distinct W~ value the subject takes on at hazard jump times.
    """

    design: Design
    theta: ThetaParams
    jumps: np.ndarray
    a: np.ndarray
    post: np.ndarray
    log_norm: np.ndarray
    ewt: np.ndarray
    lin: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return np.einsum("nm,nmd->nd", self.post, self.a)

    @property
    def second(self) -> np.ndarray:
        return np.einsum("nm,nmd,nme->nde", self.post, self.a, self.a)

    def q_seg(self) -> np.ndarray:
        """E[exp((phi o W~_s)^T a) | O_i] for each segment, shape (n, S)."""
        return np.einsum("nm,nms->ns", self.post, self.ewt)

    def q(self) -> np.ndarray:
        """Posterior-expected hazard multiplier at each jump time, shape (n, K)."""
        return self.design.gather(self.q_seg()) * np.exp(self.lin)

    def loglik(self) -> np.ndarray:
        """Per-subject log-likelihood including the Lambda{Z}^Delta factor."""
        des = self.design
        out = self.log_norm.copy()
        ev = des.delta == 1
        if np.any(ev & (des.event_k < 0)):
            bad = des.ids[int(np.flatnonzero(ev & (des.event_k < 0))[0])]
            from .model import StructuralError
            raise StructuralError(f"subject {bad!r}: event time not in hazard support")
        out[ev] += np.log(self.jumps[des.event_k[ev]])
        return out


def gaussian_posterior_arrays(des: Design, theta: ThetaParams):
    """Closed-form Gaussian posterior of ``a`` ignoring the survival factor.

    Returns (mean, cov, precision, const) where ``const[i]`` collects every term of
    log G that does not depend on ``a`` once the Gaussian factors are written as
    ``-(a - m)^T P (a - m) / 2``.
    """
    s2 = theta.sigma_y ** 2
    d = theta.sigma_a.shape[0]
    chol = np.linalg.cholesky(theta.sigma_a)
    sig_inv = np.linalg.inv(theta.sigma_a)
    logdet_sig = 2.0 * np.log(np.diag(chol)).sum()
    xtr = des.zty - des.ztx @ theta.beta
    rtr = des.yty - 2.0 * des.xty @ theta.beta + np.einsum("p,npq,q->n", theta.beta, des.xtx, theta.beta)
    prec = sig_inv[None] + des.ztz / s2
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    mean = np.einsum("nde,ne->nd", cov, xtr) / s2
    quad = rtr / s2 - np.einsum("nd,nd->n", mean, xtr) / s2
    const = (-0.5 * des.n_meas * (LOG_2PI + np.log(s2)) - 0.5 * logdet_sig - 0.5 * d * LOG_2PI
             - 0.5 * quad)
    return mean, cov, prec, const


LAPLACE_MAX_ITERS = 50
LAPLACE_TOL = 1e-10


def laplace_center(mean, prec, u, cum, u_z, delta):
    """Mode and inverse negative Hessian of the log posterior of ``a``.

    The log density is ``-(a - m)^T P (a - m) / 2 + delta u_z^T a - sum_s cum_s exp(u_s^T a)``,
    which is strictly concave, so damped Newton from the Gaussian mean converges.
    With no survival dependence on ``a`` it returns (mean, P^-1) exactly.
    """
    a = mean.copy()
    lin_z = delta[:, None] * u_z

    def value(x):
        dev = x - mean
        e = np.exp(np.einsum("nd,nsd->ns", x, u))
        return -0.5 * np.einsum("nd,nde,ne->n", dev, prec, dev) + (lin_z * x).sum(1) \
            - (cum * e).sum(1), e

    f, e = value(a)
    for _ in range(LAPLACE_MAX_ITERS):
        ce = cum * e
        grad = -np.einsum("nde,ne->nd", prec, a - mean) + lin_z - np.einsum("ns,nsd->nd", ce, u)
        hess = prec + np.einsum("ns,nsd,nse->nde", ce, u, u)
        step = np.linalg.solve(hess, grad[..., None])[..., 0]
        t = np.ones(a.shape[0])
        for _ in range(30):
            cand = a + t[:, None] * step
            f_new, e_new = value(cand)
            worse = ~(f_new >= f - 1e-12 * np.abs(f))
            if not worse.any():
                break
            t = np.where(worse, 0.5 * t, t)
        a, f, e = cand, f_new, e_new
        if np.max(np.abs(t[:, None] * step)) < LAPLACE_TOL:
            break
    hess = prec + np.einsum("ns,nsd,nse->nde", cum * e, u, u)
    cov = np.linalg.inv(hess)
    return a, 0.5 * (cov + np.swapaxes(cov, 1, 2))


def e_step(des: Design, theta: ThetaParams, jumps: np.ndarray, rule: QuadRule,
           adaptive: bool = True) -> EStep:
    """Evaluate every subject's integrand of G on its quadrature nodes.

    Adaptive nodes sit at the Laplace approximation of each subject's posterior
    (mode and curvature of the full integrand); otherwise at the prior.
    """
    jumps = np.asarray(jumps, dtype=float)
    mean, cov, prec, const = gaussian_posterior_arrays(des, theta)
    n, d = mean.shape
    b = rule.nodes
    lin = des.wk @ theta.gamma if des.times.size else np.zeros((n, 0))
    u = theta.phi * des.wt_seg                                     # (n, S, d)
    cum = des.seg_sum(des.at_risk * jumps[None, :] * np.exp(lin))  # (n, S)
    u_z = theta.phi * des.wtz
    if adaptive:
        if np.any(theta.phi != 0) and des.times.size:
            center, cov = laplace_center(mean, prec, u, cum, u_z, des.delta)
        else:
            center = mean
        L = np.linalg.cholesky(cov)
    else:
        L = np.broadcast_to(np.linalg.cholesky(theta.sigma_a), (n, d, d))
        center = np.zeros_like(mean)
    a = center[:, None, :] + np.einsum("nde,me->nmd", L, b)
    dev = a - mean[:, None, :]
    logdet_l = np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    log_base = (np.log(rule.weights)[None] + 0.5 * np.einsum("md,md->m", b, b)[None]
                + 0.5 * d * LOG_2PI + logdet_l[:, None])
    log_gauss = const[:, None] - 0.5 * np.einsum("nmd,nde,nme->nm", dev, prec, dev)

    ewt = np.exp(np.einsum("nmd,nsd->nms", a, u))
    surv = (des.delta[:, None] * (np.einsum("nmd,nd->nm", a, u_z)
                                  + (des.wz @ theta.gamma)[:, None])
            - np.einsum("nms,ns->nm", ewt, cum))
    logw = log_base + log_gauss + surv
    log_norm = logsumexp(logw, axis=1)
    bad = ~np.isfinite(log_norm)
    if np.any(bad):
        raise NumericalError("quadrature weights underflow", des.ids[int(np.flatnonzero(bad)[0])])
    post = np.exp(logw - log_norm[:, None])
    return EStep(des, theta, jumps, a, post, log_norm, ewt, lin)


def closed_form_gaussian_posterior(subj: SubjectRecord, theta: ThetaParams):
    """(mean, covariance) of ``a`` given Y alone: the posterior with no survival factor."""
    theta.check()
    X, Xt = subj.design()
    s2 = theta.sigma_y ** 2
    V = np.linalg.inv(np.linalg.inv(theta.sigma_a) + Xt.T @ Xt / s2)
    m = V @ Xt.T @ (subj.y - X @ theta.beta) / s2
    return m, V


def _single(subj: SubjectRecord, lam: StepCumHazard, d_a: int, tau: float | None = None) -> Design:
    from .model import ModelSpec
    spec = ModelSpec(subj.x_path.dim, d_a, subj.w_path.dim, subj.wt_path.dim,
                     tau if tau is not None else max(subj.z, lam.jump_times.max(initial=0.0), 1.0))
    return build_design(Dataset(spec, [subj]), lam.jump_times)


def posterior_moments(subj: SubjectRecord, theta: ThetaParams, lam: StepCumHazard,
                      rule: QuadRule, center: bool = True,
                      functionals: dict[str, Callable[[np.ndarray], np.ndarray]] | None = None,
                      ) -> PosteriorSummary:
    """Posterior summary of ``a`` under the density proportional to G(a, O; theta, Lambda).

    ``functionals`` maps names to vectorized functions of an (m, d_a) node array;
    their posterior expectations land in ``extra``.
    """
    theta.check()
    des = _single(subj, lam, theta.sigma_a.shape[0])
    es = e_step(des, theta, lam.jump_sizes, rule, adaptive=center)
    extra = {}
    for name, f in (functionals or {}).items():
        extra[name] = float(es.post[0] @ np.asarray(f(es.a[0]), dtype=float))
    return PosteriorSummary(float(es.log_norm[0]), es.mean[0], es.second[0], extra)
