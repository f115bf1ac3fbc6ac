"""Observed-data log-likelihood, the posterior hazard weight Q, and analytic scores.

The per-subject functions (``complete_data_kernel``, ``subject_loglik``, ...)
take records and parameters directly.  The ``*_arrays`` variants work on an
:class:`~jointlab.quadrature.EStep` for a whole dataset and are what the fitter
uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .design import build_design
from .model import (Dataset, DomainError, ModelError, StepCumHazard, SubjectRecord,
                    ThetaParams)
from .quadrature import EStep, QuadRule, _single, e_step


@dataclass(frozen=True)
class Direction:
    """Perturbation (h1, h2): h1 moves theta, h2 reweights the jumps of Lambda."""

    h1: np.ndarray
    h2: Callable[[np.ndarray], np.ndarray]


def indicator(t0: float) -> Callable[[np.ndarray], np.ndarray]:
    """h2 = 1{t <= t0}."""
    return lambda t: (np.asarray(t) <= t0).astype(float)


def complete_data_kernel(a, subj: SubjectRecord, theta: ThetaParams, lam: StepCumHazard) -> float:
    """G(a, O; theta, Lambda): joint density of the subject's data and ``a``, without Lambda{Z}."""
    theta.check()
    a = np.atleast_1d(np.asarray(a, dtype=float))
    X, Xt = subj.design()
    resid = subj.y - X @ theta.beta - Xt @ a
    s2 = theta.sigma_y ** 2
    log_y = -0.5 * subj.n_meas * math.log(2 * math.pi * s2) - resid @ resid / (2 * s2)
    d = a.size
    sign, logdet = np.linalg.slogdet(theta.sigma_a)
    log_prior = (-0.5 * d * math.log(2 * math.pi) - 0.5 * logdet
                 - 0.5 * a @ np.linalg.solve(theta.sigma_a, a))
    eta_z = (theta.phi * subj.wt_path.at(subj.z)) @ a + subj.w_path.at(subj.z) @ theta.gamma
    cum = 0.0
    for t, size in zip(lam.jump_times, lam.jump_sizes):
        if t <= subj.z:
            cum += size * math.exp((theta.phi * subj.wt_path.at(t)) @ a
                                   + subj.w_path.at(t) @ theta.gamma)
    return math.exp(log_y + subj.delta * eta_z - cum + log_prior)


def subject_loglik(subj: SubjectRecord, theta: ThetaParams, lam: StepCumHazard,
                   quad: QuadRule, adaptive: bool = True) -> float:
    """log of Lambda{Z}^Delta * integral of G over ``a``."""
    theta.check()
    des = _single(subj, lam, theta.sigma_a.shape[0])
    return float(e_step(des, theta, lam.jump_sizes, quad, adaptive).loglik()[0])


def total_loglik(data: Dataset, theta: ThetaParams, lam: StepCumHazard, quad: QuadRule,
                 adaptive: bool = True) -> float:
    """Sum of subject log-likelihoods.

    Uses an exactly rounded sum so the result does not depend on subject order.
    """
    theta.check(data.spec)
    des = build_design(data, lam.jump_times)
    return loglik_sum(e_step(des, theta, lam.jump_sizes, quad, adaptive).loglik())


def loglik_sum(values: np.ndarray) -> float:
    return math.fsum(values.tolist())


def q_weight(z: float, subj: SubjectRecord, theta: ThetaParams, lam: StepCumHazard,
             quad: QuadRule, adaptive: bool = True, tau: float | None = None) -> float:
    """Posterior expectation of exp((phi o W~(z))^T a + W(z)^T gamma) given the subject's data."""
    if z < 0 or (tau is not None and z > tau):
        raise DomainError(f"z={z} outside [0, {tau}]")
    theta.check()
    des = _single(subj, lam, theta.sigma_a.shape[0])
    es = e_step(des, theta, lam.jump_sizes, quad, adaptive)
    mult = np.exp(es.a[0] @ (theta.phi * subj.wt_path.at(z)) + subj.w_path.at(z) @ theta.gamma)
    return float(es.post[0] @ mult)


def score_theta_arrays(es: EStep) -> np.ndarray:
    """Per-subject gradient of the log-likelihood in theta at fixed Lambda, shape (n, dim)."""
    des, th = es.design, es.theta
    spec = des.spec
    s2 = th.sigma_y ** 2
    Ea, Eaa = es.mean, es.second
    out = np.zeros((des.n, spec.dim_theta))

    xtr = des.zty - des.ztx @ th.beta
    rtr = des.yty - 2.0 * des.xty @ th.beta + np.einsum("p,npq,q->n", th.beta, des.xtx, th.beta)
    rss = rtr - 2.0 * np.einsum("nd,nd->n", Ea, xtr) + np.einsum("nde,nde->n", des.ztz, Eaa)
    out[:, 0] = -des.n_meas / th.sigma_y + rss / th.sigma_y ** 3

    sig_inv = np.linalg.inv(th.sigma_a)
    grad_sig = 0.5 * (sig_inv[None] @ Eaa @ sig_inv[None] - sig_inv[None])
    iu = np.triu_indices(spec.d_a)
    mult = np.where(iu[0] == iu[1], 1.0, 2.0)
    out[:, spec.block("sigma_a")] = grad_sig[:, iu[0], iu[1]] * mult

    out[:, spec.block("beta")] = (des.xty - des.xtx @ th.beta
                                  - np.einsum("ndp,nd->np", des.ztx, Ea)) / s2

    if des.times.size:
        rate = des.at_risk * es.jumps[None, :] * np.exp(es.lin)       # (n, K)
        qs = es.q_seg()
        out[:, spec.block("gamma")] = (des.delta[:, None] * des.wz
                                       - np.einsum("nk,nk,nkr->nr", rate, des.gather(qs), des.wk))
        cum = des.seg_sum(rate)                                        # (n, S)
        ea_seg = np.einsum("nm,nms,nmd->nsd", es.post, es.ewt, es.a)   # E[e^{..} a] per segment
        out[:, spec.block("phi")] = (des.delta[:, None] * des.wtz * Ea
                                     - np.einsum("ns,nsd,nsd->nd", cum, des.wt_seg, ea_seg))
    else:
        out[:, spec.block("gamma")] = des.delta[:, None] * des.wz
        out[:, spec.block("phi")] = des.delta[:, None] * des.wtz * Ea
    return out


def score_lambda_arrays(es: EStep, h2: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Per-subject derivative along Lambda_eps = integral of (1 + eps h2) dLambda, shape (n,)."""
    des = es.design
    h_t = np.asarray(h2(des.times), dtype=float)
    h_z = np.asarray(h2(des.z), dtype=float)
    comp = np.einsum("nk,k,k,nk->n", des.at_risk, es.jumps, h_t, es.q()) if des.times.size else 0.0
    return des.delta * h_z - comp


def score_theta(subj: SubjectRecord, theta: ThetaParams, lam: StepCumHazard, quad: QuadRule,
                adaptive: bool = True) -> np.ndarray:
    theta.check()
    des = _single(subj, lam, theta.sigma_a.shape[0])
    es = e_step(des, theta, lam.jump_sizes, quad, adaptive)
    es.loglik()  # raises when the event time is not a jump
    return score_theta_arrays(es)[0]


def score_lambda(subj: SubjectRecord, theta: ThetaParams, lam: StepCumHazard,
                 h2: Callable[[np.ndarray], np.ndarray], quad: QuadRule,
                 adaptive: bool = True) -> float:
    theta.check()
    des = _single(subj, lam, theta.sigma_a.shape[0])
    es = e_step(des, theta, lam.jump_sizes, quad, adaptive)
    es.loglik()
    return float(score_lambda_arrays(es, h2)[0])


def directional_score(subj: SubjectRecord, theta: ThetaParams, lam: StepCumHazard,
                      direction: Direction, quad: QuadRule) -> float:
    """l_theta^T h1 + l_Lambda[h2] for one subject."""
    h1 = np.asarray(direction.h1, dtype=float)
    if h1.shape != (theta.to_vector().size,):
        raise ModelError("h1 has the wrong length")
    return float(score_theta(subj, theta, lam, quad) @ h1
                 + score_lambda(subj, theta, lam, direction.h2, quad))
