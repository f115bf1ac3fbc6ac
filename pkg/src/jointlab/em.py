"""NPMLE by EM: closed-form Gaussian M-step, Newton for (gamma, phi), Breslow plug-in for Lambda."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .design import Design, build_design
from .likelihood import loglik_sum
from .model import (Dataset, ModelError, StepCumHazard, ThetaParams, validate_dataset)
from .quadrature import EStep, PosteriorSummary, QuadRule, e_step, gauss_hermite_rule

log = logging.getLogger(__name__)

SIGMA_Y_FLOOR = 1e-6
SIGMA_A_EIG_FLOOR = 1e-10
LAMBDA_POLISH_TOL = 1e-10
LAMBDA_POLISH_MAX = 200


class FitError(RuntimeError):
    pass


class InitializationError(FitError):
    pass


class InvalidDataError(ModelError):
    def __init__(self, findings: list[str]):
        self.findings = findings
        super().__init__("invalid dataset:\n  " + "\n  ".join(findings))


@dataclass
class FitConfig:
    quad_points: int = 20
    adaptive: bool = True
    max_iters: int = 500
    tol_loglik: float = 1e-8
    tol_params: float = 1e-6
    newton_max: int = 25
    newton_tol: float = 1e-10
    fix_phi_zero: bool = False
    theta_norm_bound: float | None = None

    def __post_init__(self):
        for name in ("tol_loglik", "tol_params", "newton_tol"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be positive")
        if self.max_iters < 1 or self.newton_max < 1:
            raise ModelError("iteration caps must be at least 1")

    def rule(self, dim: int) -> QuadRule:
        return gauss_hermite_rule(self.quad_points, dim)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown fit config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FitResult:
    theta_hat: ThetaParams
    lambda_hat: StepCumHazard
    loglik_trace: np.ndarray
    converged: bool
    iters: int
    loglik: float
    diagnostics: dict = field(default_factory=dict)


def init_params(data: Dataset) -> ThetaParams:
    """Pooled least squares for (beta, sigma_y); Sigma_a = residual variance * I; gamma = phi = 0."""
    spec = data.spec
    xtx = np.zeros((spec.p, spec.p))
    xty = np.zeros(spec.p)
    yty = 0.0
    n_meas = 0
    for s in data.subjects:
        X, _ = s.design()
        xtx += X.T @ X
        xty += X.T @ s.y
        yty += s.y @ s.y
        n_meas += s.n_meas
    if n_meas == 0:
        raise InitializationError("no longitudinal measurements; supply a starting theta")
    if spec.p and np.linalg.matrix_rank(xtx) < spec.p:
        raise InitializationError("pooled design X^T X is singular; supply a starting theta")
    beta = np.linalg.solve(xtx, xty) if spec.p else np.zeros(0)
    rss = max(yty - 2 * beta @ xty + beta @ xtx @ beta, 0.0)
    sigma_y = max(np.sqrt(rss / n_meas), SIGMA_Y_FLOOR)
    return ThetaParams(sigma_y, np.eye(spec.d_a) * sigma_y ** 2, beta,
                       np.zeros(spec.r), np.zeros(spec.s))


def nelson_aalen_jumps(des: Design) -> np.ndarray:
    return des.d_k / des.at_risk.sum(axis=0)


# --- Breslow -----------------------------------------------------------------

def breslow_jumps(es: EStep) -> np.ndarray:
    """d_t / sum_i 1{Z_i >= t} Q(t, O_i) at every jump time of the design."""
    des = es.design
    denom = np.einsum("nk,nk->k", des.at_risk, es.q())
    if np.any(denom[des.d_k > 0] <= 0):
        raise FitError("empty risk set at an event time")
    return des.d_k / np.where(denom > 0, denom, 1.0)


def breslow_update(data: Dataset, theta: ThetaParams, lam_current: StepCumHazard,
                   quad: QuadRule, adaptive: bool = True) -> StepCumHazard:
    theta.check(data.spec)
    events = data.event_times()
    missing = np.setdiff1d(events, lam_current.jump_times)
    if missing.size:
        raise ModelError(f"current hazard has no jump at event times {missing[:5].tolist()}")
    des = build_design(data, lam_current.jump_times)
    jumps = breslow_jumps(e_step(des, theta, lam_current.jump_sizes, quad, adaptive))
    keep = des.d_k > 0
    return StepCumHazard(des.times[keep], jumps[keep])


def profile_lambda(des: Design, theta: ThetaParams, jumps: np.ndarray, rule: QuadRule,
                   adaptive: bool = True, tol: float = LAMBDA_POLISH_TOL,
                   max_sweeps: int = LAMBDA_POLISH_MAX):
    """Iterate the Breslow map at fixed theta.

    Returns (jumps, EStep at those jumps, sweeps, last max jump change).
    """
    es = e_step(des, theta, jumps, rule, adaptive)
    change = np.inf
    for sweep in range(1, max_sweeps + 1):
        new = breslow_jumps(es)
        change = float(np.max(np.abs(new - jumps))) if new.size else 0.0
        jumps = new
        es = e_step(des, theta, jumps, rule, adaptive)
        if change < tol:
            return jumps, es, sweep, change
    return jumps, es, max_sweeps, change


# --- M-steps -----------------------------------------------------------------

def gaussian_mstep_arrays(des: Design, Ea: np.ndarray, Eaa: np.ndarray):
    """Complete-data maximizers of (beta, sigma_y, Sigma_a) with a replaced by posterior moments."""
    n_total = des.n_meas.sum()
    if n_total == 0:
        raise FitError("no longitudinal measurements: sigma_y is not identifiable")
    sigma_a = Eaa.mean(axis=0)
    sigma_a = 0.5 * (sigma_a + sigma_a.T)
    xtx = des.xtx.sum(axis=0)
    rhs = (des.xty - np.einsum("ndp,nd->np", des.ztx, Ea)).sum(axis=0)
    if des.spec.p:
        if np.linalg.matrix_rank(xtx) < des.spec.p:
            raise FitError("pooled design X^T X is singular")
        beta = np.linalg.solve(xtx, rhs)
    else:
        beta = np.zeros(0)
    rss = (des.yty - 2 * des.xty @ beta + np.einsum("p,npq,q->n", beta, des.xtx, beta)
           - 2 * np.einsum("nd,nd->n", Ea, des.zty - des.ztx @ beta)
           + np.einsum("nde,nde->n", des.ztz, Eaa))
    sigma2 = rss.sum() / n_total
    return beta, float(np.sqrt(max(sigma2, 0.0))), sigma_a


def m_step_gaussian(data: Dataset, posteriors: list[PosteriorSummary]):
    """(beta, sigma_y, Sigma_a) from one posterior summary per subject."""
    if len(posteriors) != len(data.subjects):
        raise ModelError("need one posterior summary per subject")
    des = build_design(data, np.empty(0))
    Ea = np.array([p.mean for p in posteriors]).reshape(des.n, -1)
    Eaa = np.array([p.second_moment for p in posteriors]).reshape(des.n, Ea.shape[1], -1)
    return gaussian_mstep_arrays(des, Ea, Eaa)


class _HazardObjective:
    """Breslow-profiled expected complete-data survival log-likelihood in (gamma, phi).

    Posterior node weights are held fixed at the E-step values.
    """

    def __init__(self, es: EStep, fix_phi_zero: bool):
        self.es = es
        self.des = es.design
        self.fix_phi_zero = fix_phi_zero
        des = self.des
        self.r, self.s = des.spec.r, des.spec.s
        self.ev = des.d_k > 0
        Ea = es.mean
        self.lin_const = np.concatenate([(des.delta[:, None] * des.wz).sum(axis=0),
                                         (des.delta[:, None] * des.wtz * Ea).sum(axis=0)])
        # wt_s o a_j for every segment and node: (n, M, S, s)
        self.u_phi = des.wt_seg[:, None, :, :] * es.a[:, :, None, :]

    @property
    def dim(self) -> int:
        return self.r if self.fix_phi_zero else self.r + self.s

    def split(self, x):
        gamma = x[: self.r]
        phi = np.zeros(self.s) if self.fix_phi_zero else x[self.r:]
        return gamma, phi

    def evaluate(self, x, derivs: bool = True):
        des, es = self.des, self.es
        gamma, phi = self.split(x)
        lin = des.wk @ gamma
        R = des.at_risk * np.exp(lin)                                   # (n, K)
        ewt = np.exp(np.einsum("nmsd,d->nms", self.u_phi, phi))        # (n, M, S)
        pe = es.post[:, :, None] * ewt                                  # (n, M, S)
        A = des.gather(pe.sum(axis=1))                                  # (n, K)
        S_k = np.einsum("nk,nk->k", R, A)
        if np.any(S_k[self.ev] <= 0):
            raise FitError("empty risk set at an event time")
        Sk = S_k[self.ev]
        dk = des.d_k[self.ev]
        value = float(x @ self.lin_const[: self.dim] - dk @ np.log(Sk))
        jumps = np.zeros_like(S_k)
        jumps[self.ev] = dk / Sk
        if not derivs:
            return value, jumps
        q = self.dim
        r = self.r
        G = np.zeros((S_k.size, q))
        H = np.zeros((S_k.size, q, q))
        G[:, :r] = np.einsum("nk,nk,nkr->kr", R, A, des.wk)
        H[:, :r, :r] = np.einsum("nk,nk,nkr,nkt->krt", R, A, des.wk, des.wk)
        if not self.fix_phi_zero:
            B = des.gather(np.einsum("nms,nmsd->nsd", pe, self.u_phi))            # (n, K, s)
            C = des.gather(np.einsum("nms,nmsd,nmse->nsde", pe, self.u_phi, self.u_phi))
            G[:, r:] = np.einsum("nk,nkd->kd", R, B)
            H[:, :r, r:] = np.einsum("nk,nkr,nkd->krd", R, des.wk, B)
            H[:, r:, :r] = np.swapaxes(H[:, :r, r:], 1, 2)
            H[:, r:, r:] = np.einsum("nk,nkde->kde", R, C)
        Gk, Hk = G[self.ev], H[self.ev]
        grad = self.lin_const[:q] - np.einsum("k,kq->q", dk / Sk, Gk)
        hess = -(np.einsum("k,kqt->qt", dk / Sk, Hk)
                 - np.einsum("k,kq,kt->qt", dk / Sk ** 2, Gk, Gk))
        return value, jumps, grad, 0.5 * (hess + hess.T)


def _newton_hazard(es: EStep, x0: np.ndarray, config: FitConfig, diag: dict):
    obj = _HazardObjective(es, config.fix_phi_zero)
    x = x0.copy()
    if obj.dim == 0:
        value, jumps = obj.evaluate(x, derivs=False)
        return x, jumps, np.zeros(0)
    value, jumps, grad, hess = obj.evaluate(x)
    for _ in range(config.newton_max):
        if np.max(np.abs(grad)) < config.newton_tol:
            break
        step = None
        try:
            eig = np.linalg.eigvalsh(hess)
            h = hess
            if eig.max() >= 0:
                h = hess - (eig.max() + 1e-8 * max(1.0, abs(eig.min()))) * np.eye(obj.dim)
            step = -np.linalg.solve(h, grad)
        except np.linalg.LinAlgError:
            step = None
        if step is None or not np.all(np.isfinite(step)):
            diag["hazard_gradient_fallbacks"] = diag.get("hazard_gradient_fallbacks", 0) + 1
            step = 0.5 * grad / max(1.0, np.abs(grad).max())
        t = 1.0
        improved = False
        for _ in range(40):
            cand = x + t * step
            try:
                c_val, c_jumps = obj.evaluate(cand, derivs=False)
            except (FitError, FloatingPointError):
                c_val = -np.inf
            if np.isfinite(c_val) and c_val >= value - 1e-12 * max(1.0, abs(value)):
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        x = cand
        value, jumps, grad, hess = obj.evaluate(x)
    return x, jumps, grad


def m_step_hazard_arrays(es: EStep, config: FitConfig, diag: dict | None = None):
    """Return (gamma, phi, jumps, profiled score) maximizing the expected survival log-likelihood."""
    diag = {} if diag is None else diag
    th = es.theta
    r = es.design.spec.r
    x0 = th.gamma.copy() if config.fix_phi_zero else np.concatenate([th.gamma, th.phi])
    x, jumps, grad = _newton_hazard(es, x0, config, diag)
    gamma = x[:r]
    phi = np.zeros_like(th.phi) if config.fix_phi_zero else x[r:]
    return gamma, phi, jumps, grad


def m_step_hazard(data: Dataset, theta_current: ThetaParams, lam_current: StepCumHazard,
                  quad: QuadRule, config: FitConfig | None = None):
    """(gamma, phi) solving the conditional score equations of the survival factor."""
    config = config or FitConfig()
    des = build_design(data, lam_current.jump_times)
    es = e_step(des, theta_current, lam_current.jump_sizes, quad, config.adaptive)
    gamma, phi, _, _ = m_step_hazard_arrays(es, config)
    return gamma, phi


# --- driver -------------------------------------------------------------------

def _floor_theta(beta, sigma_y, sigma_a, gamma, phi, flags: set) -> ThetaParams:
    if sigma_y < SIGMA_Y_FLOOR:
        sigma_y = SIGMA_Y_FLOOR
        flags.add("sigma_y_floor")
    w, V = np.linalg.eigh(sigma_a)
    if w.min() < SIGMA_A_EIG_FLOOR:
        w = np.maximum(w, SIGMA_A_EIG_FLOOR)
        sigma_a = (V * w) @ V.T
        flags.add("sigma_a_floor")
    sigma_a = 0.5 * (sigma_a + sigma_a.T)
    return ThetaParams(sigma_y, sigma_a, beta, gamma, phi)


def em_fit(data: Dataset, config: FitConfig | None = None, init: ThetaParams | None = None,
           init_lambda: StepCumHazard | None = None) -> FitResult:
    """Maximize the NPMLE log-likelihood by EM.

    One sweep is: E-step, Gaussian M-step, Newton M-step for (gamma, phi) with
    Breslow-profiled jumps, then one Breslow plug-in update at the new theta.
    After convergence the jumps are iterated to the Breslow fixed point at
    theta_hat so that (theta_hat, lambda_hat) is also the profile maximizer.
    """
    config = config or FitConfig()
    findings = validate_dataset(data)
    if findings:
        raise InvalidDataError(findings)
    spec = data.spec
    rule = config.rule(spec.d_a)
    des = build_design(data)
    theta = init if init is not None else init_params(data)
    theta.check(spec)
    if config.fix_phi_zero:
        theta = theta.replace(phi=np.zeros(spec.s))
    if init_lambda is not None:
        jumps = StepCumHazard(init_lambda.jump_times, init_lambda.jump_sizes)
        if jumps.jump_times.shape != des.times.shape or np.any(
                np.abs(jumps.jump_times - des.times) > 1e-12):
            raise ModelError("initial hazard must jump exactly at the distinct event times")
        jumps = jumps.jump_sizes.copy()
    else:
        jumps = nelson_aalen_jumps(des)

    flags: set[str] = set()
    diag: dict = {}
    es = e_step(des, theta, jumps, rule, config.adaptive)
    ll_prev = loglik_sum(es.loglik())
    trace = []
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        beta, sigma_y, sigma_a = gaussian_mstep_arrays(des, es.mean, es.second)
        gamma, phi, m_jumps, _ = m_step_hazard_arrays(es, config, diag)
        new_theta = _floor_theta(beta, sigma_y, sigma_a, gamma, phi, flags)
        es_mid = e_step(des, new_theta, m_jumps, rule, config.adaptive)
        new_jumps = breslow_jumps(es_mid)
        es = e_step(des, new_theta, new_jumps, rule, config.adaptive)
        ll = loglik_sum(es.loglik())
        trace.append(ll)
        dpar = max(float(np.max(np.abs(new_theta.to_vector() - theta.to_vector()))),
                   float(np.max(np.abs(new_jumps - jumps))) if jumps.size else 0.0)
        dll = abs(ll - ll_prev)
        theta, jumps, ll_prev_old, ll_prev = new_theta, new_jumps, ll_prev, ll
        log.debug("iter %d loglik %.10f dll %.3g dpar %.3g", it, ll, dll, dpar)
        if dll <= config.tol_loglik * max(abs(ll_prev_old), 1.0) and dpar < config.tol_params:
            converged = True
            break

    diag["polish_sweeps"] = 0
    if converged:
        jumps, es, sweeps, change = profile_lambda(des, theta, jumps, rule, config.adaptive)
        diag["polish_sweeps"] = sweeps
        diag["polish_change"] = change
    diag["self_consistency"] = float(np.max(np.abs(breslow_jumps(es) - jumps)))
    diag["floors"] = sorted(flags)
    if config.theta_norm_bound is not None and np.linalg.norm(theta.to_vector()) > config.theta_norm_bound:
        diag["warnings"] = [f"||theta_hat|| exceeds {config.theta_norm_bound}"]
    trace = np.array(trace)
    diag["max_trace_drop"] = float(max(0.0, np.max(-np.diff(trace)))) if trace.size > 1 else 0.0
    return FitResult(theta, StepCumHazard(des.times, jumps), trace, converged, it,
                     loglik_sum(es.loglik()), diag)

