import numpy as np
import pytest

from jointlab.design import build_design
from jointlab.em import (FitConfig, InitializationError, InvalidDataError, breslow_update,
                         em_fit, init_params, m_step_gaussian, m_step_hazard,
                         m_step_hazard_arrays, nelson_aalen_jumps)
from jointlab.likelihood import indicator, score_lambda_arrays, score_theta_arrays, total_loglik
from jointlab.model import Dataset, ModelSpec, StepCumHazard, ThetaParams
from jointlab.quadrature import PosteriorSummary, e_step, gauss_hermite_rule
from jointlab.sim import CovariateSpec, SimScenario, default_scenario, replicate_seed, simulate

from conftest import TIGHT, dataset, make_subject, one_dim_theta
from oracles import (breslow_textbook, cox_partial_mle, gaussian_subject_blocks, lmm_mle)

RULE = gauss_hermite_rule(20, 1)


def check_fit_contracts(fit, data, config=None):
    """Ascent, self-consistency, boundedness and stationarity of a converged fit."""
    config = config or FitConfig()
    assert fit.converged
    assert np.all(np.diff(fit.loglik_trace) >= -1e-8)
    assert fit.diagnostics["self_consistency"] < 1e-8
    np.testing.assert_array_equal(fit.lambda_hat.jump_times, data.event_times())
    assert 0 < fit.lambda_hat.total() < 1e6
    lam2 = breslow_update(data, fit.theta_hat, fit.lambda_hat, config.rule(data.spec.d_a))
    assert np.max(np.abs(lam2.jump_sizes - fit.lambda_hat.jump_sizes)) < 1e-8
    des = build_design(data)
    es = e_step(des, fit.theta_hat, fit.lambda_hat.jump_sizes, config.rule(data.spec.d_a))
    score = score_theta_arrays(es).mean(axis=0)
    if config.fix_phi_zero:
        score = np.delete(score, np.arange(score.size)[data.spec.block("phi")])
    assert np.max(np.abs(score)) < 1e-4
    t0 = float(np.median(data.event_times()))
    for h2 in (lambda t: np.ones_like(np.asarray(t, float)), indicator(t0)):
        assert abs(score_lambda_arrays(es, h2).mean()) < 1e-4


# --- init_params ---------------------------------------------------------------------

def test_init_exact_interpolation_hits_floor():
    beta = np.array([1.5, -0.5])
    subs = []
    for i in range(4):
        x = (1.0, float(i))
        y = [beta @ x] * 2
        subs.append(make_subject([0.0, 0.5], y, x=x, z=1.0, delta=1, sid=i))
    theta = init_params(dataset(subs))
    np.testing.assert_allclose(theta.beta, beta, rtol=1e-12)
    assert theta.sigma_y == 1e-6
    assert np.all(theta.gamma == 0) and np.all(theta.phi == 0)


def test_init_intercept_is_mean():
    ys = [[1.0, 2.0], [4.0], [0.5, 0.5, 3.0]]
    subs = [make_subject(np.arange(len(y)) * 0.2, y, x=(1.0, 0.0), z=1.0, delta=1, sid=i)
            for i, y in enumerate(ys)]
    subs = [make_subject(s.meas_times, s.y, x=(1.0,), z=1.0, delta=1, sid=s.id) for s in subs]
    theta = init_params(dataset(subs))
    assert theta.beta[0] == pytest.approx(np.mean(np.concatenate(ys)), rel=1e-14)


def test_init_needs_measurements():
    subs = [make_subject([], [], z=1.0, delta=1, sid=i) for i in range(3)]
    with pytest.raises(InitializationError):
        init_params(dataset(subs))


def cluster_robust_se(data, beta):
    X = np.vstack([s.design()[0] for s in data.subjects if s.n_meas])
    bread = np.linalg.inv(X.T @ X)
    meat = sum(np.outer(u, u) for u in (s.design()[0].T @ (s.y - s.design()[0] @ beta)
                                        for s in data.subjects if s.n_meas))
    return np.sqrt(np.diag(bread @ meat @ bread))


def init_coverage(phi0, naive):
    scen = default_scenario(2024, phi=[phi0])
    hits = 0
    for k in range(100):
        data = simulate(scen, 200, replicate_seed(2024, k))
        beta = init_params(data).beta
        if naive:
            X = np.vstack([s.design()[0] for s in data.subjects if s.n_meas])
            y = np.concatenate([s.y for s in data.subjects])
            s2 = np.sum((y - X @ beta) ** 2) / (y.size - beta.size)
            se = np.sqrt(np.diag(np.linalg.inv(X.T @ X)) * s2)
        else:
            se = cluster_robust_se(data, beta)
        hits += np.all(np.abs(beta - scen.theta_0.beta) <= 3 * se)
    return hits


@pytest.mark.xfail(strict=True, reason="pooled least squares ignores informative drop-out: "
                   "subjects with large random effects die early, biasing the intercept")
def test_init_within_three_pooled_se_joint_scenario():
    assert init_coverage(0.7, naive=True) >= 95


def test_init_within_three_robust_se_without_dropout_dependence():
    assert init_coverage(0.0, naive=False) >= 95


# --- Breslow ---------------------------------------------------------------------------

def tiny(deltas, w=None):
    subs = [make_subject([], [], w=(0.0,) if w is None else (w[i],), z=float(i + 1),
                         delta=d, sid=i) for i, d in enumerate(deltas)]
    return dataset(subs, tau=3.0)


def test_nelson_aalen_examples():
    theta = one_dim_theta()
    data = tiny([1, 1, 1])
    lam = breslow_update(data, theta, StepCumHazard([1.0, 2.0, 3.0], [1.0, 1.0, 1.0]), RULE)
    np.testing.assert_allclose(lam.jump_sizes, [1 / 3, 1 / 2, 1.0], rtol=1e-15)
    data = tiny([1, 0, 1])
    lam = breslow_update(data, theta, StepCumHazard([1.0, 3.0], [0.5, 0.5]), RULE)
    np.testing.assert_array_equal(lam.jump_times, [1.0, 3.0])
    np.testing.assert_allclose(lam.jump_sizes, [1 / 3, 1.0], rtol=1e-15)
    np.testing.assert_allclose(nelson_aalen_jumps(build_design(data)), [1 / 3, 1.0], rtol=1e-15)


def test_breslow_matches_textbook_formula():
    rng = np.random.default_rng(8)
    n = 40
    z = np.round(rng.exponential(1.0, n), 2) + 0.01
    delta = (rng.random(n) < 0.7).astype(int)
    w = rng.normal(size=n)
    subs = [make_subject([], [], w=(w[i],), z=z[i], delta=delta[i], sid=i) for i in range(n)]
    data = dataset(subs)
    gamma = 0.6
    theta = one_dim_theta(gamma=(gamma,))
    times = data.event_times()
    lam = breslow_update(data, theta, StepCumHazard(times, np.full(times.size, 0.1)), RULE)
    t_ref, j_ref = breslow_textbook([gamma], z, delta, w[:, None])
    np.testing.assert_array_equal(lam.jump_times, t_ref)
    np.testing.assert_allclose(lam.jump_sizes, j_ref, rtol=1e-13)


# --- M-steps -------------------------------------------------------------------------

def test_gaussian_mstep_arithmetic():
    data = dataset([make_subject([0.0], [3.0], x=(1.0,), xt=(1.0,), z=1.0, delta=1)])
    beta, sigma_y, _ = m_step_gaussian(data, [PosteriorSummary(0.0, np.array([1.0]), np.array([[1.0]]))])
    assert beta[0] == pytest.approx(2.0, abs=1e-15)
    assert sigma_y == pytest.approx(0.0, abs=1e-6)
    post = PosteriorSummary(0.0, np.array([1.0]), np.array([[1.25]]))
    beta, sigma_y, _ = m_step_gaussian(data, [post])
    assert beta[0] == pytest.approx(2.0, abs=1e-15)
    assert sigma_y ** 2 == pytest.approx(0.25, rel=1e-14)
    data2 = dataset([make_subject([0.0], [3.0], z=1.0, delta=1, sid=i) for i in range(2)])
    posts = [PosteriorSummary(0.0, np.array([0.0]), np.array([[m]])) for m in (1.0, 3.0)]
    _, _, sigma_a = m_step_gaussian(data2, posts)
    assert sigma_a[0, 0] == pytest.approx(2.0, rel=1e-15)


def survival_only_data(seed=4, n=150):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(n, 2))
    t = rng.exponential(1.0 / (0.5 * np.exp(w @ [0.7, -0.4])))
    c = rng.uniform(0, 4, n)
    z = np.minimum(np.minimum(t, c), 3.0)
    delta = ((t <= c) & (t <= 3.0)).astype(int)
    subs = [make_subject([], [], xt=(0.0,), w=tuple(w[i]), z=z[i], delta=delta[i], sid=i)
            for i in range(n)]
    return dataset(subs, tau=3.0), z, delta, w


def test_hazard_mstep_is_cox_estimator():
    data, z, delta, w = survival_only_data()
    theta = ThetaParams(1.0, [[1.0]], [0.0], [0.0, 0.0], [0.0])
    times = data.event_times()
    lam = StepCumHazard(times, np.full(times.size, 0.05))
    config = FitConfig(fix_phi_zero=True)
    gamma, phi = m_step_hazard(data, theta, lam, RULE, config)
    np.testing.assert_allclose(gamma, cox_partial_mle(z, delta, w), atol=1e-6)
    assert phi[0] == 0.0


def test_hazard_mstep_without_covariates():
    subs = [make_subject([0.0], [0.3 * i], w=(0.0,), wt=(0.0,), z=1.0 + 0.1 * i, delta=i % 2, sid=i)
            for i in range(6)]
    data = dataset(subs)
    theta = one_dim_theta()
    times = data.event_times()
    gamma, phi = m_step_hazard(data, theta, StepCumHazard(times, np.full(times.size, 0.2)), RULE)
    assert gamma[0] == 0.0 and phi[0] == 0.0


def test_hazard_mstep_score_is_zero(default_data):
    des = build_design(default_data)
    theta = init_params(default_data).replace(phi=[0.3])
    es = e_step(des, theta, nelson_aalen_jumps(des), RULE)
    gamma, phi, jumps, grad = m_step_hazard_arrays(es, FitConfig())
    assert np.max(np.abs(grad)) < 1e-8
    assert np.all(jumps > 0)


# --- em_fit --------------------------------------------------------------------------

def test_decoupled_fit_matches_oracles():
    data = simulate(default_scenario(5, phi=[0.0]), 200)
    config = FitConfig(fix_phi_zero=True, tol_loglik=1e-13, tol_params=1e-9, max_iters=5000)
    fit = em_fit(data, config)
    check_fit_contracts(fit, data, config)
    beta, sy, S, _ = lmm_mle(gaussian_subject_blocks(data), 1)
    th = fit.theta_hat
    assert np.max(np.abs(th.beta - beta)) < 1e-6
    assert abs(th.sigma_y - sy) < 1e-6
    assert np.max(np.abs(th.sigma_a - S)) < 1e-6
    z = np.array([s.z for s in data.subjects])
    delta = np.array([s.delta for s in data.subjects])
    w = np.array([s.w_path.at(0.0) for s in data.subjects])
    assert abs(th.gamma[0] - cox_partial_mle(z, delta, w)[0]) < 1e-6
    _, jumps = breslow_textbook(th.gamma, z, delta, w)
    assert np.max(np.abs(fit.lambda_hat.jump_sizes - jumps)) < 1e-8
    assert th.phi[0] == 0.0


def test_joint_fit_contracts(default_data, default_fit):
    check_fit_contracts(default_fit, default_data, TIGHT)
    assert default_fit.loglik == pytest.approx(
        total_loglik(default_data, default_fit.theta_hat, default_fit.lambda_hat, RULE), abs=1e-9)


def test_fit_is_deterministic(default_data):
    a = em_fit(default_data)
    b = em_fit(default_data)
    np.testing.assert_array_equal(a.theta_hat.to_vector(), b.theta_hat.to_vector())
    np.testing.assert_array_equal(a.lambda_hat.jump_sizes, b.lambda_hat.jump_sizes)
    np.testing.assert_array_equal(a.loglik_trace, b.loglik_trace)


def test_forced_non_convergence(default_data):
    fit = em_fit(default_data, FitConfig(max_iters=1))
    assert not fit.converged and fit.iters == 1 and fit.loglik_trace.size == 1


def test_warm_start_at_fixed_point(default_data, default_fit):
    fit = em_fit(default_data, TIGHT, init=default_fit.theta_hat, init_lambda=default_fit.lambda_hat)
    assert fit.converged and fit.iters <= 2


def test_invalid_data_rejected():
    subs = [make_subject([0.0], [1.0], z=1.0, delta=0, sid=i) for i in range(3)]
    with pytest.raises(InvalidDataError) as err:
        em_fit(dataset(subs))
    assert any("no observed events" in f for f in err.value.findings)


def test_fit_with_time_varying_two_dim_random_effect():
    scen = SimScenario(
        spec=ModelSpec(p=2, d_a=2, r=1, s=2, tau=3.0),
        theta_0=ThetaParams(0.5, [[0.8, 0.1], [0.1, 0.3]], [1.0, 0.5], [0.4], [0.5, 0.3]),
        baseline=default_scenario().baseline,
        covariates=(CovariateSpec("trt", "bernoulli", (0.5,)),),
        paths={"x": ["1", "t"], "xt": ["1", "t"], "w": ["trt"], "wt": ["1", "t"]},
        meas_schedule=np.arange(0.0, 3.0, 0.5), censor_max=6.0, seed=3, trend_step=0.25)
    data = simulate(scen, 150)
    config = FitConfig(quad_points=10)
    fit = em_fit(data, config)
    check_fit_contracts(fit, data, config)


def scaled_y(data, c):
    subs = [make_subject(s.meas_times, s.y * c, x=s.x_path, xt=s.xt_path, w=s.w_path,
                         wt=s.wt_path, z=s.z, delta=s.delta, sid=s.id) for s in data.subjects]
    return Dataset(data.spec, subs)


def test_response_scale_equivariance():
    base = default_scenario(9)
    scen = SimScenario(ModelSpec(1, 1, 1, 1, 3.0),
                       ThetaParams(0.5, [[1.0]], [1.0], [0.5], [0.7]), base.baseline,
                       base.covariates, {"x": ["1"], "xt": ["1"], "w": ["trt"], "wt": ["1"]},
                       base.meas_schedule, base.censor_max, 9)
    data = simulate(scen, 200)
    c = 3.0
    a = em_fit(data, TIGHT).theta_hat
    fit_b = em_fit(scaled_y(data, c), TIGHT)
    b = fit_b.theta_hat
    assert b.beta[0] == pytest.approx(c * a.beta[0], abs=1e-4)
    assert b.sigma_y == pytest.approx(c * a.sigma_y, abs=1e-4)
    assert b.sigma_a[0, 0] == pytest.approx(c * c * a.sigma_a[0, 0], abs=1e-4)
    assert b.phi[0] == pytest.approx(a.phi[0] / c, abs=1e-4)
    assert b.gamma[0] == pytest.approx(a.gamma[0], abs=1e-4)
