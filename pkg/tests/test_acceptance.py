"""Acceptance suite: one PASS/FAIL line per criterion in the terminal summary.

Monte Carlo criteria run the full replicate counts and take roughly 20 minutes on one core.
"""

import numpy as np
import pytest

from jointlab.cli import main
from jointlab.design import build_design
from jointlab.em import FitConfig, em_fit
from jointlab.likelihood import indicator, score_lambda_arrays, score_theta_arrays, total_loglik
from jointlab.model import StepCumHazard, ThetaParams
from jointlab.quadrature import (closed_form_gaussian_posterior, e_step, gauss_hermite_rule,
                                 posterior_moments)
from jointlab.sim import (default_scenario, replicate_seed, replicate_study, simulate,
                          study_checks)

from conftest import TIGHT, random_subject, random_theta, record_acceptance
from oracles import breslow_textbook, gaussian_subject_blocks, lmm_mle

pytestmark = pytest.mark.slow

SEED = 20261019
DECOUPLED = FitConfig(fix_phi_zero=True, tol_loglik=1e-13, tol_params=1e-9, max_iters=5000)
FITS = []  # (label, FitResult) for the ascent criterion


@pytest.fixture(scope="module")
def decoupled_fits():
    out = []
    for k in range(20):
        data = simulate(default_scenario(phi=[0.0]), 200, replicate_seed(SEED, k))
        fit = em_fit(data, DECOUPLED)
        FITS.append((f"decoupled {k}", fit))
        out.append((data, fit))
    return out


@pytest.fixture(scope="module")
def consistency():
    scen = default_scenario(SEED)
    return [replicate_study(scen, n, 100, "consistency") for n in (100, 400)]


@pytest.fixture(scope="module")
def coverage_lr():
    return replicate_study(default_scenario(SEED + 1), 200, 200, ["coverage", "lr"])


def test_1_decoupled_oracle(decoupled_fits):
    worst_theta = worst_jump = 0.0
    for data, fit in decoupled_fits:
        assert fit.converged
        beta, sy, S, _ = lmm_mle(gaussian_subject_blocks(data), 1)
        th = fit.theta_hat
        worst_theta = max(worst_theta, np.max(np.abs(th.beta - beta)), abs(th.sigma_y - sy),
                          np.max(np.abs(th.sigma_a - S)))
        z = [s.z for s in data.subjects]
        delta = [s.delta for s in data.subjects]
        w = [s.w_path.at(0.0) for s in data.subjects]
        _, jumps = breslow_textbook(th.gamma, z, delta, w)
        worst_jump = max(worst_jump, np.max(np.abs(fit.lambda_hat.jump_sizes - jumps)))
    ok = worst_theta < 1e-6 and worst_jump < 1e-8
    record_acceptance("1 decoupled oracle", ok,
                      f"max |Gaussian part - LMM MLE| {worst_theta:.2e} (< 1e-6), "
                      f"max |jump - Breslow| {worst_jump:.2e} (< 1e-8)")
    assert ok


def test_2_quadrature_oracle():
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for i in range(1000):
        d_a = 1 + i % 2
        subj = random_subject(rng, d_a=d_a)
        theta = random_theta(rng, d_a=d_a).replace(phi=np.zeros(d_a))
        post = posterior_moments(subj, theta, _hazard(rng, subj.z), gauss_hermite_rule(20, d_a))
        m, V = closed_form_gaussian_posterior(subj, theta)
        scale = np.abs(m) + np.sqrt(np.diag(V))
        worst = max(worst, np.max(np.abs(post.mean - m) / scale),
                    np.max(np.abs(post.cov - V)) / np.max(np.abs(V)))
    record_acceptance("2 quadrature oracle", worst < 1e-8, f"max relative error {worst:.2e} (< 1e-8)")
    assert worst < 1e-8


def _hazard(rng, z):
    times = np.unique(np.concatenate([rng.uniform(0, 3, 3), [z]]))
    return StepCumHazard(times, rng.uniform(0.05, 0.5, times.size))


def test_4_stationarity_and_gradients(default_data, default_fit):
    FITS.append(("default", default_fit))
    des = build_design(default_data)
    rule = gauss_hermite_rule(20, 1)
    es = e_step(des, default_fit.theta_hat, default_fit.lambda_hat.jump_sizes, rule)
    t0 = float(np.median(default_data.event_times()))
    scores = np.concatenate([score_theta_arrays(es).mean(axis=0),
                             [score_lambda_arrays(es, lambda t: np.ones_like(t)).mean(),
                              score_lambda_arrays(es, indicator(t0)).mean()]])
    at_mle = float(np.max(np.abs(scores)))

    rng = np.random.default_rng(SEED)
    x0 = default_fit.theta_hat.to_vector()
    lam0 = default_fit.lambda_hat
    worst, h = 0.0, 1e-5
    for _ in range(50):
        x = x0 + rng.normal(scale=0.1, size=x0.size)
        x[1] = abs(x[1])
        lam = lam0.with_sizes(lam0.jump_sizes * np.exp(rng.normal(scale=0.2, size=lam0.jump_sizes.size)))
        th = ThetaParams.from_vector(x, default_data.spec)
        g = score_theta_arrays(e_step(des, th, lam.jump_sizes, rule)).sum(axis=0)
        fd = np.empty_like(g)
        for j in range(x.size):
            e = np.zeros_like(x)
            e[j] = h
            up = total_loglik(default_data, ThetaParams.from_vector(x + e, default_data.spec), lam, rule)
            dn = total_loglik(default_data, ThetaParams.from_vector(x - e, default_data.spec), lam, rule)
            fd[j] = (up - dn) / (2 * h)
        worst = max(worst, float(np.max(np.abs(g - fd) / np.abs(fd))))
    ok = at_mle < 1e-4 and worst < 1e-5
    record_acceptance("4 stationarity and gradients", ok,
                      f"max |average score| at MLE {at_mle:.2e} (< 1e-4), "
                      f"max relative score vs finite difference {worst:.2e} (< 1e-5)")
    assert ok


def test_5_consistency(consistency):
    checks = [c for c in study_checks(consistency) if "ratio" in c["name"]]
    assert checks, "consistency study invalid"
    for c in checks:
        record_acceptance(f"5 consistency {c['name']}", c["pass"], f"{c['value']:.3f} (< {c['bound']})")
    assert all(c["pass"] for c in checks)


def _coverage_checks(summary, scheme):
    return [c for c in study_checks([summary]) if scheme in c["name"]]


def test_6_coverage_central_scheme(coverage_lr):
    checks = _coverage_checks(coverage_lr, "central_cross")
    for c in checks:
        record_acceptance(f"6 coverage {c['name']}", c["pass"], f"{c['value']:.3f} (bound {c['bound']})")
    assert checks and all(c["pass"] for c in checks)


@pytest.mark.xfail(strict=True, reason="the centre-reusing off-diagonal formula yields an indefinite "
                   "information matrix, so no Wald intervals can be formed")
def test_6_coverage_centre_reusing_scheme(coverage_lr):
    checks = _coverage_checks(coverage_lr, "paper_remark_3_2")
    for c in checks:
        record_acceptance(f"6 coverage {c['name']}", c["pass"], f"{c['value']} (bound {c['bound']})")
    assert checks and all(c["pass"] for c in checks)


def test_7_chi_square_calibration(coverage_lr):
    checks = [c for c in study_checks([coverage_lr]) if "LR" in c["name"]]
    lr = coverage_lr.metrics["lr"]
    assert lr["d"] == 6
    for c in checks:
        record_acceptance(f"7 chi-square {c['name']}", c["pass"], f"{c['value']:.3f} (bound {c['bound']})")
    assert len(checks) == 2 and all(c["pass"] for c in checks)


def test_3_ascent_everywhere(decoupled_fits, consistency, coverage_lr):
    drop = max(float(np.max(-np.diff(f.loglik_trace), initial=0.0)) for _, f in FITS)
    resid = max(f.diagnostics["self_consistency"] for _, f in FITS)
    for s in consistency + [coverage_lr]:
        drop = max(drop, s.metrics["max_trace_drop"])
        resid = max(resid, s.metrics["max_self_consistency"])
    ok = drop <= 1e-8 and resid < 1e-8
    record_acceptance("3 EM ascent", ok, f"max loglik decrease {drop:.2e} (<= 1e-8), "
                      f"max self-consistency residual {resid:.2e} (< 1e-8) over "
                      f"{len(FITS) + sum(s.replicates for s in consistency) + coverage_lr.replicates} fits")
    assert ok


def test_8_cli_determinism(tmp_path):
    def run(*args):
        return main([str(a) for a in args] + ["--quiet"])

    outputs = {}
    for threads in (1, 2):
        d = tmp_path / f"t{threads}"
        d.mkdir()
        t = ["--threads", threads]
        assert run("simulate", "--n", 120, "--seed", SEED, "--out", d / "data.json", *t) == 0
        assert run("fit", "--data", d / "data.json", "--out", d / "fit.json", *t) == 0
        assert run("profile", "--data", d / "data.json", "--fit", d / "fit.json", "--scheme", "both",
                   "--ch", "0.5,1,2", "--out", d / "prof.json", *t) == 0
        code = run("verify", "--study", "consistency,coverage,lr", "--n", "60,120",
                   "--replicates", 3, "--seed", SEED, "--out", d / "verify.json", *t)
        assert code in (0, 4)
        outputs[threads] = {p.name: p.read_bytes() for p in sorted(d.iterdir())}
        # a rerun with the same settings is byte-identical too
        assert run("simulate", "--n", 120, "--seed", SEED, "--out", d / "again.json", *t) == 0
        assert (d / "again.json").read_bytes() == (d / "data.json").read_bytes()
    same = outputs[1] == outputs[2]
    record_acceptance("8 CLI determinism", same,
                      f"{len(outputs[1])} output files identical across --threads 1 and 2")
    assert same
