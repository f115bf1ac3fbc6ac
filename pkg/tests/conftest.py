import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from jointlab.em import FitConfig, em_fit
from jointlab.model import CovariatePath, Dataset, ModelSpec, SubjectRecord, ThetaParams
from jointlab.sim import default_scenario, simulate

settings.register_profile("jointlab", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("jointlab")

TIGHT = FitConfig(tol_loglik=1e-13, tol_params=1e-9, max_iters=5000)


def path(value, changes=None):
    """Constant path, or a step path from [(t, value), ...] when ``changes`` is given."""
    if changes is None:
        return CovariatePath.constant(value)
    t = [c[0] for c in changes]
    return CovariatePath(t, np.array([np.atleast_1d(c[1]) for c in changes], dtype=float))


def make_subject(meas_times=(), y=(), x=(1.0,), xt=(1.0,), w=(0.0,), wt=(1.0,), z=1.0, delta=0,
                 sid=0):
    def as_path(v):
        return v if isinstance(v, CovariatePath) else path(v)
    return SubjectRecord(sid, list(meas_times), list(y), as_path(x), as_path(xt), as_path(w),
                         as_path(wt), z, delta)


def one_dim_theta(sigma_y=1.0, sigma_a=1.0, beta=(0.0,), gamma=(0.0,), phi=(0.0,)):
    return ThetaParams(sigma_y, [[sigma_a]], list(beta), list(gamma), list(phi))


def random_subject(rng, d_a=1, p=2, r=1, tau=3.0, time_varying=True, sid=0):
    """A subject with random measurements and (optionally) step-changing paths."""
    z = rng.uniform(0.5, tau)
    n_meas = rng.integers(0, 5)
    meas = np.sort(rng.uniform(0, z, n_meas))
    meas = meas[np.concatenate([[True], np.diff(meas) > 1e-6])] if n_meas else meas

    def rpath(dim, first_one=False):
        if time_varying and rng.random() < 0.7:
            cps = np.concatenate([[0.0], np.sort(rng.uniform(0, tau, 2))])
        else:
            cps = np.array([0.0])
        vals = rng.normal(size=(cps.size, dim))
        if first_one and dim:
            vals[:, 0] = 1.0
        return CovariatePath(cps, vals)

    y = rng.normal(size=meas.size) * 1.5
    return SubjectRecord(sid, meas, y, rpath(p, True), rpath(d_a, True), rpath(r), rpath(d_a),
                         z, int(rng.random() < 0.6))


def random_theta(rng, d_a=1, p=2, r=1):
    A = rng.normal(size=(d_a, d_a)) * 0.5
    S = A @ A.T + np.eye(d_a) * rng.uniform(0.3, 1.5)
    return ThetaParams(rng.uniform(0.3, 1.5), S, rng.normal(size=p), rng.normal(size=r) * 0.5,
                       rng.normal(size=d_a) * 0.5)


def dataset(subjects, tau=None, d_a=None):
    s0 = subjects[0]
    tau = tau or max(s.z for s in subjects)
    spec = ModelSpec(s0.x_path.dim, d_a or s0.xt_path.dim, s0.w_path.dim, s0.wt_path.dim, tau)
    return Dataset(spec, list(subjects))


@pytest.fixture(scope="session")
def default_data():
    return simulate(default_scenario(11), 200)


@pytest.fixture(scope="session")
def default_fit(default_data):
    fit = em_fit(default_data, TIGHT)
    assert fit.converged
    return fit


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def record_acceptance(label: str, passed: bool, detail: str = "") -> None:
    line = f"{'PASS' if passed else 'FAIL'} {label}" + (f": {detail}" if detail else "")
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda ln: ln.split()[1]):
            terminalreporter.write_line(line)
