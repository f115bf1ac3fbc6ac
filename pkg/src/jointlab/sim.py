"""Simulation from the joint model and replicated Monte Carlo studies."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .model import (CovariatePath, Dataset, ModelError, ModelSpec, StepCumHazard,
                    SubjectRecord, ThetaParams)

log = logging.getLogger(__name__)


# --- baselines ----------------------------------------------------------------

@dataclass(frozen=True)
class ConstantBaseline:
    rate: float

    def __post_init__(self):
        if not (self.rate > 0 and math.isfinite(self.rate)):
            raise ModelError("baseline rate must be positive and finite")

    def hazard(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.rate)

    def cumulative(self, t):
        return self.rate * np.asarray(t, dtype=float)

    def inverse_cumulative(self, h):
        return np.asarray(h, dtype=float) / self.rate

    def to_dict(self):
        return {"kind": "constant", "rate": self.rate}


@dataclass(frozen=True)
class WeibullBaseline:
    """lambda_0(t) = (k / s) (t / s)^(k - 1); shape k >= 1 keeps it bounded on [0, tau]."""

    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape >= 1 and self.scale > 0):
            raise ModelError("Weibull baseline needs shape >= 1 and scale > 0")

    def hazard(self, t):
        t = np.asarray(t, dtype=float)
        return self.shape / self.scale * (t / self.scale) ** (self.shape - 1)

    def cumulative(self, t):
        return (np.asarray(t, dtype=float) / self.scale) ** self.shape

    def inverse_cumulative(self, h):
        return self.scale * np.asarray(h, dtype=float) ** (1.0 / self.shape)

    def to_dict(self):
        return {"kind": "weibull", "shape": self.shape, "scale": self.scale}


def baseline_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "constant":
        return ConstantBaseline(float(d["rate"]))
    if kind == "weibull":
        return WeibullBaseline(float(d["shape"]), float(d["scale"]))
    raise ModelError(f"unknown baseline kind {kind!r}")


# --- scenario -------------------------------------------------------------------

@dataclass(frozen=True)
class CovariateSpec:
    """A time-constant covariate drawn once per subject."""

    name: str
    dist: str
    params: tuple = ()

    def draw(self, rng: np.random.Generator) -> float:
        if self.dist == "bernoulli":
            return float(rng.random() < self.params[0])
        if self.dist == "normal":
            return float(rng.normal(self.params[0], self.params[1]))
        if self.dist == "uniform":
            return float(rng.uniform(self.params[0], self.params[1]))
        if self.dist == "constant":
            return float(self.params[0])
        raise ModelError(f"unknown covariate distribution {self.dist!r}")


PATH_KEYS = ("x", "xt", "w", "wt")


@dataclass(frozen=True, eq=False)
class SimScenario:
    """Generative setup with known truth.

    ``paths`` maps each of x, xt, w, wt to column expressions: ``"1"``, ``"t"``,
    a covariate name, or ``"t*name"``.  Columns involving ``t`` are stepped on a
    grid of width ``trend_step`` (plus the measurement schedule).
    """

    spec: ModelSpec
    theta_0: ThetaParams
    baseline: ConstantBaseline | WeibullBaseline
    covariates: tuple[CovariateSpec, ...]
    paths: dict
    meas_schedule: np.ndarray
    censor_max: float
    seed: int = 0
    trend_step: float = 0.05

    def violations(self) -> list[str]:
        out = list(self.theta_0.violations(self.spec))
        sched = np.asarray(self.meas_schedule, dtype=float)
        if sched.size and (np.any(np.diff(sched) <= 0) or sched[-1] >= self.spec.tau or sched[0] < 0):
            out.append("meas_schedule must be strictly increasing within [0, tau)")
        if not self.censor_max > 0:
            out.append("censor_max must be positive")
        names = {c.name for c in self.covariates}
        dims = {"x": self.spec.p, "xt": self.spec.d_a, "w": self.spec.r, "wt": self.spec.s}
        for key in PATH_KEYS:
            cols = self.paths.get(key)
            if cols is None or len(cols) != dims[key]:
                out.append(f"paths.{key} needs {dims[key]} columns")
                continue
            for col in cols:
                base = col[2:] if col.startswith("t*") else col
                if base not in ("1", "t") and base not in names:
                    out.append(f"paths.{key}: unknown column {col!r}")
        if not self.trend_step > 0:
            out.append("trend_step must be positive")
        return out

    def uses_time(self) -> bool:
        return any(c == "t" or c.startswith("t*") for key in PATH_KEYS for c in self.paths[key])

    def time_grid(self) -> np.ndarray:
        if not self.uses_time():
            return np.array([0.0])
        grid = np.arange(0.0, self.spec.tau, self.trend_step)
        return np.unique(np.concatenate([grid, np.asarray(self.meas_schedule, dtype=float)]))

    def build_path(self, key: str, cov: dict, grid: np.ndarray) -> CovariatePath:
        cols = []
        for col in self.paths[key]:
            if col == "1":
                cols.append(np.ones_like(grid))
            elif col == "t":
                cols.append(grid.copy())
            elif col.startswith("t*"):
                cols.append(grid * cov[col[2:]])
            else:
                cols.append(np.full_like(grid, cov[col]))
        values = np.stack(cols, axis=1) if cols else np.zeros((grid.size, 0))
        if not self.uses_time():
            return CovariatePath(np.array([0.0]), values[:1])
        return CovariatePath(grid, values)

    def cumulative_baseline(self) -> "callable":
        return self.baseline.cumulative

    def to_dict(self) -> dict:
        return {
            "spec": {"p": self.spec.p, "d_a": self.spec.d_a, "r": self.spec.r,
                     "s": self.spec.s, "tau": self.spec.tau},
            "theta_0": self.theta_0.to_dict(),
            "baseline": self.baseline.to_dict(),
            "covariates": [{"name": c.name, "dist": c.dist, "params": list(c.params)}
                           for c in self.covariates],
            "paths": {k: list(self.paths[k]) for k in PATH_KEYS},
            "meas_schedule": np.asarray(self.meas_schedule, dtype=float).tolist(),
            "censor_max": self.censor_max,
            "seed": self.seed,
            "trend_step": self.trend_step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimScenario":
        s = d["spec"]
        spec = ModelSpec(int(s["p"]), int(s["d_a"]), int(s["r"]), int(s["s"]), float(s["tau"]))
        return cls(
            spec=spec,
            theta_0=ThetaParams.from_dict(d["theta_0"]),
            baseline=baseline_from_dict(d["baseline"]),
            covariates=tuple(CovariateSpec(c["name"], c["dist"], tuple(c.get("params", ())))
                             for c in d.get("covariates", [])),
            paths={k: list(d["paths"][k]) for k in PATH_KEYS},
            meas_schedule=np.asarray(d["meas_schedule"], dtype=float),
            censor_max=float(d["censor_max"]),
            seed=int(d.get("seed", 0)),
            trend_step=float(d.get("trend_step", 0.05)),
        )


def default_scenario(seed: int = 0, **theta_changes) -> SimScenario:
    """d_a = 1, intercept + Bernoulli(0.5) treatment; random intercept loads on the hazard."""
    theta = ThetaParams(0.5, [[1.0]], [1.0, -0.5], [0.5], [0.7])
    if theta_changes:
        theta = theta.replace(**theta_changes)
    return SimScenario(
        spec=ModelSpec(p=2, d_a=1, r=1, s=1, tau=3.0),
        theta_0=theta,
        baseline=ConstantBaseline(0.5),
        covariates=(CovariateSpec("trt", "bernoulli", (0.5,)),),
        paths={"x": ["1", "trt"], "xt": ["1"], "w": ["trt"], "wt": ["1"]},
        meas_schedule=np.array([0.0, 0.5, 1.0, 1.5, 2.0, 2.5]),
        censor_max=6.0,
        seed=seed,
    )


# --- event times -------------------------------------------------------------------

def _segments(w_path: CovariatePath, wt_path: CovariatePath, tau: float):
    cps = np.union1d(w_path.change_points, wt_path.change_points)
    cps = cps[cps < tau]
    return cps, np.append(cps[1:], tau)


def cumulative_hazard(t: float, a, w_path: CovariatePath, wt_path: CovariatePath,
                      theta: ThetaParams, baseline, tau: float) -> float:
    """Integral of lambda_0(s) exp((phi o W~(s))^T a + W(s)^T gamma) over [0, t]."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    lo, hi = _segments(w_path, wt_path, tau)
    total = 0.0
    for c0, c1 in zip(lo, hi):
        if c0 >= t:
            break
        eta = (theta.phi * wt_path.at(c0)) @ a + w_path.at(c0) @ theta.gamma
        total += math.exp(eta) * float(baseline.cumulative(min(c1, t)) - baseline.cumulative(c0))
    return total


def invert_hazard(a, w_path: CovariatePath, wt_path: CovariatePath, theta_0: ThetaParams,
                  baseline, u: float, tau: float) -> float:
    """Event time T with cumulative hazard -log(u); ``inf`` when the subject outlives ``tau``."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    target = -math.log(u)
    lo, hi = _segments(w_path, wt_path, tau)
    acc = 0.0
    for c0, c1 in zip(lo, hi):
        mult = math.exp((theta_0.phi * wt_path.at(c0)) @ a + w_path.at(c0) @ theta_0.gamma)
        base0 = float(baseline.cumulative(c0))
        piece = mult * (float(baseline.cumulative(c1)) - base0)
        if acc + piece >= target:
            t = float(baseline.inverse_cumulative(base0 + (target - acc) / mult))
            return min(max(t, c0), c1)
        acc += piece
    return math.inf


# --- data generation --------------------------------------------------------------

def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def replicate_seed(seed: int, rep: int) -> np.random.SeedSequence:
    """Independent, individually reproducible stream for replicate ``rep``."""
    return np.random.SeedSequence(int(seed), spawn_key=(int(rep),))


def simulate(scenario: SimScenario, n: int, seed=None) -> Dataset:
    """Draw ``n`` subjects; hidden truth (a, T, C) is attached as ``Dataset.truth``."""
    if n < 1:
        raise ModelError("n must be positive")
    problems = scenario.violations()
    if problems:
        raise ModelError("; ".join(problems))
    spec, th = scenario.spec, scenario.theta_0
    tau = spec.tau
    children = _seed_sequence(scenario.seed if seed is None else seed).spawn(n)
    chol = np.linalg.cholesky(th.sigma_a)
    sched = np.asarray(scenario.meas_schedule, dtype=float)
    grid = scenario.time_grid()
    subjects, truth = [], {"a": [], "T": [], "C": []}
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        cov = {c.name: c.draw(rng) for c in scenario.covariates}
        a = chol @ rng.standard_normal(spec.d_a)
        paths = {k: scenario.build_path(k, cov, grid) for k in PATH_KEYS}
        u = 1.0 - rng.random()  # (0, 1]
        T = invert_hazard(a, paths["w"], paths["wt"], th, scenario.baseline, u, tau)
        C = min(rng.uniform(0.0, scenario.censor_max), tau)
        delta = int(T <= C)
        z = T if delta else C
        times = sched[sched < z]
        X, Xt = paths["x"].at(times), paths["xt"].at(times)
        noise = rng.standard_normal(sched.size)[: times.size]
        y = X @ th.beta + Xt @ a + th.sigma_y * noise
        subjects.append(SubjectRecord(i, times, y, paths["x"], paths["xt"], paths["w"],
                                      paths["wt"], z, delta))
        truth["a"].append(a.tolist())
        truth["T"].append(T if math.isfinite(T) else None)
        truth["C"].append(C)
    return Dataset(spec, subjects, truth)


def sup_distance(lam: StepCumHazard, cumulative, tau: float) -> float:
    """sup over [0, tau] of |lam(t) - Lambda_0(t)| for a continuous nondecreasing Lambda_0."""
    t = lam.jump_times
    cum = np.concatenate([[0.0], np.cumsum(lam.jump_sizes)])
    base = np.asarray(cumulative(t), dtype=float)
    cands = [abs(cum[-1] - float(cumulative(tau)))]
    if t.size:
        cands.append(np.max(np.abs(cum[1:] - base)))
        cands.append(np.max(np.abs(cum[:-1] - base)))
    return float(max(cands))


# --- replicated studies -------------------------------------------------------------

STUDIES = ("consistency", "coverage", "lr")
SCHEMES = ("central_cross", "paper_remark_3_2")


@dataclass
class StudySummary:
    n: int
    replicates: int
    studies: list[str]
    names: list[str]
    truth: list[float]
    n_converged: int
    valid: bool
    metrics: dict = field(default_factory=dict)
    records: list[dict] = field(default_factory=list, repr=False)

    def to_dict(self, include_records: bool = False) -> dict:
        out = {"n": self.n, "replicates": self.replicates, "studies": list(self.studies),
               "names": list(self.names), "truth": list(self.truth),
               "n_converged": self.n_converged, "valid": self.valid, "metrics": self.metrics}
        if include_records:
            out["records"] = self.records
        return out


def run_replicate(scenario: SimScenario, n: int, seed, studies: Sequence[str], fit_config,
                  c_h: float = 1.0, schemes: Sequence[str] = SCHEMES, level: float = 0.95) -> dict:
    """Simulate, fit and (optionally) profile one replicate; returns a plain record."""
    from .em import em_fit
    from .profile import Profiler, information_estimate, wald_intervals

    data = simulate(scenario, n, seed)
    fit = em_fit(data, fit_config)
    truth = scenario.theta_0.to_vector()
    rec = {
        "converged": bool(fit.converged),
        "iters": int(fit.iters),
        "theta_hat": fit.theta_hat.to_vector().tolist(),
        "sup_dist": sup_distance(fit.lambda_hat, scenario.baseline.cumulative, scenario.spec.tau),
        "max_trace_drop": fit.diagnostics["max_trace_drop"],
        "self_consistency": fit.diagnostics["self_consistency"],
        "events": int(sum(s.delta for s in data.subjects)),
    }
    if not fit.converged:
        return rec
    profiler = Profiler(data, fit_config, fit.lambda_hat)
    if "coverage" in studies:
        rec["coverage"] = {}
        for scheme in schemes:
            info = information_estimate(fit.theta_hat, data, fit_config, c_h, scheme,
                                        profiler=profiler)
            entry = {"reliable": bool(info.reliable), "se": None, "covered": None}
            if info.reliable:
                iv = wald_intervals(fit, info, level)
                free = truth[info.coords]
                entry["se"] = info.se.tolist()
                entry["covered"] = [bool(lo <= t <= hi) for (lo, hi), t in zip(iv, free)]
            rec["coverage"][scheme] = entry
    if "lr" in studies:
        pl_hat = profiler.pl(fit.theta_hat)
        pl_0 = profiler.pl(scenario.theta_0)
        rec["lr"] = 2.0 * (pl_hat - pl_0)
    return rec


def _run_one(args):
    return run_replicate(*args)


def default_threads() -> int:
    env = os.environ.get("JOINTLAB_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def replicate_study(scenario: SimScenario, n: int, replicates: int, study, fit_config=None,
                    threads: int | None = None, seed: int | None = None, same_seed: bool = False,
                    c_h: float = 1.0, schemes: Sequence[str] = SCHEMES,
                    level: float = 0.95) -> StudySummary:
    """Run ``replicates`` independent simulate-and-fit replicates and summarize them.

    ``study`` is one of consistency / coverage / lr or a sequence of them.  Replicate
    ``k`` uses the stream ``replicate_seed(seed, k)`` (or ``k = 0`` for all when
    ``same_seed``), so results do not depend on ``threads``.
    """
    from .em import FitConfig

    if replicates < 2:
        raise ModelError("need at least 2 replicates")
    studies = [study] if isinstance(study, str) else list(study)
    for s in studies:
        if s not in STUDIES:
            raise ModelError(f"unknown study {s!r}")
    fit_config = fit_config or FitConfig()
    seed = scenario.seed if seed is None else seed
    threads = threads or default_threads()
    jobs = [(scenario, n, replicate_seed(seed, 0 if same_seed else k), studies, fit_config,
             c_h, tuple(schemes), level) for k in range(replicates)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_run_one, jobs))
    else:
        records = [_run_one(j) for j in jobs]
    return summarize(scenario, n, studies, records, schemes)


def summarize(scenario: SimScenario, n: int, studies: Sequence[str], records: list[dict],
              schemes: Sequence[str] = SCHEMES) -> StudySummary:
    truth = scenario.theta_0.to_vector()
    names = scenario.spec.theta_names()
    ok = [r for r in records if r["converged"]]
    valid = len(records) - len(ok) <= 0.2 * len(records) and len(ok) >= 2
    metrics: dict = {
        "non_converged": len(records) - len(ok),
        "max_trace_drop": max((r["max_trace_drop"] for r in records), default=0.0),
        "max_self_consistency": max((r["self_consistency"] for r in ok), default=0.0),
        "mean_iters": float(np.mean([r["iters"] for r in records])),
    }
    if ok:
        est = np.array([r["theta_hat"] for r in ok])
        err = est - truth
        metrics["bias"] = err.mean(axis=0).tolist()
        metrics["rmse"] = np.sqrt((err ** 2).mean(axis=0)).tolist()
        metrics["emp_se"] = est.std(axis=0, ddof=1).tolist() if len(ok) > 1 else [0.0] * len(names)
        sup = np.array([r["sup_dist"] for r in ok])
        metrics["sup_dist_median"] = float(np.median(sup))
        metrics["sup_dist_mean"] = float(sup.mean())
    if "coverage" in studies and ok:
        cov = {}
        for scheme in schemes:
            rel = [r["coverage"][scheme] for r in ok if r["coverage"][scheme]["reliable"]]
            entry = {"n_reliable": len(rel)}
            if rel:
                covered = np.array([e["covered"] for e in rel], dtype=float)
                se = np.array([e["se"] for e in rel])
                entry["coverage"] = covered.mean(axis=0).tolist()
                entry["mean_se"] = se.mean(axis=0).tolist()
            cov[scheme] = entry
        metrics["coverage"] = cov
    if "lr" in studies and ok:
        lr = np.array([r["lr"] for r in ok])
        d = len(truth)
        metrics["lr"] = {
            "d": d,
            "mean": float(lr.mean()),
            "var": float(lr.var(ddof=1)) if lr.size > 1 else 0.0,
            "q50": float(np.quantile(lr, 0.5)),
            "q90": float(np.quantile(lr, 0.9)),
            "q95": float(np.quantile(lr, 0.95)),
            "chi2_q95": float(stats.chi2.ppf(0.95, d)),
            "min": float(lr.min()),
        }
    return StudySummary(n, len(records), list(studies), names, truth.tolist(), len(ok), valid,
                        metrics, records)


# --- pass/fail thresholds -------------------------------------------------------------

TRACE_DROP_TOL = 1e-8
SELF_CONSISTENCY_TOL = 1e-8
RMSE_RATIO_MAX = 0.7
SUP_RATIO_MAX = 0.75
COVERAGE_RANGE = (0.90, 0.99)
SE_REL_TOL = 0.20
LR_MEAN_RANGE = (0.75, 1.25)
LR_Q95_REL_TOL = 0.15


def _check(name: str, value, bound, passed: bool) -> dict:
    return {"name": name, "value": value, "bound": bound, "pass": bool(passed)}


def study_checks(summaries: Sequence[StudySummary], coords=None) -> list[dict]:
    """Pass/fail checks for one or more summaries of the same scenario at different n.

    ``coords`` are the theta coordinates covered by interval estimates (all by default).
    The consistency ratios compare the smallest and largest n.
    """
    checks = []
    for s in summaries:
        m = s.metrics
        checks.append(_check(f"n={s.n}: converged fraction", s.n_converged / s.replicates, 0.8,
                             s.valid))
        checks.append(_check(f"n={s.n}: max loglik decrease", m["max_trace_drop"], TRACE_DROP_TOL,
                             m["max_trace_drop"] <= TRACE_DROP_TOL))
        checks.append(_check(f"n={s.n}: max self-consistency residual",
                             m["max_self_consistency"], SELF_CONSISTENCY_TOL,
                             m["max_self_consistency"] < SELF_CONSISTENCY_TOL))
        if not s.valid:
            continue
        idx = np.arange(len(s.names)) if coords is None else np.asarray(coords)
        if "coverage" in s.studies:
            emp = np.asarray(m["emp_se"])[idx]
            for scheme, entry in m["coverage"].items():
                if not entry["n_reliable"]:
                    checks.append(_check(f"n={s.n}: {scheme} reliable estimates", 0, 1, False))
                    continue
                lo, hi = COVERAGE_RANGE
                for j, c in zip(idx, entry["coverage"]):
                    checks.append(_check(f"n={s.n}: {scheme} coverage {s.names[j]}", c,
                                         list(COVERAGE_RANGE), lo <= c <= hi))
                for j, se, e in zip(idx, entry["mean_se"], emp):
                    rel = se / e - 1.0 if e > 0 else math.inf
                    checks.append(_check(f"n={s.n}: {scheme} mean se / empirical se - 1 {s.names[j]}",
                                         rel, SE_REL_TOL, abs(rel) <= SE_REL_TOL))
        if "lr" in s.studies:
            lr = m["lr"]
            lo, hi = (f * lr["d"] for f in LR_MEAN_RANGE)
            checks.append(_check(f"n={s.n}: LR mean", lr["mean"], [lo, hi], lo <= lr["mean"] <= hi))
            rel = lr["q95"] / lr["chi2_q95"] - 1.0
            checks.append(_check(f"n={s.n}: LR q95 / chi2 q95 - 1", rel, LR_Q95_REL_TOL,
                                 abs(rel) <= LR_Q95_REL_TOL))
    cons = [s for s in summaries if "consistency" in s.studies and s.valid]
    if len(cons) >= 2:
        small = min(cons, key=lambda s: s.n)
        large = max(cons, key=lambda s: s.n)
        for j, name in enumerate(small.names):
            r = large.metrics["rmse"][j] / small.metrics["rmse"][j]
            checks.append(_check(f"rmse ratio n={large.n}/n={small.n} {name}", r, RMSE_RATIO_MAX,
                                 r < RMSE_RATIO_MAX))
        r = large.metrics["sup_dist_median"] / small.metrics["sup_dist_median"]
        checks.append(_check(f"median sup distance ratio n={large.n}/n={small.n}", r, SUP_RATIO_MAX,
                             r < SUP_RATIO_MAX))
    return checks
