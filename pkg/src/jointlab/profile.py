"""Profile log-likelihood, second-difference information, LR statistic and Wald intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtri

from .design import build_design
from .em import (FitConfig, FitError, FitResult, LAMBDA_POLISH_MAX, em_fit, nelson_aalen_jumps,
                 profile_lambda)
from .likelihood import loglik_sum
from .model import Dataset, ModelError, ParameterError, StepCumHazard, ThetaParams

PROFILE_TOL = 1e-10
SCHEME_ALIASES = {"paper": "paper_remark_3_2", "paper_remark_3_2": "paper_remark_3_2",
                  "central": "central_cross", "central_cross": "central_cross"}


class ProfileError(FitError):
    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3g})")


class UnreliableInformationError(ModelError):
    pass


class Profiler:
    """pl(theta) = max over Lambda of l(theta, Lambda) by Breslow fixed-point iteration.

    Every probe starts from the same hazard (``start``, or Nelson-Aalen), so the
    value at a given theta never depends on which thetas were probed before.
    """

    def __init__(self, data: Dataset, config: FitConfig | None = None,
                 start: StepCumHazard | None = None, tol: float = PROFILE_TOL,
                 max_sweeps: int = LAMBDA_POLISH_MAX):
        self.data = data
        self.config = config or FitConfig()
        self.design = build_design(data)
        self.rule = self.config.rule(data.spec.d_a)
        if start is not None:
            if start.jump_times.shape != self.design.times.shape or np.any(
                    np.abs(start.jump_times - self.design.times) > 1e-12):
                raise ModelError("warm-start hazard must jump at the distinct event times")
            self.start = start.jump_sizes.copy()
        else:
            self.start = nelson_aalen_jumps(self.design)
        self.tol = tol
        self.max_sweeps = max_sweeps
        self.calls = 0

    def maximize(self, theta: ThetaParams):
        """Return (pl value, profiled hazard)."""
        theta.check(self.data.spec)
        self.calls += 1
        jumps, es, sweeps, change = profile_lambda(self.design, theta, self.start, self.rule,
                                                   self.config.adaptive, self.tol, self.max_sweeps)
        if change >= self.tol:
            raise ProfileError("profile hazard iteration did not converge", change)
        return loglik_sum(es.loglik()), StepCumHazard(self.design.times, jumps)

    def pl(self, theta: ThetaParams) -> float:
        return self.maximize(theta)[0]

    def pl_vector(self, vec) -> float:
        """pl at a theta vector; -inf where the vector is not a valid parameter."""
        try:
            theta = ThetaParams.from_vector(vec, self.data.spec).check(self.data.spec)
        except ParameterError:
            return -math.inf
        return self.pl(theta)


def profile_loglik(theta: ThetaParams, data: Dataset, config: FitConfig | None = None,
                   start: StepCumHazard | None = None) -> float:
    return Profiler(data, config, start).pl(theta)


@dataclass
class InfoEstimate:
    matrix: np.ndarray
    raw: np.ndarray
    h_used: float
    scheme: str
    se: np.ndarray | None
    reliable: bool
    asymmetry: float
    coords: np.ndarray
    names: list[str] = field(default_factory=list)
    n: int = 0

    def to_dict(self) -> dict:
        return {"matrix": self.matrix.tolist(), "raw": self.raw.tolist(), "h": self.h_used,
                "scheme": self.scheme, "se": None if self.se is None else self.se.tolist(),
                "reliable": self.reliable, "asymmetry": self.asymmetry,
                "coords": self.coords.tolist(), "names": self.names, "n": self.n}


def free_coords(spec, config: FitConfig) -> np.ndarray:
    idx = np.arange(spec.dim_theta)
    if config.fix_phi_zero:
        idx = idx[~np.isin(idx, np.arange(spec.dim_theta)[spec.block("phi")])]
    return idx


def information_estimate(theta_hat: ThetaParams, data: Dataset | None, config: FitConfig | None = None,
                         c_h: float = 1.0, scheme: str = "central_cross", *,
                         profiler: Profiler | None = None,
                         pl: Callable[[np.ndarray], float] | None = None,
                         n: int | None = None, coords=None) -> InfoEstimate:
    """Second differences of pl at theta_hat with step h = c_h / sqrt(n), divided by n h^2.

    Diagonal: -(pl(+h e_s) - 2 pl + pl(-h e_s)).  Off-diagonal, by ``scheme``:

    * ``paper_remark_3_2``: -(pl(+s+l) - pl(+s-l) - pl(-s+l) + pl(0)), reusing the centre;
    * ``central_cross``:    -(pl(+s+l) - pl(+s-l) - pl(-s+l) + pl(-s-l)) / 4.

    ``pl`` (a function of the full theta vector) and ``n`` replace the profile
    likelihood of ``data``, e.g. to check the arithmetic on a known quadratic.
    """
    scheme = SCHEME_ALIASES.get(scheme)
    if scheme is None:
        raise ModelError("scheme must be paper_remark_3_2 or central_cross")
    config = config or FitConfig()
    if pl is None:
        profiler = profiler or Profiler(data, config)
        pl = profiler.pl_vector
        n = len(data.subjects)
        spec = data.spec
        coords = free_coords(spec, config) if coords is None else np.asarray(coords)
        names = [spec.theta_names()[i] for i in coords]
    else:
        if n is None:
            raise ModelError("n is required with an injected pl")
        coords = np.arange(theta_hat.to_vector().size if isinstance(theta_hat, ThetaParams)
                           else np.asarray(theta_hat).size) if coords is None else np.asarray(coords)
        names = [f"theta[{i}]" for i in coords]
    x0 = theta_hat.to_vector() if isinstance(theta_hat, ThetaParams) else np.asarray(theta_hat, float)
    h = c_h / math.sqrt(n)
    d = coords.size
    cache: dict[tuple, float] = {}

    def at(steps: dict) -> float:
        key = tuple(sorted((int(k), int(v)) for k, v in steps.items() if v))
        if key not in cache:
            x = x0.copy()
            for k, v in key:
                x[coords[k]] += v * h
            cache[key] = pl(x)
        return cache[key]

    p0 = at({})
    raw = np.zeros((d, d))
    for s in range(d):
        raw[s, s] = -(at({s: 1}) - 2 * p0 + at({s: -1})) / (n * h * h)
    for s in range(d):
        for l in range(s + 1, d):
            pp, pm, mp = at({s: 1, l: 1}), at({s: 1, l: -1}), at({s: -1, l: 1})
            if scheme == "paper_remark_3_2":
                val = -(pp - pm - mp + p0) / (n * h * h)
            else:
                val = -(pp - pm - mp + at({s: -1, l: -1})) / (4 * n * h * h)
            raw[s, l] = raw[l, s] = val
    asym = float(np.max(np.abs(raw - raw.T))) if d else 0.0
    mat = 0.5 * (raw + raw.T)
    se = None
    reliable = bool(np.all(np.isfinite(mat)))
    if reliable and d:
        reliable = asym < 0.05 * np.max(np.abs(raw)) or asym == 0.0
        eig = np.linalg.eigvalsh(mat)
        if eig.min() > 0 and reliable:
            se = np.sqrt(np.diag(np.linalg.inv(mat)) / n)
        else:
            reliable = False
    return InfoEstimate(mat, raw, h, scheme, se, reliable, asym, coords, names, n)


def information_sweep(theta_hat: ThetaParams, data: Dataset, config: FitConfig | None = None,
                      c_values=(0.5, 1.0, 2.0), scheme: str = "central_cross",
                      profiler: Profiler | None = None) -> list[InfoEstimate]:
    """Information estimates over several step constants, to show sensitivity to h."""
    profiler = profiler or Profiler(data, config)
    return [information_estimate(theta_hat, data, config, c, scheme, profiler=profiler)
            for c in c_values]


def lr_statistic(data: Dataset, config: FitConfig | None, theta_0: ThetaParams,
                 fit: FitResult | None = None) -> float:
    """2 (pl(theta_hat) - pl(theta_0))."""
    config = config or FitConfig()
    fit = fit or em_fit(data, config)
    if not fit.converged:
        raise FitError("likelihood-ratio statistic needs a converged fit")
    profiler = Profiler(data, config, fit.lambda_hat)
    return 2.0 * (profiler.pl(fit.theta_hat) - profiler.pl(theta_0))


def normal_quantile(p: float) -> float:
    return float(ndtri(p))


def wald_intervals(fit: FitResult | ThetaParams, info: InfoEstimate, level: float = 0.95):
    """theta_hat_j +/- z_{(1+level)/2} se_j for the coordinates of ``info``."""
    if not info.reliable or info.se is None:
        raise UnreliableInformationError("information estimate is not positive definite; "
                                         "refusing to form intervals")
    if not 0 < level < 1:
        raise ModelError("level must be in (0, 1)")
    theta = fit.theta_hat if isinstance(fit, FitResult) else fit
    est = theta.to_vector()[info.coords]
    z = normal_quantile(0.5 + level / 2)
    return [(float(e - z * s), float(e + z * s)) for e, s in zip(est, info.se)]
