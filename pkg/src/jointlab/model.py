"""Domain types: parameters, cumulative hazards, covariate paths, subjects, datasets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Hashable

import numpy as np


class ModelError(ValueError):
    """Base class for invalid model inputs."""


class ParameterError(ModelError):
    """Parameter values violate their invariants (e.g. non-PD covariance)."""


class DomainError(ModelError):
    """Evaluation point outside the study window."""


class StructuralError(ModelError):
    """Data and hazard support are inconsistent."""


class NumericalError(ArithmeticError):
    """Numerical failure tied to one subject."""

    def __init__(self, message: str, subject_id: Hashable | None = None):
        self.subject_id = subject_id
        if subject_id is not None:
            message = f"subject {subject_id!r}: {message}"
        super().__init__(message)


def _as_matrix(values, ncols: int | None = None) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1) if ncols in (None, 1) else arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ModelError("path values must be a matrix")
    return arr


@dataclass(frozen=True, eq=False)
class ModelSpec:
    p: int
    d_a: int
    r: int
    s: int
    tau: float

    def __post_init__(self):
        for name in ("p", "r", "s"):
            if getattr(self, name) < 0:
                raise ModelError(f"{name} must be nonnegative")
        if self.d_a < 1:
            raise ModelError("d_a must be at least 1")
        if self.s != self.d_a:
            # (phi o W~(t))^T a is only defined when W~ has the dimension of a
            raise ModelError("s must equal d_a")
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise ModelError("tau must be positive and finite")

    @property
    def n_sigma(self) -> int:
        return self.d_a * (self.d_a + 1) // 2

    @property
    def dim_theta(self) -> int:
        return 1 + self.n_sigma + self.p + self.r + self.s

    def theta_names(self) -> list[str]:
        names = ["sigma_y"]
        names += [f"sigma_a[{i},{j}]" for i, j in zip(*np.triu_indices(self.d_a))]
        names += [f"beta[{k}]" for k in range(self.p)]
        names += [f"gamma[{k}]" for k in range(self.r)]
        names += [f"phi[{k}]" for k in range(self.s)]
        return names

    def block(self, name: str) -> slice:
        """Index range of one parameter block inside the theta vector."""
        starts = {"sigma_y": 0, "sigma_a": 1}
        starts["beta"] = 1 + self.n_sigma
        starts["gamma"] = starts["beta"] + self.p
        starts["phi"] = starts["gamma"] + self.r
        sizes = {"sigma_y": 1, "sigma_a": self.n_sigma, "beta": self.p,
                 "gamma": self.r, "phi": self.s}
        return slice(starts[name], starts[name] + sizes[name])


@dataclass(frozen=True, eq=False)
class ThetaParams:
    """Finite-dimensional parameter (sigma_y, Sigma_a, beta, gamma, phi)."""

    sigma_y: float
    sigma_a: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sigma_y", float(self.sigma_y))
        object.__setattr__(self, "sigma_a", np.atleast_2d(np.asarray(self.sigma_a, dtype=float)))
        for name in ("beta", "gamma", "phi"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))

    def violations(self, spec: ModelSpec | None = None) -> list[str]:
        out = []
        if not (np.isfinite(self.sigma_y) and self.sigma_y > 0):
            out.append("sigma_y must be positive")
        S = self.sigma_a
        if S.shape[0] != S.shape[1]:
            out.append("sigma_a must be square")
        elif np.max(np.abs(S - S.T)) > 1e-10:
            out.append("sigma_a must be symmetric")
        elif not np.all(np.isfinite(S)) or np.linalg.eigvalsh(S).min() <= 0:
            out.append("sigma_a must be positive definite")
        if spec is not None:
            if S.shape != (spec.d_a, spec.d_a):
                out.append(f"sigma_a must be {spec.d_a}x{spec.d_a}")
            for name, size in (("beta", spec.p), ("gamma", spec.r), ("phi", spec.s)):
                if getattr(self, name).shape != (size,):
                    out.append(f"{name} must have length {size}")
        return out

    def check(self, spec: ModelSpec | None = None) -> "ThetaParams":
        problems = self.violations(spec)
        if problems:
            raise ParameterError("; ".join(problems))
        return self

    def to_vector(self) -> np.ndarray:
        iu = np.triu_indices(self.sigma_a.shape[0])
        return np.concatenate([[self.sigma_y], self.sigma_a[iu], self.beta, self.gamma, self.phi])

    @classmethod
    def from_vector(cls, vec, spec: ModelSpec) -> "ThetaParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (spec.dim_theta,):
            raise ParameterError(f"theta vector must have length {spec.dim_theta}")
        S = np.zeros((spec.d_a, spec.d_a))
        iu = np.triu_indices(spec.d_a)
        S[iu] = vec[spec.block("sigma_a")]
        S = S + np.triu(S, 1).T
        return cls(vec[0], S, vec[spec.block("beta")], vec[spec.block("gamma")],
                   vec[spec.block("phi")])

    def replace(self, **changes) -> "ThetaParams":
        fields = dict(sigma_y=self.sigma_y, sigma_a=self.sigma_a, beta=self.beta,
                      gamma=self.gamma, phi=self.phi)
        fields.update(changes)
        return ThetaParams(**fields)

    def to_dict(self) -> dict[str, Any]:
        return {"sigma_y": self.sigma_y, "sigma_a": self.sigma_a.tolist(),
                "beta": self.beta.tolist(), "gamma": self.gamma.tolist(),
                "phi": self.phi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ThetaParams":
        return cls(d["sigma_y"], d["sigma_a"], d["beta"], d["gamma"], d["phi"])


@dataclass(frozen=True, eq=False)
class StepCumHazard:
    """Right-continuous step cumulative hazard with positive jumps."""

    jump_times: np.ndarray
    jump_sizes: np.ndarray

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.jump_times, dtype=float))
        h = np.atleast_1d(np.asarray(self.jump_sizes, dtype=float))
        if t.shape != h.shape or t.ndim != 1:
            raise ModelError("jump_times and jump_sizes must be vectors of equal length")
        if t.size and (np.any(np.diff(t) <= 0) or t[0] < 0):
            raise ModelError("jump_times must be strictly increasing and nonnegative")
        if np.any(~np.isfinite(h)) or np.any(h <= 0):
            raise ModelError("jump sizes must be finite and positive")
        object.__setattr__(self, "jump_times", t)
        object.__setattr__(self, "jump_sizes", h)

    @classmethod
    def zero(cls) -> "StepCumHazard":
        return cls(np.empty(0), np.empty(0))

    def __len__(self) -> int:
        return self.jump_times.size

    def __call__(self, t):
        cum = np.concatenate([[0.0], np.cumsum(self.jump_sizes)])
        return cum[np.searchsorted(self.jump_times, t, side="right")]

    def with_sizes(self, sizes) -> "StepCumHazard":
        return StepCumHazard(self.jump_times, sizes)

    def total(self) -> float:
        return float(self.jump_sizes.sum())


@dataclass(frozen=True, eq=False)
class CovariatePath:
    """Right-continuous piecewise-constant covariate path.

    Row ``k`` of ``values`` holds the path value on ``[change_points[k], change_points[k+1])``;
    the last row extends to the end of the study.
    """

    change_points: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.change_points, dtype=float))
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v.reshape(c.size, -1) if c.size else v.reshape(0, 0)
        if v.ndim != 2 or v.shape[0] != c.size:
            raise ModelError("path needs one value row per change point")
        if c.size == 0 or c[0] != 0.0:
            raise ModelError("path change points must start at 0")
        if np.any(np.diff(c) < 0):
            raise ModelError("path change points must be nondecreasing")
        object.__setattr__(self, "change_points", c)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value) -> "CovariatePath":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(np.array([0.0]), value.reshape(1, -1))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def at(self, t):
        """Values at time(s) ``t`` without domain checking; shape (..., dim)."""
        idx = np.searchsorted(self.change_points, t, side="right") - 1
        return self.values[np.maximum(idx, 0)]

    def scaled(self, c: float) -> "CovariatePath":
        return CovariatePath(self.change_points * c, self.values)


def eval_path(path: CovariatePath, t: float, tau: float) -> np.ndarray:
    """Right-continuous evaluation of ``path`` at ``t`` in ``[0, tau]``."""
    if not (0.0 <= t <= tau):
        raise DomainError(f"t={t} outside [0, {tau}]")
    return path.at(t)


@dataclass(frozen=True, eq=False)
class SubjectRecord:
    id: Hashable
    meas_times: np.ndarray
    y: np.ndarray
    x_path: CovariatePath
    xt_path: CovariatePath
    w_path: CovariatePath
    wt_path: CovariatePath
    z: float
    delta: int

    def __post_init__(self):
        object.__setattr__(self, "meas_times", np.atleast_1d(np.asarray(self.meas_times, dtype=float)))
        object.__setattr__(self, "y", np.atleast_1d(np.asarray(self.y, dtype=float)))
        object.__setattr__(self, "z", float(self.z))
        object.__setattr__(self, "delta", int(self.delta))

    @property
    def n_meas(self) -> int:
        return self.meas_times.size

    def design(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (X, X~) with one row per measurement."""
        return self.x_path.at(self.meas_times), self.xt_path.at(self.meas_times)

    def scaled_time(self, c: float) -> "SubjectRecord":
        return SubjectRecord(self.id, self.meas_times * c, self.y, self.x_path.scaled(c),
                             self.xt_path.scaled(c), self.w_path.scaled(c),
                             self.wt_path.scaled(c), self.z * c, self.delta)


@dataclass(frozen=True, eq=False)
class Dataset:
    spec: ModelSpec
    subjects: list[SubjectRecord]
    truth: dict | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.subjects)

    def event_times(self) -> np.ndarray:
        """Distinct observed event times, sorted."""
        return np.unique([s.z for s in self.subjects if s.delta == 1])

    def scaled_time(self, c: float) -> "Dataset":
        spec = ModelSpec(self.spec.p, self.spec.d_a, self.spec.r, self.spec.s, self.spec.tau * c)
        return Dataset(spec, [s.scaled_time(c) for s in self.subjects])


def validate_dataset(data: Dataset) -> list[str]:
    """Return one message per violated invariant; empty when the dataset is well formed."""
    spec = data.spec
    found = []
    seen = set()
    dims = {"x_path": spec.p, "xt_path": spec.d_a, "w_path": spec.r, "wt_path": spec.s}
    for subj in data.subjects:
        tag = f"subject {subj.id!r}"
        if subj.id in seen:
            found.append(f"{tag}: duplicate id")
        seen.add(subj.id)
        if subj.meas_times.shape != subj.y.shape:
            found.append(f"{tag}: meas_times and y differ in length")
        if not np.all(np.isfinite(subj.y)):
            found.append(f"{tag}: non-finite response")
        if subj.n_meas:
            if np.any(np.diff(subj.meas_times) <= 0):
                found.append(f"{tag}: measurement times not strictly increasing")
            if subj.meas_times[0] < 0:
                found.append(f"{tag}: negative measurement time")
            if subj.meas_times[-1] >= subj.z:
                found.append(f"{tag}: measurement at or after follow-up time")
        if not (0 < subj.z <= spec.tau):
            found.append(f"{tag}: follow-up time z={subj.z} outside (0, tau={spec.tau}]")
        if subj.delta not in (0, 1):
            found.append(f"{tag}: delta must be 0 or 1")
        for name, dim in dims.items():
            path = getattr(subj, name)
            if path.dim != dim:
                found.append(f"{tag}: {name} has dimension {path.dim}, expected {dim}")
            if not np.all(np.isfinite(path.values)):
                found.append(f"{tag}: {name} has non-finite values")
    if not any(s.delta == 1 for s in data.subjects):
        found.append("dataset: no observed events")
    return found
