"""Per-subject sufficient statistics stacked into arrays for vectorized E-steps.

Everything the likelihood needs from a subject is either a Gaussian sufficient
statistic of its measurements or a covariate value at a hazard jump time, so a
dataset can be compiled once per set of jump times and then reused for every
parameter value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Dataset, ModelSpec, SubjectRecord

TIME_MATCH_TOL = 1e-12


@dataclass(eq=False)
class Design:
    spec: ModelSpec
    ids: list
    n_meas: np.ndarray      # (n,)
    xtx: np.ndarray         # (n, p, p)   X^T X
    xty: np.ndarray         # (n, p)      X^T Y
    yty: np.ndarray         # (n,)        Y^T Y
    ztz: np.ndarray         # (n, d, d)   X~^T X~
    zty: np.ndarray         # (n, d)      X~^T Y
    ztx: np.ndarray         # (n, d, p)   X~^T X
    z: np.ndarray           # (n,)
    delta: np.ndarray       # (n,)
    wz: np.ndarray          # (n, r)      W(Z)
    wtz: np.ndarray         # (n, s)      W~(Z)
    times: np.ndarray       # (K,)        hazard jump times
    at_risk: np.ndarray     # (n, K)      1.0 where t_k <= Z_i
    wk: np.ndarray          # (n, K, r)   W(t_k)
    seg: np.ndarray         # (n, K)      index into wt_seg for t_k (0 when not at risk)
    wt_seg: np.ndarray      # (n, S, s)   distinct W~ values over at-risk jump times
    event_k: np.ndarray     # (n,)        jump index at Z for events, -1 otherwise
    d_k: np.ndarray         # (K,)        number of events tied at t_k

    @property
    def n(self) -> int:
        return self.z.size

    @property
    def n_seg(self) -> int:
        return self.wt_seg.shape[1]

    def seg_sum(self, weights: np.ndarray) -> np.ndarray:
        """Sum (n, K) weights into (n, S) segment totals."""
        n, S = self.n, self.n_seg
        flat = (np.arange(n)[:, None] * S + self.seg).ravel()
        return np.bincount(flat, weights=weights.ravel(), minlength=n * S).reshape(n, S)

    def gather(self, per_seg: np.ndarray) -> np.ndarray:
        """Expand (n, S, ...) segment values to (n, K, ...) jump-time values."""
        if per_seg.shape[1] == 1:
            return np.broadcast_to(per_seg, (self.n, self.times.size) + per_seg.shape[2:])
        idx = self.seg.reshape(self.seg.shape + (1,) * (per_seg.ndim - 2))
        return np.take_along_axis(per_seg, idx, axis=1)

    def subset(self, rows) -> "Design":
        rows = np.asarray(rows)
        fields = {}
        for name in ("n_meas", "xtx", "xty", "yty", "ztz", "zty", "ztx", "z", "delta",
                     "wz", "wtz", "at_risk", "wk", "seg", "wt_seg", "event_k"):
            fields[name] = getattr(self, name)[rows]
        d_k = np.bincount(fields["event_k"][fields["event_k"] >= 0], minlength=self.times.size)
        return Design(self.spec, [self.ids[i] for i in rows], times=self.times,
                      d_k=d_k.astype(float), **fields)


def _subject_arrays(subj: SubjectRecord, times: np.ndarray):
    X, Xt = subj.design()
    at_risk = times <= subj.z
    wt_all = subj.wt_path.at(times) if times.size else np.zeros((0, subj.wt_path.dim))
    if at_risk.any():
        uniq, inv = np.unique(wt_all[at_risk], axis=0, return_inverse=True)
        seg = np.zeros(times.size, dtype=np.intp)
        seg[at_risk] = inv.ravel()
    else:
        uniq = np.zeros((1, subj.wt_path.dim))
        seg = np.zeros(times.size, dtype=np.intp)
    event_k = -1
    if subj.delta == 1 and times.size:
        k = int(np.argmin(np.abs(times - subj.z)))
        if abs(times[k] - subj.z) <= TIME_MATCH_TOL:
            event_k = k
    return dict(
        n_meas=subj.n_meas, xtx=X.T @ X, xty=X.T @ subj.y, yty=subj.y @ subj.y,
        ztz=Xt.T @ Xt, zty=Xt.T @ subj.y, ztx=Xt.T @ X, z=subj.z, delta=subj.delta,
        wz=subj.w_path.at(subj.z), wtz=subj.wt_path.at(subj.z),
        at_risk=at_risk.astype(float),
        wk=subj.w_path.at(times) if times.size else np.zeros((0, subj.w_path.dim)),
        seg=seg, wt_seg=uniq, event_k=event_k,
    )


def build_design(data: Dataset, jump_times=None) -> Design:
    """Compile ``data`` against hazard jump times (default: distinct event times)."""
    spec = data.spec
    times = data.event_times() if jump_times is None else np.asarray(jump_times, dtype=float)
    rows = [_subject_arrays(s, times) for s in data.subjects]
    S = max(r["wt_seg"].shape[0] for r in rows)
    wt_seg = np.zeros((len(rows), S, spec.s))
    for i, r in enumerate(rows):
        wt_seg[i, : r["wt_seg"].shape[0]] = r["wt_seg"]

    def stack(name, shape):
        return np.array([r[name] for r in rows], dtype=float).reshape((len(rows),) + shape)

    K = times.size
    event_k = np.array([r["event_k"] for r in rows], dtype=np.intp)
    d_k = np.bincount(event_k[event_k >= 0], minlength=K).astype(float)
    return Design(
        spec=spec, ids=[s.id for s in data.subjects],
        n_meas=stack("n_meas", ()), xtx=stack("xtx", (spec.p, spec.p)),
        xty=stack("xty", (spec.p,)), yty=stack("yty", ()),
        ztz=stack("ztz", (spec.d_a, spec.d_a)), zty=stack("zty", (spec.d_a,)),
        ztx=stack("ztx", (spec.d_a, spec.p)), z=stack("z", ()),
        delta=stack("delta", ()), wz=stack("wz", (spec.r,)), wtz=stack("wtz", (spec.s,)),
        times=times, at_risk=stack("at_risk", (K,)), wk=stack("wk", (K, spec.r)),
        seg=np.array([r["seg"] for r in rows], dtype=np.intp).reshape(len(rows), K),
        wt_seg=wt_seg, event_k=event_k, d_k=d_k,
    )
