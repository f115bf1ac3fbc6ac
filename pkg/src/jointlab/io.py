"""Canonical JSON encoding, dataset/fit file formats, run manifests and CSV import."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import __version__
from .em import FitConfig, FitResult
from .model import (CovariatePath, Dataset, ModelError, ModelSpec, StepCumHazard,
                    SubjectRecord, ThetaParams)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def _emit(obj, out: list):
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        out.append(format(obj, ".17g") if math.isfinite(obj) else "null")
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, list):
        out.append("[")
        for i, v in enumerate(obj):
            if i:
                out.append(",")
            _emit(v, out)
        out.append("]")
    elif isinstance(obj, dict):
        out.append("{")
        for i, k in enumerate(sorted(obj)):
            if i:
                out.append(",")
            out.append(json.dumps(k))
            out.append(":")
            _emit(obj[k], out)
        out.append("}")
    else:
        raise TypeError(f"cannot encode {type(obj).__name__}")


def canonical_json(obj) -> str:
    """Sorted keys, no whitespace, floats with 17 significant digits, non-finite as null."""
    out: list[str] = []
    _emit(_plain(obj), out)
    return "".join(out)


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(canonical_json(obj) + "\n")


def manifest(command: str, config=None, dataset=None, seed=None, wall_time=None) -> dict:
    return {"command": command,
            "config_digest": None if config is None else digest(config),
            "dataset_digest": None if dataset is None else digest(dataset),
            "seed": seed, "tool_version": __version__, "wall_time": wall_time}


# --- datasets -------------------------------------------------------------------

def _path_to_json(path: CovariatePath) -> list:
    return [{"t": float(t), "values": row.tolist()} for t, row in zip(path.change_points, path.values)]


def _path_from_json(items: list, dim: int) -> CovariatePath:
    if not items:
        raise ModelError("covariate path needs at least one change point")
    t = [float(it["t"]) for it in items]
    vals = np.array([[float(v) for v in it["values"]] for it in items], dtype=float).reshape(len(t), dim)
    return CovariatePath(t, vals)


def spec_to_json(spec: ModelSpec) -> dict:
    return {"p": spec.p, "d_a": spec.d_a, "r": spec.r, "s": spec.s, "tau": spec.tau}


def spec_from_json(d: dict) -> ModelSpec:
    return ModelSpec(int(d["p"]), int(d["d_a"]), int(d["r"]), int(d["s"]), float(d["tau"]))


def dataset_to_json(data: Dataset, include_truth: bool = True) -> dict:
    subjects = []
    for s in data.subjects:
        subjects.append({
            "id": s.id if isinstance(s.id, (int, str)) else str(s.id),
            "meas": [{"t": float(t), "y": float(y)} for t, y in zip(s.meas_times, s.y)],
            "paths": {"x": _path_to_json(s.x_path), "xt": _path_to_json(s.xt_path),
                      "w": _path_to_json(s.w_path), "wt": _path_to_json(s.wt_path)},
            "z": s.z, "delta": s.delta,
        })
    out = {"spec": spec_to_json(data.spec), "subjects": subjects}
    if include_truth and data.truth is not None:
        out["truth"] = data.truth
    return out


def dataset_from_json(d: dict) -> Dataset:
    spec = spec_from_json(d["spec"])
    dims = {"x": spec.p, "xt": spec.d_a, "w": spec.r, "wt": spec.s}
    subjects = []
    for item in d["subjects"]:
        meas = item.get("meas", [])
        paths = {k: _path_from_json(item["paths"][k], dims[k]) for k in dims}
        subjects.append(SubjectRecord(
            item["id"], [float(m["t"]) for m in meas], [float(m["y"]) for m in meas],
            paths["x"], paths["xt"], paths["w"], paths["wt"], float(item["z"]), int(item["delta"])))
    return Dataset(spec, subjects, d.get("truth"))


def load_dataset(path) -> Dataset:
    return dataset_from_json(json.loads(Path(path).read_text()))


# --- fits -----------------------------------------------------------------------

def fit_to_json(fit: FitResult, spec: ModelSpec, config: FitConfig) -> dict:
    return {
        "theta_hat": fit.theta_hat.to_dict(),
        "theta_vector": fit.theta_hat.to_vector().tolist(),
        "names": spec.theta_names(),
        "lambda_hat": {"times": fit.lambda_hat.jump_times.tolist(),
                       "jumps": fit.lambda_hat.jump_sizes.tolist()},
        "loglik_trace": fit.loglik_trace.tolist(),
        "loglik": fit.loglik,
        "converged": fit.converged,
        "iters": fit.iters,
        "diagnostics": fit.diagnostics,
        "config": config.to_dict(),
    }


def fit_from_json(d: dict) -> tuple[FitResult, FitConfig]:
    lam = StepCumHazard(d["lambda_hat"]["times"], d["lambda_hat"]["jumps"])
    fit = FitResult(ThetaParams.from_dict(d["theta_hat"]), lam, np.array(d["loglik_trace"], float),
                    bool(d["converged"]), int(d["iters"]), float(d["loglik"]),
                    d.get("diagnostics", {}))
    return fit, FitConfig.from_dict(d["config"])


# --- CSV import -------------------------------------------------------------------

def import_csv(measurements, paths, events, tau: float) -> Dataset:
    """Build a dataset from three CSV files.

    * measurements: ``id,t,y``
    * paths: ``id,path,t,v0[,v1,...]`` with ``path`` in x, xt, w, wt
    * events: ``id,z,delta``

    Subject ids are kept as strings; order follows the events file.
    """
    meas = defaultdict(list)
    with open(measurements, newline="") as fh:
        for row in csv.DictReader(fh):
            meas[row["id"]].append((float(row["t"]), float(row["y"])))
    pths: dict = defaultdict(lambda: defaultdict(list))
    with open(paths, newline="") as fh:
        reader = csv.DictReader(fh)
        vcols = sorted((c for c in reader.fieldnames if c.startswith("v")), key=lambda c: int(c[1:]))
        for row in reader:
            vals = [float(row[c]) for c in vcols if row.get(c, "") != ""]
            pths[row["id"]][row["path"]].append((float(row["t"]), vals))
    subjects = []
    dims = {}
    with open(events, newline="") as fh:
        for row in csv.DictReader(fh):
            sid = row["id"]
            mp = {}
            for key in ("x", "xt", "w", "wt"):
                items = sorted(pths[sid][key], key=lambda it: it[0])
                if not items:
                    raise ModelError(f"subject {sid!r}: missing {key} path")
                dims.setdefault(key, len(items[0][1]))
                mp[key] = CovariatePath([t for t, _ in items],
                                        np.array([v for _, v in items], float).reshape(len(items), -1))
            ms = sorted(meas.get(sid, []))
            subjects.append(SubjectRecord(sid, [t for t, _ in ms], [y for _, y in ms], mp["x"],
                                          mp["xt"], mp["w"], mp["wt"], float(row["z"]),
                                          int(row["delta"])))
    if not subjects:
        raise ModelError("events file lists no subjects")
    spec = ModelSpec(dims["x"], dims["xt"], dims["w"], dims["wt"], float(tau))
    return Dataset(spec, subjects)
