"""Command-line entry point: simulate, fit, profile, verify, import-csv.

Exit codes: 0 ok, 2 invalid input, 3 non-convergence, 4 verification failure.
All JSON files are canonical so identical runs give identical bytes.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .em import FitConfig, FitError, InvalidDataError, em_fit
from .io import (canonical_json, dataset_from_json, dataset_to_json, fit_from_json, fit_to_json,
                 import_csv, manifest, write_json)
from .model import ModelError, validate_dataset
from .profile import (SCHEME_ALIASES, Profiler, UnreliableInformationError, free_coords,
                      information_estimate, wald_intervals)
from .sim import (STUDIES, SimScenario, default_scenario, default_threads, replicate_study,
                  simulate, study_checks)

log = logging.getLogger("jointlab")

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED, EXIT_VERIFY = 0, 2, 3, 4


class InputError(Exception):
    """Invalid user input; reported on stderr with exit code 2."""


# --- config parsing with line anchors --------------------------------------------------

def _read_json(path: str) -> tuple[object, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        return json.loads(text), text
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def _line_of(text: str, key: str) -> int:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def _anchored(path: str, text: str, key: str, msg: str) -> InputError:
    return InputError(f"{path}:{_line_of(text, key)}: {msg}")


def _key_of(message: str) -> str:
    """Best-effort config key named by a validation message (first word, last dotted part)."""
    word = re.split(r"[\s:]", message.strip(), maxsplit=1)[0]
    return word.split(".")[-1].split("[")[0]


def load_scenario(path: str | None, seed: int | None) -> SimScenario:
    if path is None:
        scen = default_scenario(0 if seed is None else seed)
    else:
        raw, text = _read_json(path)
        if not isinstance(raw, dict):
            raise InputError(f"{path}:1: scenario must be a JSON object")
        tau = raw.get("spec", {}).get("tau") if isinstance(raw.get("spec"), dict) else None
        if isinstance(tau, (int, float)) and not tau > 0:
            raise _anchored(path, text, "tau", f"tau must be positive (got {tau}); follow-up "
                            "is administratively censored at tau, so every time lies in [0, tau]")
        try:
            scen = SimScenario.from_dict(raw)
        except KeyError as exc:
            raise _anchored(path, text, exc.args[0], f"missing key {exc.args[0]!r}") from None
        except (ModelError, TypeError, ValueError) as exc:
            msg = str(exc)
            raise _anchored(path, text, _key_of(msg), msg) from None
        problems = scen.violations()
        if problems:
            raise _anchored(path, text, _key_of(problems[0]), "; ".join(problems))
    if seed is not None:
        scen = SimScenario(**{**scen.__dict__, "seed": seed})
    return scen


def load_fit_config(args) -> FitConfig:
    cfg: dict = {}
    if getattr(args, "config", None):
        raw, text = _read_json(args.config)
        if not isinstance(raw, dict):
            raise InputError(f"{args.config}:1: fit config must be a JSON object")
        try:
            FitConfig.from_dict(raw)
        except (ModelError, TypeError, ValueError) as exc:
            msg = str(exc)
            key = next((k for k in raw if k in msg), _key_of(msg))
            raise _anchored(args.config, text, key, msg) from None
        cfg.update(raw)
    for flag, key in (("max_iters", "max_iters"), ("quad_points", "quad_points"),
                      ("tol_loglik", "tol_loglik"), ("tol_params", "tol_params")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "fix_phi_zero", False):
        cfg["fix_phi_zero"] = True
    if getattr(args, "no_adaptive", False):
        cfg["adaptive"] = False
    try:
        return FitConfig.from_dict(cfg)
    except (ModelError, TypeError, ValueError) as exc:
        raise InputError(f"fit config: {exc}") from None


def load_dataset_file(path: str):
    raw, text = _read_json(path)
    try:
        data = dataset_from_json(raw)
    except KeyError as exc:
        raise _anchored(path, text, exc.args[0], f"missing key {exc.args[0]!r}") from None
    except (ModelError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None
    # the digest covers what the fitter sees: spec and subjects, not truth or manifest
    return data, {"spec": raw["spec"], "subjects": raw["subjects"]}


def _int_list(text: str, what: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"{what} must be a comma-separated list of integers") from None
    if not vals or any(v <= 0 for v in vals):
        raise InputError(f"{what} must be positive")
    return vals


def _float_list(text: str, what: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"{what} must be a comma-separated list of numbers") from None
    if not vals or any(not v > 0 for v in vals):
        raise InputError(f"{what} must be positive")
    return vals


def _schemes(text: str) -> list[str]:
    if text == "both":
        return ["paper_remark_3_2", "central_cross"]
    if text not in SCHEME_ALIASES:
        raise InputError(f"unknown scheme {text!r}; use paper, central or both")
    return [SCHEME_ALIASES[text]]


def _wall(args, start: float):
    return round(time.perf_counter() - start, 3) if args.record_wall_time else None


# --- commands ------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    start = time.perf_counter()
    if args.n <= 0:
        raise InputError("n must be positive")
    scen = load_scenario(args.scenario, args.seed)
    data = simulate(scen, args.n, scen.seed)
    out = dataset_to_json(data)
    out["manifest"] = manifest("simulate", {"scenario": scen.to_dict(), "n": args.n},
                               {"spec": out["spec"], "subjects": out["subjects"]}, scen.seed,
                               _wall(args, start))
    write_json(args.out, out)
    log.info("wrote %d subjects (%d events) to %s", args.n, sum(s.delta for s in data.subjects),
             args.out)
    return EXIT_OK


def cmd_fit(args) -> int:
    start = time.perf_counter()
    data, content = load_dataset_file(args.data)
    findings = validate_dataset(data)
    if findings:
        raise InputError("invalid dataset:\n  " + "\n  ".join(findings))
    config = load_fit_config(args)
    init = init_lambda = None
    if args.init:
        raw, _ = _read_json(args.init)
        try:
            prev, _ = fit_from_json(raw)
        except (KeyError, ModelError, TypeError, ValueError) as exc:
            raise InputError(f"{args.init}: not a fit file ({exc})") from None
        init, init_lambda = prev.theta_hat, prev.lambda_hat
    try:
        fit = em_fit(data, config, init=init, init_lambda=init_lambda)
    except InvalidDataError as exc:
        raise InputError("invalid dataset:\n  " + "\n  ".join(exc.findings)) from None
    except ModelError as exc:
        raise InputError(str(exc)) from None
    out = fit_to_json(fit, data.spec, config)
    out["manifest"] = manifest("fit", {"config": config.to_dict(),
                                       "init": None if init is None else raw},
                               content, None, _wall(args, start))
    write_json(args.out, out)
    if not fit.converged:
        log.warning("EM did not converge in %d iterations", fit.iters)
        return EXIT_NONCONVERGED
    log.info("converged in %d iterations, loglik %.6f", fit.iters, fit.loglik)
    return EXIT_OK


def cmd_profile(args) -> int:
    start = time.perf_counter()
    data, content = load_dataset_file(args.data)
    raw, _ = _read_json(args.fit)
    try:
        fit, config = fit_from_json(raw)
    except (KeyError, ModelError, TypeError, ValueError) as exc:
        raise InputError(f"{args.fit}: not a fit file ({exc})") from None
    if not fit.converged:
        raise InputError(f"{args.fit}: profile needs a converged fit")
    schemes = _schemes(args.scheme)
    c_values = _float_list(args.ch, "--ch")
    if not 0 < args.level < 1:
        raise InputError("--level must be in (0, 1)")
    try:
        profiler = Profiler(data, config, fit.lambda_hat)
    except ModelError as exc:
        raise InputError(f"fit does not match dataset: {exc}") from None
    estimates = []
    for scheme in schemes:
        for c in c_values:
            info = information_estimate(fit.theta_hat, data, config, c, scheme, profiler=profiler)
            entry = info.to_dict()
            entry["c_h"] = c
            try:
                entry["intervals"] = [list(iv) for iv in wald_intervals(fit, info, args.level)]
            except UnreliableInformationError:
                entry["intervals"] = None
                log.warning("%s, c_h=%g: information not positive definite; no intervals",
                            scheme, c)
            estimates.append(entry)
    out = {
        "names": data.spec.theta_names(),
        "theta_hat": fit.theta_hat.to_vector().tolist(),
        "coords": free_coords(data.spec, config).tolist(),
        "level": args.level,
        "n": len(data.subjects),
        "reliable": all(e["reliable"] for e in estimates),
        "estimates": estimates,
        "profile_evaluations": profiler.calls,
    }
    out["manifest"] = manifest("profile", {"fit": raw, "scheme": schemes, "ch": c_values,
                                           "level": args.level}, content, None, _wall(args, start))
    write_json(args.out, out)
    return EXIT_OK


def cmd_verify(args) -> int:
    start = time.perf_counter()
    studies = [s.strip() for s in args.study.split(",") if s.strip()]
    for s in studies:
        if s not in STUDIES:
            raise InputError(f"unknown study {s!r}; choose from {', '.join(STUDIES)}")
    ns = _int_list(args.n, "--n")
    if args.replicates < 2:
        raise InputError("--replicates must be at least 2")
    if not 0 < args.level < 1:
        raise InputError("--level must be in (0, 1)")
    scen = load_scenario(args.scenario, args.seed)
    config = load_fit_config(args)
    schemes = _schemes(args.scheme)
    threads = args.threads or default_threads()
    summaries = []
    for n in ns:
        log.info("n=%d: %d replicates on %d worker(s)", n, args.replicates, threads)
        summaries.append(replicate_study(scen, n, args.replicates, studies, config, threads,
                                         scen.seed, c_h=args.ch, schemes=schemes,
                                         level=args.level))
    checks = study_checks(summaries, free_coords(scen.spec, config))
    all_pass = all(c["pass"] for c in checks)
    invalid = [s.n for s in summaries if not s.valid]
    out = {
        "studies": studies,
        "summaries": [s.to_dict(include_records=True) for s in summaries],
        "checks": checks,
        "all_pass": all_pass,
        "study_invalid": bool(invalid),
    }
    out["manifest"] = manifest("verify", {"scenario": scen.to_dict(), "studies": studies, "n": ns,
                                          "replicates": args.replicates, "config": config.to_dict(),
                                          "scheme": schemes, "ch": args.ch, "level": args.level},
                               None, scen.seed, _wall(args, start))
    write_json(args.out, out)
    for c in checks:
        log.info("%s %s: %s", "PASS" if c["pass"] else "FAIL", c["name"], c["value"])
    if invalid:
        print(f"study invalid: more than 20% of replicates failed to converge at n={invalid}",
              file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK if all_pass else EXIT_VERIFY


def cmd_import_csv(args) -> int:
    start = time.perf_counter()
    try:
        data = import_csv(args.measurements, args.paths, args.events, args.tau)
    except (KeyError, ModelError, ValueError) as exc:
        raise InputError(f"csv import: {exc}") from None
    except OSError as exc:
        raise InputError(f"csv import: cannot read {exc.filename}") from None
    findings = validate_dataset(data)
    if findings:
        raise InputError("invalid dataset:\n  " + "\n  ".join(findings))
    out = dataset_to_json(data)
    out["manifest"] = manifest("import-csv", {"tau": args.tau},
                               {"spec": out["spec"], "subjects": out["subjects"]}, None,
                               _wall(args, start))
    write_json(args.out, out)
    return EXIT_OK


# --- argument parsing ------------------------------------------------------------------

def _fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="fit config JSON (keys of FitConfig)")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--quad-points", type=int)
    p.add_argument("--tol-loglik", type=float)
    p.add_argument("--tol-params", type=float)
    p.add_argument("--fix-phi-zero", action="store_true", help="fit the decoupled model")
    p.add_argument("--no-adaptive", action="store_true", help="non-adaptive quadrature")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="only warnings and errors on stderr")
    common.add_argument("--threads", type=int, default=None,
                        help="worker processes (default: $JOINTLAB_THREADS or all cores)")
    common.add_argument("--record-wall-time", action="store_true",
                        help="store elapsed seconds in the manifest (breaks byte-identity)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate a dataset")
    p.add_argument("--scenario", help="scenario JSON (default: built-in scenario)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="fit the joint model by EM")
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="previous fit JSON to start from")
    p.add_argument("--out", required=True)
    _fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("profile", parents=[common], help="profile-likelihood information and intervals")
    p.add_argument("--data", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--scheme", default="central", help="paper, central or both")
    p.add_argument("--ch", default="1", help="step constant(s), comma-separated")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("verify", parents=[common], help="Monte Carlo verification study")
    p.add_argument("--study", required=True, help="consistency, coverage, lr (comma-separated)")
    p.add_argument("--n", required=True, help="sample size(s), comma-separated")
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--scenario")
    p.add_argument("--scheme", default="both", help="paper, central or both")
    p.add_argument("--ch", type=float, default=1.0)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", required=True)
    _fit_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("import-csv", parents=[common], help="convert CSV files to dataset JSON")
    p.add_argument("--measurements", required=True, help="id,t,y")
    p.add_argument("--paths", required=True, help="id,path,t,v0,v1,...")
    p.add_argument("--events", required=True, help="id,z,delta")
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import_csv)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
