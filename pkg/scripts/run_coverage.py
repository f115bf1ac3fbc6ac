"""Coverage study: Wald intervals from profile-likelihood information, both difference schemes.

    python scripts/run_coverage.py --n 200 --replicates 200 --ch 1.0 --out coverage.json
"""

import argparse
from dataclasses import asdict, dataclass

from jointlab.em import FitConfig
from jointlab.io import write_json
from jointlab.sim import SCHEMES, default_scenario, replicate_study, study_checks


@dataclass
class CoverageConfig:
    n: int = 200
    replicates: int = 200
    seed: int = 0
    c_h: float = 1.0
    level: float = 0.95
    threads: int | None = None


def run(cfg: CoverageConfig, fit: FitConfig) -> dict:
    summary = replicate_study(default_scenario(cfg.seed), cfg.n, cfg.replicates, "coverage", fit,
                              cfg.threads, c_h=cfg.c_h, schemes=SCHEMES, level=cfg.level)
    return {"config": asdict(cfg), "fit_config": fit.to_dict(), "summary": summary.to_dict(),
            "checks": study_checks([summary])}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--replicates", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ch", type=float, default=1.0)
    ap.add_argument("--level", type=float, default=0.95)
    ap.add_argument("--threads", type=int)
    ap.add_argument("--out", default="coverage.json")
    args = ap.parse_args()
    cfg = CoverageConfig(args.n, args.replicates, args.seed, args.ch, args.level, args.threads)
    out = run(cfg, FitConfig())
    names = out["summary"]["names"]
    for scheme, entry in out["summary"]["metrics"]["coverage"].items():
        print(f"{scheme}: {entry['n_reliable']} reliable of {out['summary']['n_converged']}")
        for name, c in zip(names, entry.get("coverage", [])):
            print(f"  {name}: coverage {c:.3f}")
    for c in out["checks"]:
        print(("PASS" if c["pass"] else "FAIL"), c["name"], c["value"])
    write_json(args.out, out)


if __name__ == "__main__":
    main()
