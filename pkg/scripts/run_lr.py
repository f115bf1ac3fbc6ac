"""Chi-square calibration of the profile likelihood-ratio statistic at the true theta.

    python scripts/run_lr.py --n 200 --replicates 200 --out lr.json
"""

import argparse
from dataclasses import asdict, dataclass

from jointlab.em import FitConfig
from jointlab.io import write_json
from jointlab.sim import default_scenario, replicate_study, study_checks


@dataclass
class LRConfig:
    n: int = 200
    replicates: int = 200
    seed: int = 0
    threads: int | None = None


def run(cfg: LRConfig, fit: FitConfig) -> dict:
    summary = replicate_study(default_scenario(cfg.seed), cfg.n, cfg.replicates, "lr", fit,
                              cfg.threads)
    return {"config": asdict(cfg), "fit_config": fit.to_dict(), "summary": summary.to_dict(),
            "checks": study_checks([summary])}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--replicates", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int)
    ap.add_argument("--out", default="lr.json")
    args = ap.parse_args()
    out = run(LRConfig(args.n, args.replicates, args.seed, args.threads), FitConfig())
    lr = out["summary"]["metrics"]["lr"]
    print(f"d={lr['d']}: mean {lr['mean']:.3f}, var {lr['var']:.3f}, "
          f"q95 {lr['q95']:.3f} (chi2 {lr['chi2_q95']:.3f})")
    for c in out["checks"]:
        print(("PASS" if c["pass"] else "FAIL"), c["name"], c["value"])
    write_json(args.out, out)


if __name__ == "__main__":
    main()
