"""Consistency study: RMSE of theta_hat and sup distance of Lambda_hat as n grows.

    python scripts/run_consistency.py --n 100 400 --replicates 100 --out consistency.json
"""

import argparse
from dataclasses import asdict, dataclass, field

from jointlab.em import FitConfig
from jointlab.io import write_json
from jointlab.sim import default_scenario, replicate_study, study_checks


@dataclass
class ConsistencyConfig:
    n: list[int] = field(default_factory=lambda: [100, 400])
    replicates: int = 100
    seed: int = 0
    threads: int | None = None


def run(cfg: ConsistencyConfig, fit: FitConfig) -> dict:
    scen = default_scenario(cfg.seed)
    summaries = [replicate_study(scen, n, cfg.replicates, "consistency", fit, cfg.threads)
                 for n in cfg.n]
    checks = study_checks(summaries)
    return {"config": asdict(cfg), "fit_config": fit.to_dict(),
            "summaries": [s.to_dict() for s in summaries], "checks": checks}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[100, 400])
    ap.add_argument("--replicates", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int)
    ap.add_argument("--out", default="consistency.json")
    args = ap.parse_args()
    out = run(ConsistencyConfig(args.n, args.replicates, args.seed, args.threads), FitConfig())
    for s in out["summaries"]:
        rmse = ", ".join(f"{name} {r:.4f}" for name, r in zip(s["names"], s["metrics"]["rmse"]))
        print(f"n={s['n']}: rmse {rmse}; median sup {s['metrics']['sup_dist_median']:.4f}")
    for c in out["checks"]:
        print(("PASS" if c["pass"] else "FAIL"), c["name"], c["value"])
    write_json(args.out, out)


if __name__ == "__main__":
    main()
