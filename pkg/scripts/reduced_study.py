"""Run the multi-seed reduced CBF study and write a per-seed summary CSV.

    python3 scripts/reduced_study.py --config configs/reduced.ini --pred-seeds 20 --cbf-seeds 5
"""

import argparse
import csv
import os

from almostsafe import config as cfgmod
from almostsafe.study import run_study


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/reduced.ini")
    p.add_argument("--pred-seeds", type=int, default=20)
    p.add_argument("--cbf-seeds", type=int, default=5)
    p.add_argument("--out", default="out/reduced_study")
    p.add_argument("--set", action="append", default=[], dest="overrides")
    args = p.parse_args()

    with open(args.config) as fh:
        spec = cfgmod.parse([fh.read()], args.overrides)
    study = run_study(spec, {"pred": range(args.pred_seeds), "cbf": range(args.cbf_seeds)})

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "seeds.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["policy", "seed", "runs", "cardinalities", "derived_rate", "validation_failures", "seconds"])
        for policy, rows in study.runs.items():
            for o in rows:
                v = o.validation
                w.writerow([
                    policy, o.seed, o.result.runs, " ".join(map(str, o.stage_cardinalities)),
                    repr(o.derived_rate), "" if v is None else v.failures, f"{o.seconds:.2f}",
                ])
    with open(os.path.join(args.out, "mc.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["policy", "n", "p_hat", "ci_lo", "ci_hi"])
        for policy, e in study.mc.items():
            w.writerow([policy, e.n, repr(e.p_hat), repr(e.ci_lo), repr(e.ci_hi)])
    with open(os.path.join(args.out, "resolved_config.ini"), "w") as fh:
        fh.write(spec.resolved_text())


if __name__ == "__main__":
    main()
