"""Command-line entry point: ``almostsafe <command> [--config PATH] [--set sec.key=value] ...``.

Exit codes: 0 success, 1 configuration error, 2 oracle or validation
failure, 3 budget exhausted before the schedule completed.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from almostsafe import config as cfgmod
from almostsafe.cbf import cbf_scenario
from almostsafe.covering import build_cover, read_cover_csv
from almostsafe.errors import ConfigurationError
from almostsafe.quantifier import (
    BUDGET_EXHAUSTED,
    characterize,
    consensus_distance,
    derived_failure_rate,
    validate_safe_set,
)
from almostsafe.rates import (
    NominalProposal,
    SeparationTilt,
    derived_estimate,
    is_failure_rate,
    mc_failure_rate,
    write_estimates_csv,
)
from almostsafe.scenario import RandomSource
from almostsafe.slices import slice_cells, write_slice_csv, write_slice_svg
from almostsafe.toys import TOYS, maximal_invariant_cells

log = logging.getLogger("almostsafe")

EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_BUDGET = 0, 1, 2, 3

# top-level stream keys; characterization uses (stage, run, purpose) below the seed
VALIDATE_STREAM = 1 << 40
MC_STREAM = VALIDATE_STREAM + 1
IS_STREAM = VALIDATE_STREAM + 2


def make_system(spec: cfgmod.ExperimentSpec, policy: str | None = None):
    if spec.env == "cbf":
        return cbf_scenario(policy or spec.policy, spec.cbf)
    return TOYS[spec.env.removeprefix("toy-")]().system


def _out(spec, name):
    os.makedirs(spec.out_dir, exist_ok=True)
    return os.path.join(spec.out_dir, name)


def _write_resolved(spec):
    with open(_out(spec, "resolved_config.ini"), "w") as fh:
        fh.write(spec.resolved_text())


def _load_result_cover(spec, system):
    path = _out(spec, "safe_set.csv")
    if not os.path.exists(path):
        return None
    return read_cover_csv(path, system.domain, spec.final.delta)


def cmd_characterize(spec) -> int:
    system = make_system(spec)
    _write_resolved(spec)
    result = characterize(system, system.domain, spec.schedule, spec.quantifier_config(), RandomSource(spec.seed))
    result.cover.to_csv(_out(spec, "safe_set.csv"), sbar=spec.quantifier_config().sbar)
    result.write_history_csv(_out(spec, "history.csv"))
    result.write_audit_jsonl(_out(spec, "audit.jsonl"))
    print(
        f"cardinality={result.cardinality} eps={result.eps:g} beta={result.beta:g} "
        f"delta={list(result.delta)} runs={result.runs} termination={result.termination}"
    )
    if result.termination == BUDGET_EXHAUSTED:
        return EXIT_BUDGET
    return EXIT_OK


def cmd_validate(spec) -> int:
    system = make_system(spec)
    cover = _load_result_cover(spec, system)
    if cover is None:
        print(f"no safe_set.csv in {spec.out_dir}; run characterize first", file=sys.stderr)
        return EXIT_CONFIG
    if cover.cardinality == 0:
        print("characterized set is empty; nothing to validate", file=sys.stderr)
        return EXIT_CHECK
    st = spec.final
    rep = validate_safe_set(
        system, cover, st.eps, st.beta, spec.K, RandomSource(spec.seed, (VALIDATE_STREAM,)),
        sbar=spec.quantifier_config().sbar,
    )
    print(f"validation runs={rep.runs} failures={rep.failures} escapes={rep.escapes} passed={rep.passed}")
    return EXIT_OK if rep.passed else EXIT_CHECK


def cmd_slice(spec) -> int:
    if spec.env != "cbf":
        print("slice is only defined for the cbf environment", file=sys.stderr)
        return EXIT_CONFIG
    system = make_system(spec)
    cover = _load_result_cover(spec, system)
    if cover is None:
        print(f"no safe_set.csv in {spec.out_dir}; run characterize first", file=sys.stderr)
        return EXIT_CONFIG
    for sl in spec.slices:
        rows = slice_cells(cover, sl.velocities, spec.cbf, spec.quantifier_config().sbar)
        write_slice_csv(_out(spec, f"slice_{sl.tag}.csv"), rows)
        write_slice_svg(_out(spec, f"slice_{sl.tag}.svg"), cover, rows, sl.velocities, spec.cbf, sl.resolution)
        print(f"slice {sl.tag}: {sum(r.status == 'safe' for r in rows)} safe of {len(rows)} cells")
    return EXIT_OK


def cmd_baselines(spec) -> int:
    system = make_system(spec)
    b = spec.baselines
    estimates = [mc_failure_rate(system, b.n_mc, spec.K, RandomSource(spec.seed, (MC_STREAM,)), b.confidence)]
    if spec.env == "cbf":
        proposal = SeparationTilt(system.domain, spec.cbf.d_s, b.tilt_lambda)
    else:
        proposal = NominalProposal(system)
    estimates.append(
        is_failure_rate(system, proposal, b.n_is, spec.K, RandomSource(spec.seed, (IS_STREAM,)), b.confidence)
    )
    cover = _load_result_cover(spec, system)
    if cover is None:
        log.warning("no characterized set in %s; derived-rate row omitted", spec.out_dir)
    else:
        ref = build_cover(system.domain, spec.final.delta, system.failure)
        runs = _runs_from_history(spec)
        estimates.append(derived_estimate(derived_failure_rate(cover, ref), runs))
    write_estimates_csv(_out(spec, "estimates.csv"), estimates)
    _write_resolved(spec)
    for e in estimates:
        print(f"{e.method}: p_hat={e.p_hat:.5f} ci=[{e.ci_lo:.5f}, {e.ci_hi:.5f}] n={e.n}")
    return EXIT_OK


def _runs_from_history(spec) -> int:
    path = _out(spec, "history.csv")
    if not os.path.exists(path):
        return 0
    with open(path, newline="") as fh:
        return sum(int(row["runs"]) for row in csv.DictReader(fh))


def cmd_consensus(spec) -> int:
    if spec.env != "cbf":
        print("consensus compares the cbf and pred policies; set experiment.env = cbf", file=sys.stderr)
        return EXIT_CONFIG
    cfg = spec.quantifier_config()
    per_policy = {}
    status = EXIT_OK
    for policy in ("cbf", "pred"):
        system = make_system(spec, policy)
        results = []
        for seed in spec.consensus_seeds:
            res = characterize(system, system.domain, spec.schedule, cfg, RandomSource(seed))
            if res.termination == BUDGET_EXHAUSTED:
                status = EXIT_BUDGET
            results.append(res)
        per_policy[policy] = results
    with open(_out(spec, "consensus.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "eps", "mean_cardinality_cbf", "mean_cardinality_pred"])
        for k, st in enumerate(spec.schedule.stages):
            means = []
            for policy in ("cbf", "pred"):
                cards = [r.history[k].cardinality for r in per_policy[policy] if len(r.history) > k]
                means.append(float(np.mean(cards)) if cards else float("nan"))
            w.writerow([k, repr(st.eps), repr(means[0]), repr(means[1])])
            print(f"stage {k} eps={st.eps:g}: mean |cbf|={means[0]:.1f} mean |pred|={means[1]:.1f}")
    dists = [consensus_distance(a, b) for a, b in zip(per_policy["cbf"], per_policy["pred"])]
    with open(_out(spec, "consensus_distance.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "distance", "runs_cbf", "runs_pred"])
        for s, d, a, b in zip(spec.consensus_seeds, dists, per_policy["cbf"], per_policy["pred"]):
            w.writerow([s, repr(d), a.runs, b.runs])
    _write_resolved(spec)
    print(f"consensus distance: mean={np.mean(dists):.4f} max={np.max(dists):.4f}")
    return status


def oracle_check(seeds=range(5), toys=None) -> list[tuple[str, int, bool]]:
    """Characterize each bundled toy per seed and compare against its exhaustive oracle."""
    out = []
    for name, make in (toys or TOYS).items():
        toy = make()
        final = toy.schedule.stages[-1]
        oracle = maximal_invariant_cells(toy.system, toy.step, final.delta)
        for seed in seeds:
            res = characterize(toy.system, toy.system.domain, toy.schedule, toy.config, RandomSource(seed))
            ok = res.cover.same_grid(oracle) and bool(np.array_equal(res.cover.active, oracle.active))
            out.append((name, seed, ok))
    return out


def cmd_oracle_check(spec) -> int:
    results = oracle_check(seeds=range(spec.seed, spec.seed + 5))
    for name, seed, ok in results:
        print(f"{name} seed={seed}: {'pass' if ok else 'FAIL'}")
    return EXIT_OK if all(ok for *_, ok in results) else EXIT_CHECK


COMMANDS = {
    "characterize": cmd_characterize,
    "validate": cmd_validate,
    "slice": cmd_slice,
    "baselines": cmd_baselines,
    "consensus": cmd_consensus,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="almostsafe", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", action="append", default=[], help="config file; later files override earlier")
    p.add_argument("--seed", type=int, help="master seed (overrides experiment.seed)")
    p.add_argument("--out", help="output directory (overrides output.directory)")
    p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VALUE", dest="overrides")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        texts = []
        for path in args.config:
            try:
                with open(path) as fh:
                    texts.append(fh.read())
            except OSError as exc:
                raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        spec = cfgmod.parse(texts, args.overrides, seed=args.seed, out=args.out)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](spec)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
