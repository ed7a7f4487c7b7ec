"""Command-line entry point.

Verbs: ``prior``, ``learned``, ``sweep``, ``simulate`` and
``replay-certificate``. Exit codes: 0 success, 1 certificate replay failed
or bad input, 2 infeasible synthesis, 3 sector assumption violated,
4 solver failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import experiment
from .experiment import ConfigError, ExperimentConfig

log = logging.getLogger("gpiqc")

EXIT_OK = 0
EXIT_BAD = 1
EXIT_INFEASIBLE = 2
EXIT_ASSUMPTION = 3
EXIT_SOLVER = 4

_STATUS_CODES = {
    "ok": EXIT_OK,
    "infeasible": EXIT_INFEASIBLE,
    "assumption_violated": EXIT_ASSUMPTION,
    "solver_failure": EXIT_SOLVER,
}


def exit_code(status: str) -> int:
    return _STATUS_CODES.get(status, EXIT_SOLVER)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment configuration")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--trials", type=int, default=None)
    common.add_argument("--iters", type=int, default=None, help="synthesis iterations")
    common.add_argument("--workers", type=int, default=None)
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="gpiqc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("prior", parents=[common], help="synthesis with the a-priori sector")
    sub.add_parser("learned", parents=[common], help="learn a sector, synthesize, simulate")
    sub.add_parser("sweep", parents=[common], help="data-size sweep of sectors and levels")
    s = sub.add_parser("simulate", parents=[common], help="simulate a controller from a report")
    s.add_argument("report", type=Path, help="report JSON or controller JSON")
    r = sub.add_parser("replay-certificate", parents=[common],
                       help="re-verify stored certificates")
    r.add_argument("reports", type=Path, nargs="+")
    return p


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.trials is not None:
        d["trials"] = args.trials
    if args.iters is not None:
        d["iterations"] = args.iters
    if args.workers is not None:
        d["workers"] = args.workers
    return ExperimentConfig.from_dict(d)


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, default=str))


def _brief(res: dict) -> dict:
    keys = ("experiment", "status", "gamma0", "gamma_tilde", "sectors", "true_sector", "error")
    out = {k: res[k] for k in keys if k in res}
    if "replay" in res:
        out["replay_ok"] = res["replay"]["ok"]
    if "simulation" in res:
        sim = res["simulation"]
        out["simulation"] = {k: sim[k] for k in ("empirical_gain", "q_contained",
                                                 "within_certificate") if k in sim}
    return out


def _load_certificate(path: Path):
    from .synthesis import Certificate
    with open(path) as fh:
        d = json.load(fh)
    for key in ("certificate",):
        if key in d and d[key]:
            return Certificate.from_dict(d[key])
    rep = d.get("report") or {}
    if rep.get("certificate"):
        return Certificate.from_dict(rep["certificate"])
    raise ValueError(f"{path} holds no certificate")


def _load_controller(path: Path):
    from .lti import StateSpace
    with open(path) as fh:
        d = json.load(fh)
    if "A" in d:
        return StateSpace.from_dict(d), None
    rep = d.get("report", d)
    if not rep.get("controller"):
        raise ValueError(f"{path} holds no controller")
    return StateSpace.from_dict(rep["controller"]), rep.get("gamma_tilde")


def cmd_replay(args) -> int:
    from dataclasses import asdict
    from .synthesis import replay_certificate
    code = EXIT_OK
    for path in args.reports:
        try:
            res = replay_certificate(_load_certificate(path))
        except (OSError, ValueError, KeyError) as exc:
            print(f"{path}: error: {exc}")
            code = EXIT_BAD
            continue
        print(f"{path}: {'ok' if res.ok else 'FAILED'} margin={res.margin:.3e} "
              f"min_eig_X={res.x_min_eig:.3e} multiplier_ok={res.multiplier_ok} "
              f"hurwitz={res.hurwitz}")
        if args.verbose:
            _print(asdict(res))
        if not res.ok:
            code = EXIT_BAD
    return code


def cmd_simulate(args, cfg: ExperimentConfig) -> int:
    try:
        K, gamma = _load_controller(args.report)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
    summ = experiment.simulation_summary(cfg, K, gamma if gamma else float("inf"), args.out)
    if args.out is not None:
        with open(args.out / "simulation.json", "w") as fh:
            json.dump(summ, fh, indent=1)
    _print({k: v for k, v in summ.items() if k != "runs"})
    return EXIT_OK if not summ["step"]["diverged"] else EXIT_BAD


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "replay-certificate":
        return cmd_replay(args)
    try:
        cfg = _config(args)
    except (OSError, ConfigError, TypeError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_BAD
    if args.verb == "simulate":
        return cmd_simulate(args, cfg)
    if args.verb == "prior":
        res = experiment.run_prior_experiment(cfg, args.out)
        _print(_brief(res))
        return exit_code(res["status"])
    if args.verb == "learned":
        res = experiment.run_learned_experiment(cfg, args.out)
        _print(_brief(res))
        return exit_code(res["status"])
    rows = experiment.run_tradeoff_sweep(cfg, args.out)
    _print(rows)
    bad = [r for r in rows if r.get("status") != "ok"]
    return exit_code(bad[0]["status"]) if bad else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
