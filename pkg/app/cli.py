"""Command-line surface: python -m app.cli <command> [options]."""
import argparse
import json
import logging
import sys
from fractions import Fraction
from typing import Dict, List, Optional

import pandas as pd
from pydantic import ValidationError

from app.core.config import configure_logging, settings
from app.core.errors import InstanceValidationError, SchedulingError
from app.services import dp, experiments
from app.services.fluid import build_fluid, extract_pstar, fluid_report, solve_fluid
from app.services.model import Instance, InstanceDocument, canonical, ensure_valid, validate
from app.services.policies import POLICY_NAMES, policy_from_name
from app.services.sim import MultiDayConfig, simulate_multiday, simulate_single_day

logger = logging.getLogger(__name__)


def _int_list(text: str) -> List[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text: str) -> List[float]:
    return [float(Fraction(x.strip())) for x in text.split(",") if x.strip()]


def _assignments(text: str) -> Dict[str, int]:
    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        key, _, value = part.partition("=")
        if not _:
            raise argparse.ArgumentTypeError(f"expected name=value, got '{part}'")
        out[key.strip()] = int(value)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slotoffer", description="Appointment slot offering: exact solvers, fluid bounds and simulation")
    parser.add_argument("--log-level", default=None, help=f"Logging level (default: {settings.LOG_LEVEL})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="Backward induction for one model")
    p.add_argument("--instance", required=True, help="Instance JSON file ('-' for stdin)")
    p.add_argument("--model", choices=["nonseq", "seq", "fullinfo"], default="nonseq")
    p.add_argument("--exhaustive", action="store_true", help="Search every ordered partition (seq only)")
    p.add_argument("--actions", action="store_true", help="Include the per-state action array")
    p.add_argument("--out", help="Output file (default: stdout)")

    p = sub.add_parser("fluid", help="Fluid LP bound and its static randomized policy")
    p.add_argument("--instance", required=True)
    p.add_argument("--scale", type=int, default=1, help="Scale K: NK periods and capacity bK (default: 1)")
    p.add_argument("--out")

    p = sub.add_parser("simulate", help="Monte Carlo fill count of a policy")
    p.add_argument("--instance", required=True)
    p.add_argument("--policy", default="offering-all", help=f"One of {', '.join(POLICY_NAMES)}")
    p.add_argument("--days", type=int, default=settings.DEFAULT_REPLICATIONS)
    p.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    p.add_argument("--keep-counts", action="store_true", help="Include per-day fill counts")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--out")

    p = sub.add_parser("policy-map", help="Optimal actions over a 2-D slice of the state space (CSV)")
    p.add_argument("--instance", required=True)
    p.add_argument("--model", choices=["nonseq", "seq"], default="nonseq")
    p.add_argument("--fix", type=_assignments, required=True, help="Fixed coordinates, e.g. m1=4,n=5")
    p.add_argument("--axes", required=True, help="Two free coordinates, e.g. m2,m3")
    p.add_argument("--out")

    p = sub.add_parser("table", help="Run an experiment table")
    p.add_argument("--name", required=True, choices=experiments.TABLE_NAMES)
    p.add_argument("--mode", choices=["exact", "sim"], default=None)
    p.add_argument("--horizons", type=_int_list, default=None, help="Comma-separated N values")
    p.add_argument("--days", type=int, default=None, help="Simulated days per scenario in sim mode")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--instances", type=int, default=None, help="Cap on random instances per cell")
    p.add_argument("--format", choices=["csv", "json", "markdown"], default="csv")
    p.add_argument("--out")

    p = sub.add_parser("multiday", help="Rolling-horizon multi-day simulation")
    p.add_argument("--template", required=True, help="Instance JSON used as the daily template")
    p.add_argument("--policy", default="offering-all", choices=["offering-all", "pi1", "nested-seq"])
    p.add_argument("--demand", choices=["det", "poisson"], default="det")
    p.add_argument("--D", dest="acceptable_days", type=int, default=1, help="Acceptable days per customer")
    p.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    p.add_argument("--days", type=int, default=settings.MULTIDAY_TOTAL_DAYS)
    p.add_argument("--warmup", type=int, default=settings.MULTIDAY_WARMUP)
    p.add_argument("--keep-counts", action="store_true")
    p.add_argument("--out")

    p = sub.add_parser("canonical", help="Print a canonical instance as Instance JSON")
    p.add_argument("--name", required=True, help="N, W, M or M_PLUS_1")
    p.add_argument("--lambda", dest="lam", type=_float_list, default=None, help="Arrival probabilities, e.g. 1/2,1/2")
    p.add_argument("--horizon", type=int, default=20)
    p.add_argument("--capacity", type=_int_list, default=None)
    p.add_argument("--out")

    p = sub.add_parser("validate", help="Check an instance file")
    p.add_argument("--instance", required=True)
    return parser


def read_instance(path: str, check: bool = True) -> Instance:
    handle = sys.stdin if path == "-" else open(path, encoding="utf-8")
    with handle:
        raw = json.load(handle)
    try:
        doc = InstanceDocument.model_validate(raw)
    except ValidationError as e:
        raise InstanceValidationError([f"{'.'.join(str(x) for x in err['loc'])}: {err['msg']}" for err in e.errors()])
    instance = Instance(omega=doc.omega, lam=doc.lambda_, horizon=doc.horizon, capacity=doc.capacity)
    return ensure_valid(instance) if check else instance


def write_output(text: str, out: Optional[str]):
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
        logger.info(f"Wrote {out}")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _solve(args) -> str:
    instance = read_instance(args.instance)
    table = dp.solve_model(instance, args.model, args.exhaustive, store_actions=args.actions)
    doc = dp.value_table_to_json(table)
    doc["value"] = table.initial_value
    return json.dumps(doc)


def _fluid(args) -> str:
    instance = read_instance(args.instance)
    solution = solve_fluid(build_fluid(instance, args.scale))
    return json.dumps(fluid_report(solution, extract_pstar(solution)), indent=2)


def _simulate(args) -> str:
    instance = read_instance(args.instance)
    policy = policy_from_name(args.policy, instance)
    report = simulate_single_day(instance, policy, args.days, args.seed, keep_counts=args.keep_counts or args.format == "csv")
    if args.format == "csv":
        frame = pd.DataFrame({"replication": range(len(report.counts)), "fill": report.counts})
        return frame.to_csv(index=False)
    return json.dumps(report.to_dict(keep_counts=args.keep_counts), indent=2)


def _policy_map(args) -> str:
    instance = read_instance(args.instance)
    axes = [a.strip() for a in args.axes.split(",")]
    rows = experiments.emit_policy_map(instance, args.model, args.fix, axes)
    return pd.DataFrame(rows).to_csv(index=False)


def _table(args) -> str:
    spec = experiments.table_spec(
        args.name, mode=args.mode, horizons=args.horizons, days=args.days, seed=args.seed, instances=args.instances,
    )
    rows = experiments.run_table(spec)
    return experiments.render_rows(rows, args.format, title=spec.title)


def _multiday(args) -> str:
    template = read_instance(args.template)
    config = MultiDayConfig(
        template=template,
        acceptable_days=args.acceptable_days,
        demand_mode=args.demand,
        total_days=args.days,
        warmup=args.warmup,
        seed=args.seed,
    )
    report = simulate_multiday(config, args.policy, keep_counts=args.keep_counts)
    return json.dumps(report.to_dict(keep_counts=args.keep_counts), indent=2)


def _canonical(args) -> str:
    omega = canonical(args.name)
    n_types, n_slots = omega.shape
    lam = args.lam or [1.0 / n_types] * n_types
    capacity = args.capacity
    if capacity is None:
        capacity = [args.horizon // n_slots + (1 if j < args.horizon % n_slots else 0) for j in range(n_slots)]
    instance = ensure_valid(Instance(omega=omega, lam=lam, horizon=args.horizon, capacity=capacity))
    return json.dumps(instance.to_document())


def _validate(args) -> str:
    errors = validate(read_instance(args.instance, check=False))
    return json.dumps({"ok": not errors, "errors": errors})


COMMANDS = {
    "solve": _solve,
    "fluid": _fluid,
    "simulate": _simulate,
    "policy-map": _policy_map,
    "table": _table,
    "multiday": _multiday,
    "canonical": _canonical,
    "validate": _validate,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        text = COMMANDS[args.command](args)
        write_output(text, getattr(args, "out", None))
        return 0
    except SchedulingError as e:
        sys.stderr.write(json.dumps(e.to_dict()) + "\n")
        return 2
    except Exception as e:
        logger.exception(f"Command '{args.command}' failed")
        sys.stderr.write(json.dumps({"error": "internal_error", "detail": str(e)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
