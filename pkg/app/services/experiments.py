"""Scenario grids, random instance generation, experiment tables and policy maps."""
import itertools
import json
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.config import settings
from app.core.errors import ExperimentCancelled, SchedulingError, UnknownNameError
from app.services.dp import (
    SeqMode,
    Variant,
    evaluate_policy,
    optimal_actions,
    solve_nonseq,
    solve_seq,
)
from app.services.fluid import build_fluid, extract_pstar, solve_fluid
from app.services.model import Instance, canonical, ensure_valid, format_offer
from app.services.policies import policy_from_name
from app.services.sim import MultiDayConfig, gap_statistics, simulate_multiday, simulate_single_day

logger = logging.getLogger(__name__)

Progress = Optional[Callable[[int, int], None]]
StopCheck = Optional[Callable[[], bool]]


# --- Scenario grids ---

@dataclass(frozen=True)
class ScenarioGrid:
    horizon: int
    n_slots: int
    vectors: Tuple[Tuple[int, ...], ...]

    def __len__(self):
        return len(self.vectors)

    @property
    def cover(self) -> Tuple[int, ...]:
        """Componentwise maximum; one value table over this lattice serves every scenario."""
        return tuple(int(x) for x in np.max(np.asarray(self.vectors), axis=0))


def enumerate_scenarios(horizon: int, n_slots: int, floor_fraction: Optional[float] = None) -> ScenarioGrid:
    """All b with b_j >= ceil(fraction * N) and sum(b) = N, in lexicographic order."""
    fraction = settings.CAPACITY_FLOOR_FRACTION if floor_fraction is None else floor_fraction
    floor = math.ceil(Fraction(str(fraction)) * horizon)
    if n_slots < 1 or floor * n_slots > horizon:
        raise SchedulingError(
            f"no capacity vector of {n_slots} slot types with every b_j >= {floor} sums to {horizon}"
        )
    top = horizon - floor * (n_slots - 1)
    vectors = tuple(
        b for b in itertools.product(range(floor, top + 1), repeat=n_slots) if sum(b) == horizon
    )
    return ScenarioGrid(horizon, n_slots, vectors)


def thin_grid(grid: ScenarioGrid, cap: Optional[int]) -> ScenarioGrid:
    """Evenly spaced subset of at most cap scenarios."""
    if cap is None or len(grid) <= cap:
        return grid
    picks = sorted(set(np.linspace(0, len(grid) - 1, cap).round().astype(int).tolist()))
    return replace(grid, vectors=tuple(grid.vectors[i] for i in picks))


# --- Random instances ---

@dataclass(frozen=True)
class RandomInstanceSpec:
    n_slots: int
    horizon: int
    count: int
    scheme: int = 1


def lambda_scheme(scheme: int, n_types: int) -> np.ndarray:
    """Uniform (1), or tilted so that each successive rate shrinks by a factor 2 (2) or 4 (3)."""
    i = np.arange(1, n_types + 1, dtype=float)
    if scheme == 1:
        return np.full(n_types, 1.0 / n_types)
    if n_types == 1:
        return np.ones(1)
    if scheme == 2:
        return 2 * (n_types + i - 2) / (3 * n_types ** 2 - 3 * n_types)
    if scheme == 3:
        return 2 * (n_types + 3 * i - 4) / (5 * n_types ** 2 - 5 * n_types)
    raise UnknownNameError(f"unknown arrival scheme {scheme}")


def random_choice_matrices(n_slots: int, count: int, seed: int) -> List[np.ndarray]:
    """Uniformly sized, uniformly drawn sets of distinct nonzero preference rows."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, n_slots, count])))
    n_rows = (1 << n_slots) - 1
    matrices = []
    for _ in range(count):
        size = int(rng.integers(1, n_rows + 1))
        rows = rng.choice(np.arange(1, n_rows + 1), size=size, replace=False)
        matrices.append(((rows[:, None] >> np.arange(n_slots)) & 1).astype(np.int64))
    return matrices


def generate_random_instances(spec: RandomInstanceSpec, seed: int) -> List[Instance]:
    if spec.n_slots < 1 or spec.n_slots > settings.MAX_SLOT_TYPES:
        raise SchedulingError(f"cannot generate instances with {spec.n_slots} slot types")
    grid = enumerate_scenarios(spec.horizon, spec.n_slots, settings.RANDOM_FLOOR_FRACTION)
    out = []
    for omega in random_choice_matrices(spec.n_slots, spec.count, seed):
        lam = lambda_scheme(spec.scheme, omega.shape[0])
        out.append(ensure_valid(Instance(omega=omega, lam=lam, horizon=spec.horizon, capacity=grid.cover)))
    return out


# --- Table specifications ---

@dataclass(frozen=True)
class Comparison:
    label: str
    base: str
    compared: str
    formula: str = "gap"


@dataclass
class ExperimentSpec:
    name: str
    title: str
    family: str
    lambdas: List[List[float]]
    comparisons: List[Comparison]
    kind: str = "grid"
    horizons: Optional[List[int]] = None
    mode: str = "exact"
    days: int = settings.DEFAULT_REPLICATIONS
    seed: int = settings.DEFAULT_SEED
    instances: Optional[int] = None
    demand_mode: str = "det"


def _horizons(spec: ExperimentSpec) -> List[int]:
    return list(spec.horizons or settings.TABLE_HORIZONS)


OPTIMAL_NONSEQ = "optimal-nonseq"
OPTIMAL_SEQ = "optimal-seq"
PSTAR = "pstar"
FAMILY_SET = ("N", "M", "W")


def _grid_spec(name, title, family, grid_key, comparisons):
    return lambda: ExperimentSpec(name, title, family, settings.LAMBDA_GRIDS[grid_key], comparisons)


TABLES: Dict[str, Callable[[], ExperimentSpec]] = {
    "m-gap": _grid_spec("m-gap", "Offering-all vs optimal non-sequential (M)", "M", "M",
                        [Comparison("offering-all vs optimal", OPTIMAL_NONSEQ, "offering-all")]),
    "mplus1-gap": _grid_spec("mplus1-gap", "Offering-all vs optimal non-sequential (M+1)", "M_PLUS_1", "M_PLUS_1",
                             [Comparison("offering-all vs optimal", OPTIMAL_NONSEQ, "offering-all")]),
    "drain-n": _grid_spec("drain-n", "Drain vs optimal sequential (N)", "N", "N",
                          [Comparison("drain vs optimal sequential", OPTIMAL_SEQ, "drain")]),
    "drain-m": _grid_spec("drain-m", "Drain vs optimal sequential (M)", "M", "M",
                          [Comparison("drain vs optimal sequential", OPTIMAL_SEQ, "drain")]),
    "drain-w": _grid_spec("drain-w", "Drain vs optimal sequential (W)", "W", "W",
                          [Comparison("drain vs optimal sequential", OPTIMAL_SEQ, "drain")]),
    "seq-vs-nonseq-n": _grid_spec("seq-vs-nonseq-n", "Optimal sequential over optimal non-sequential (N)", "N", "N_SEQ",
                                  [Comparison("sequential over non-sequential", OPTIMAL_NONSEQ, OPTIMAL_SEQ, "improvement")]),
    "seq-vs-nonseq-m": _grid_spec("seq-vs-nonseq-m", "Optimal sequential over optimal non-sequential (M)", "M", "M",
                                  [Comparison("sequential over non-sequential", OPTIMAL_NONSEQ, OPTIMAL_SEQ, "improvement")]),
    "seq-vs-nonseq-w": _grid_spec("seq-vs-nonseq-w", "Optimal sequential over optimal non-sequential (W)", "W", "W",
                                  [Comparison("sequential over non-sequential", OPTIMAL_NONSEQ, OPTIMAL_SEQ, "improvement")]),
    "pstar-gap": _grid_spec("pstar-gap", "Fluid static policy vs optimal non-sequential (M)", "M", "M",
                            [Comparison("static fluid policy vs optimal", OPTIMAL_NONSEQ, PSTAR)]),
    "random-gap": lambda: ExperimentSpec(
        "random-gap", "Offering-all vs optimal on random choice matrices", "random", [[1], [2], [3]],
        [Comparison("offering-all vs optimal", OPTIMAL_NONSEQ, "offering-all")], kind="random",
    ),
    "multiday": lambda: ExperimentSpec(
        "multiday", "Multi-day rolling horizon, deterministic arrivals", "M", settings.LAMBDA_GRIDS["M"],
        [Comparison("non-sequential optimal vs offering-all", "offering-all", "pi1", "improvement"),
         Comparison("sequential optimal vs offering-all", "offering-all", "nested-seq", "improvement")],
        kind="multiday", mode="sim",
    ),
    "multiday-poisson": lambda: ExperimentSpec(
        "multiday-poisson", "Multi-day rolling horizon, Poisson arrivals", "M", settings.LAMBDA_GRIDS["M"],
        [Comparison("non-sequential optimal vs offering-all", "offering-all", "pi1", "improvement"),
         Comparison("sequential optimal vs offering-all", "offering-all", "nested-seq", "improvement")],
        kind="multiday", mode="sim", demand_mode="poisson",
    ),
}


def _drain_compare() -> ExperimentSpec:
    comparisons = [
        Comparison("drain over offering-all", "offering-all", "drain", "improvement"),
        Comparison("drain over random sequential", "random-seq", "drain", "improvement"),
    ]
    return ExperimentSpec("drain-compare", "Drain over offering-all and random sequential", "N,M,W", [], comparisons,
                          kind="families")


TABLES["drain-compare"] = _drain_compare
TABLE_NAMES = sorted(TABLES)


def table_spec(name: str, **overrides) -> ExperimentSpec:
    if name not in TABLES:
        raise UnknownNameError(f"unknown table '{name}'", detail={"known": TABLE_NAMES})
    spec = TABLES[name]()
    for key, value in overrides.items():
        if value is not None:
            setattr(spec, key, value)
    if spec.mode not in ("exact", "sim"):
        raise UnknownNameError(f"unknown evaluation mode '{spec.mode}'")
    return spec


# --- Evaluation ---

def lambda_label(lam: Sequence[float]) -> str:
    return ",".join(str(Fraction(x).limit_denominator(100)) for x in lam)


def scenario_values(template: Instance, method: str, grid: ScenarioGrid, mode: str = "exact",
                    days: Optional[int] = None, seed: Optional[int] = None,
                    should_stop: StopCheck = None) -> np.ndarray:
    """Value of a method at V_N(b) for every scenario b; template capacity must cover the grid."""
    n = template.horizon
    if method == OPTIMAL_NONSEQ:
        table = solve_nonseq(template, store_actions=False)
        return np.array([table.value(n, b) for b in grid.vectors])
    if method == OPTIMAL_SEQ:
        table = solve_seq(template, SeqMode.PERMUTATION, store_actions=False)
        return np.array([table.value(n, b) for b in grid.vectors])

    if method != PSTAR and mode == "exact":
        table = evaluate_policy(template, policy_from_name(method, template))
        return np.array([table.value(n, b) for b in grid.vectors])

    values = []
    for b in grid.vectors:
        if should_stop and should_stop():
            raise ExperimentCancelled("experiment cancelled")
        instance = template.replace(capacity=b)
        if method == PSTAR:
            policy = extract_pstar(solve_fluid(build_fluid(instance)))
        else:
            policy = policy_from_name(method, instance)
        if mode == "exact":
            values.append(evaluate_policy(instance, policy, keep_all=False).initial_value)
        else:
            values.append(simulate_single_day(instance, policy, days, seed).mean)
    return np.array(values)


def _row(spec: ExperimentSpec, comparison: Comparison, family: str, key: str, key_value, lam_label: str,
         scenarios: int, stats: Dict[str, float]) -> Dict:
    return {
        "table": spec.name,
        "comparison": comparison.label,
        "family": family,
        key: key_value,
        "lambda": lam_label,
        "scenarios": scenarios,
        **{k: round(v, 4) for k, v in stats.items()},
    }


def _run_grid(spec: ExperimentSpec, families: List[Tuple[str, List[List[float]]]],
              progress: Progress, should_stop: StopCheck) -> List[Dict]:
    rows = []
    total = sum(len(lams) for _, lams in families) * len(_horizons(spec)) * len(spec.comparisons)
    for family, lambdas in families:
        omega = canonical(family)
        for horizon in _horizons(spec):
            grid = enumerate_scenarios(horizon, omega.shape[1])
            for lam in lambdas:
                if should_stop and should_stop():
                    raise ExperimentCancelled("experiment cancelled")
                template = ensure_valid(Instance(omega=omega, lam=lam, horizon=horizon, capacity=grid.cover))
                cache: Dict[str, np.ndarray] = {}
                for comparison in spec.comparisons:
                    for method in (comparison.base, comparison.compared):
                        if method not in cache:
                            cache[method] = scenario_values(template, method, grid, spec.mode, spec.days,
                                                            spec.seed, should_stop)
                    stats = gap_statistics(list(zip(cache[comparison.base], cache[comparison.compared])),
                                           comparison.formula)
                    rows.append(_row(spec, comparison, family, "N", horizon, lambda_label(lam), len(grid), stats))
                    logger.info(f"[{spec.name}] {family} N={horizon} lambda=({lambda_label(lam)}): {stats}")
                    if progress:
                        progress(len(rows), total)
    return rows


def _random_cells(spec: ExperimentSpec) -> List[Tuple[int, int, int, int]]:
    return [(j, n, count, cap) for j, entries in sorted(settings.RANDOM_STUDY.items()) for n, count, cap in entries
            if not spec.horizons or n in spec.horizons]


def _run_random(spec: ExperimentSpec, progress: Progress, should_stop: StopCheck) -> List[Dict]:
    cells = _random_cells(spec)
    schemes = [int(s[0]) for s in spec.lambdas]
    total = len(cells) * len(schemes)
    rows = []
    comparison = spec.comparisons[0]
    for n_slots, horizon, count, cap in cells:
        count = min(count, spec.instances) if spec.instances else count
        grid = thin_grid(enumerate_scenarios(horizon, n_slots, settings.RANDOM_FLOOR_FRACTION), cap)
        matrices = random_choice_matrices(n_slots, count, settings.RANDOM_SEED)
        for scheme in schemes:
            pairs = []
            for omega in matrices:
                if should_stop and should_stop():
                    raise ExperimentCancelled("experiment cancelled")
                template = ensure_valid(Instance(omega=omega, lam=lambda_scheme(scheme, omega.shape[0]),
                                                 horizon=horizon, capacity=grid.cover))
                base = scenario_values(template, comparison.base, grid, spec.mode, spec.days, spec.seed, should_stop)
                other = scenario_values(template, comparison.compared, grid, spec.mode, spec.days, spec.seed,
                                        should_stop)
                pairs.extend(zip(base, other))
            stats = gap_statistics(pairs, comparison.formula)
            row = _row(spec, comparison, f"random J={n_slots}", "N", horizon, f"scheme {scheme}", len(grid), stats)
            row["instances"] = count
            rows.append(row)
            logger.info(f"[{spec.name}] J={n_slots} N={horizon} scheme {scheme}: {stats}")
            if progress:
                progress(len(rows), total)
    return rows


def _run_multiday(spec: ExperimentSpec, progress: Progress, should_stop: StopCheck) -> List[Dict]:
    omega = canonical(spec.family)
    grid = enumerate_scenarios(settings.MULTIDAY_DEMAND, omega.shape[1])
    flexibility = list(settings.MULTIDAY_FLEXIBILITY)
    total = len(flexibility) * len(spec.lambdas) * len(spec.comparisons)
    rows = []
    for d in flexibility:
        for lam in spec.lambdas:
            methods = list(dict.fromkeys(m for c in spec.comparisons for m in (c.base, c.compared)))
            means: Dict[str, List[float]] = {method: [] for method in methods}
            for b in grid.vectors:
                if should_stop and should_stop():
                    raise ExperimentCancelled("experiment cancelled")
                template = ensure_valid(Instance(omega=omega, lam=lam, horizon=settings.MULTIDAY_DEMAND, capacity=b))
                config = MultiDayConfig(template=template, acceptable_days=d, demand_mode=spec.demand_mode,
                                        seed=spec.seed)
                # same seed for every policy on a scenario
                for method in methods:
                    means[method].append(simulate_multiday(config, method).mean)
            for comparison in spec.comparisons:
                stats = gap_statistics(list(zip(means[comparison.base], means[comparison.compared])),
                                       comparison.formula)
                rows.append(_row(spec, comparison, spec.family, "D", d, lambda_label(lam), len(grid), stats))
                logger.info(f"[{spec.name}] D={d} lambda=({lambda_label(lam)}) {comparison.label}: {stats}")
                if progress:
                    progress(len(rows), total)
    return rows


def run_table(spec: ExperimentSpec, progress: Progress = None, should_stop: StopCheck = None) -> List[Dict]:
    """One row per (N or D, lambda, comparison) with max / average / median percentages."""
    logger.info(f"Running table '{spec.name}' in {spec.mode} mode")
    if spec.kind == "random":
        return _run_random(spec, progress, should_stop)
    if spec.kind == "multiday":
        return _run_multiday(spec, progress, should_stop)
    if spec.kind == "families":
        families = [(f, settings.LAMBDA_GRIDS[f]) for f in FAMILY_SET]
        return _run_grid(spec, families, progress, should_stop)
    return _run_grid(spec, [(spec.family, spec.lambdas)], progress, should_stop)


def expected_rows(spec: ExperimentSpec) -> int:
    if spec.kind == "random":
        return len(_random_cells(spec)) * len(spec.lambdas)
    if spec.kind == "multiday":
        return len(settings.MULTIDAY_FLEXIBILITY) * len(spec.lambdas) * len(spec.comparisons)
    n_lambdas = sum(len(settings.LAMBDA_GRIDS[f]) for f in FAMILY_SET) if spec.kind == "families" else len(spec.lambdas)
    return n_lambdas * len(_horizons(spec)) * len(spec.comparisons)


# --- Output ---

def rows_to_frame(rows: List[Dict]) -> pd.DataFrame:
    return pd.DataFrame(rows)


def render_rows(rows: List[Dict], fmt: str = "csv", title: Optional[str] = None) -> str:
    frame = rows_to_frame(rows)
    if fmt == "csv":
        return frame.to_csv(index=False)
    if fmt == "json":
        return json.dumps({"title": title, "rows": rows}, indent=2)
    if fmt == "markdown":
        if frame.empty:
            return ""
        key = "D" if "D" in frame.columns else "N"
        wide = frame.pivot_table(
            index=["comparison", "family", key, "scenarios"], columns="lambda",
            values=["max", "average", "median"], sort=False,
        )
        wide.columns = [f"({lam}) {stat}" for stat, lam in wide.columns]
        text = wide.reset_index().to_markdown(index=False, floatfmt=".1f")
        return f"### {title}\n\n{text}\n" if title else text + "\n"
    raise UnknownNameError(f"unknown output format '{fmt}'")


# --- Policy maps ---

AXIS_NAMES = {"m1": 0, "m2": 1, "m3": 2, "m4": 3, "m5": 4, "m6": 5}


def _axis(name: str, n_slots: int) -> int:
    key = name.strip().lower()
    if key not in AXIS_NAMES or AXIS_NAMES[key] >= n_slots:
        raise SchedulingError(f"unknown state coordinate '{name}'")
    return AXIS_NAMES[key]


def emit_policy_map(instance: Instance, variant: str, fix: Dict[str, int], axes: Sequence[str],
                    table=None) -> List[Dict]:
    """Optimal action over a 2-D slice of the state space at fixed n and fixed remaining coordinates."""
    try:
        variant = Variant(variant.upper())
    except ValueError:
        raise UnknownNameError(f"unknown model '{variant}'")
    if variant not in (Variant.NONSEQ, Variant.SEQ):
        raise UnknownNameError("policy maps are drawn for the non-sequential or sequential model")
    n_slots = instance.n_slot_types
    if len(axes) != 2:
        raise SchedulingError("a policy map needs exactly two axes")
    ax = [_axis(a, n_slots) for a in axes]
    if "n" not in fix:
        raise SchedulingError("a policy map needs a fixed number of periods to go (n)")
    n = int(fix["n"])
    if not 1 <= n <= instance.horizon:
        raise SchedulingError(f"n={n} lies outside 1..{instance.horizon}")
    state = [0] * n_slots
    for name, value in fix.items():
        if name == "n":
            continue
        j = _axis(name, n_slots)
        if not 0 <= int(value) <= instance.capacity[j]:
            raise SchedulingError(f"{name}={value} lies outside the capacity lattice")
        state[j] = int(value)
    free = [j for j in range(n_slots) if j not in ax and f"m{j + 1}" not in fix]
    if free:
        raise SchedulingError(f"coordinates {[f'm{j + 1}' for j in free]} need fixed values")

    if table is None:
        table = solve_nonseq(instance) if variant == Variant.NONSEQ else solve_seq(instance, SeqMode.PERMUTATION)
    rows = []
    ties = 0
    for a in range(int(instance.capacity[ax[0]]) + 1):
        for b in range(int(instance.capacity[ax[1]]) + 1):
            m = list(state)
            m[ax[0]], m[ax[1]] = a, b
            best = optimal_actions(table, instance, n, m)
            unique = len(best) == 1
            ties += not unique
            rows.append({
                axes[0]: a,
                axes[1]: b,
                "n": n,
                "action": format_offer(best[0]),
                "unique": unique,
                "optimal": ";".join(format_offer(x) for x in best),
            })
    if ties:
        logger.warning(f"{ties} of {len(rows)} states in the policy map have several optimal actions")
    return rows
