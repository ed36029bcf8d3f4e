"""Monte Carlo evaluation of booking policies: single-day replications and the rolling multi-day horizon."""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import settings
from app.core.errors import GapComputationError, InfeasibleActionError, SchedulingError, UnknownNameError
from app.services.model import Instance
from app.services.policies import FullInformationPolicy, Policy, policy_from_name

logger = logging.getLogger(__name__)

MULTIDAY_POLICIES = ("offering-all", "pi1", "nested-seq")


@dataclass
class SimReport:
    policy: str
    replications: int
    mean: float
    std_error: float
    fill_rate: float
    per_type_mean: List[float]
    seed: int
    counts: Optional[List[int]] = None
    turned_away: Optional[int] = None
    extra: Dict = field(default_factory=dict)

    def to_dict(self, keep_counts: bool = False) -> Dict:
        doc = asdict(self)
        if not keep_counts:
            doc.pop("counts")
        if self.turned_away is None:
            doc.pop("turned_away")
        return doc


@dataclass(frozen=True)
class MultiDayConfig:
    template: Instance
    acceptable_days: int = 1
    demand_mode: str = "det"
    window: int = settings.MULTIDAY_WINDOW
    demand: int = settings.MULTIDAY_DEMAND
    total_days: int = settings.MULTIDAY_TOTAL_DAYS
    warmup: int = settings.MULTIDAY_WARMUP
    seed: int = settings.DEFAULT_SEED

    def check(self):
        problems = []
        if not 1 <= self.acceptable_days <= self.window:
            problems.append("acceptable days must lie between 1 and the window length")
        if not 0 <= self.warmup < self.total_days:
            problems.append("warm-up must be shorter than the simulated horizon")
        if self.demand_mode not in ("det", "poisson"):
            problems.append("demand mode must be 'det' or 'poisson'")
        if self.demand < 0:
            problems.append("daily demand must be non-negative")
        if problems:
            raise SchedulingError("; ".join(problems), detail=problems)


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(block)])))


def _choose(stages: np.ndarray, accepts: np.ndarray, u: np.ndarray) -> np.ndarray:
    """0-based slot picked per row (-1 if none): first stage with an acceptable type, uniform inside it."""
    offered = (stages > 0) & accepts
    big = np.iinfo(np.int64).max
    first = np.where(offered, stages, big).min(axis=1)
    chosen = offered & (stages == first[:, None])
    count = chosen.sum(axis=1)
    k = np.floor(u * count).astype(np.int64)
    pick = np.argmax(np.cumsum(chosen, axis=1) > k[:, None], axis=1)
    return np.where(count > 0, pick, -1)


def _simulate_block(instance: Instance, policy: Policy, size: int, rng: np.random.Generator) -> np.ndarray:
    n_types, n_slots = instance.n_customer_types, instance.n_slot_types
    probs = np.append(instance.lam, instance.lambda0)
    probs = probs / probs.sum()
    accept = np.vstack([instance.omega.astype(bool), np.zeros((1, n_slots), dtype=bool)])
    m = np.tile(instance.capacity, (size, 1))
    rows = np.arange(size)

    for n in range(instance.horizon, 0, -1):
        arrivals = rng.choice(n_types + 1, size=size, p=probs)
        if isinstance(policy, FullInformationPolicy):
            assigned = np.hstack([policy.assign(instance, n, m), np.zeros((size, 1), dtype=np.int64)])
            slot = assigned[rows, arrivals] - 1
        else:
            stages = policy.stages(instance, n, m, rng)
            bad = (stages > 0) & (m == 0)
            if bad.any():
                state = m[np.flatnonzero(bad.any(axis=1))[0]].tolist()
                raise InfeasibleActionError(
                    f"policy '{policy.name}' offers a depleted slot type at n={n}, m={state}",
                    detail={"n": n, "m": state},
                )
            slot = _choose(stages, accept[arrivals], rng.random(size))
        booked = slot >= 0
        m[rows[booked], slot[booked]] -= 1
    return instance.capacity - m


def simulate_single_day(
    instance: Instance,
    policy: Policy,
    replications: Optional[int] = None,
    seed: Optional[int] = None,
    keep_counts: bool = False,
) -> SimReport:
    """Replicates N booking periods per day; replications run in seeded blocks of SIM_BLOCK_SIZE."""
    replications = settings.DEFAULT_REPLICATIONS if replications is None else replications
    seed = settings.DEFAULT_SEED if seed is None else seed
    if replications < 1:
        raise SchedulingError("replications must be at least 1")
    name = getattr(policy, "name", type(policy).__name__)
    logger.info(f"Simulating '{name}' for {replications} days (seed {seed})")

    fills = []
    for block, start in enumerate(range(0, replications, settings.SIM_BLOCK_SIZE)):
        size = min(settings.SIM_BLOCK_SIZE, replications - start)
        fills.append(_simulate_block(instance, policy, size, _block_rng(seed, block)))
        logger.debug(f"simulation block {block} done")
    fills = np.vstack(fills)
    counts = fills.sum(axis=1)

    total = int(instance.capacity.sum())
    report = SimReport(
        policy=name,
        replications=replications,
        mean=float(counts.mean()),
        std_error=float(counts.std(ddof=1) / np.sqrt(replications)) if replications > 1 else 0.0,
        fill_rate=float(counts.mean() / total),
        per_type_mean=fills.mean(axis=0).tolist(),
        seed=int(seed),
        counts=counts.tolist() if keep_counts else None,
    )
    logger.info(f"Simulated '{name}': mean fill {report.mean:.4f} +/- {report.std_error:.4f}")
    return report


def simulate_multiday(config: MultiDayConfig, policy_name: str, keep_counts: bool = False) -> SimReport:
    """Rolling window of bookable days; each customer tries her acceptable days in random order."""
    config.check()
    if policy_name not in MULTIDAY_POLICIES:
        raise UnknownNameError(
            f"multi-day simulation supports {', '.join(MULTIDAY_POLICIES)}; got '{policy_name}'"
        )
    template = config.template
    policy = policy_from_name(policy_name, template)
    rng = _block_rng(config.seed, 0)
    n_types = template.n_customer_types
    type_probs = template.lam / template.lam.sum()
    accepts = template.omega.astype(bool)
    cap = settings.POISSON_CAP_FACTOR * config.demand

    # (remaining capacity, customer type) -> slot types she may end up with on that day
    candidates: Dict[Tuple, List[int]] = {}

    def options(m: List[int], i: int) -> List[int]:
        key = (tuple(m), i)
        if key not in candidates:
            stages = policy.stages(template, 1, np.asarray([m], dtype=np.int64))[0]
            offered = [j for j in range(len(m)) if stages[j] > 0 and accepts[i, j]]
            first = min((stages[j] for j in offered), default=0)
            candidates[key] = [j for j in offered if stages[j] == first]
        return candidates[key]

    blank = template.capacity.tolist()
    window = [list(blank) for _ in range(config.window)]
    daily, per_type, turned_away = [], [], 0
    capped = 0
    logger.info(
        f"Multi-day simulation: policy={policy_name}, D={config.acceptable_days}, "
        f"demand={config.demand_mode}, {config.total_days} days"
    )

    for day in range(config.total_days):
        if config.demand_mode == "poisson":
            arrivals = int(rng.poisson(config.demand))
            if arrivals > cap:
                arrivals, capped = cap, capped + 1
        else:
            arrivals = config.demand
        types = rng.choice(n_types, size=arrivals, p=type_probs).tolist()
        visits = np.argsort(rng.random((arrivals, config.window)), axis=1)[:, : config.acceptable_days].tolist()
        uniforms = rng.random((arrivals, config.acceptable_days)).tolist()

        for c in range(arrivals):
            booked = False
            for d, u in zip(visits[c], uniforms[c]):
                m = window[d]
                slots = options(m, types[c])
                if slots:
                    m[slots[int(u * len(slots))]] -= 1
                    booked = True
                    break
            if not booked and day >= config.warmup:
                turned_away += 1

        closing = window.pop(0)
        window.append(list(blank))
        if day >= config.warmup:
            filled = template.capacity - np.asarray(closing)
            daily.append(int(filled.sum()))
            per_type.append(filled)

    if capped:
        logger.warning(f"Poisson arrivals hit the cap of {cap} on {capped} days")
    daily = np.asarray(daily)
    total = int(template.capacity.sum())
    report = SimReport(
        policy=policy_name,
        replications=len(daily),
        mean=float(daily.mean()),
        std_error=float(daily.std(ddof=1) / np.sqrt(len(daily))) if len(daily) > 1 else 0.0,
        fill_rate=float(daily.mean() / total) if total else 0.0,
        per_type_mean=np.mean(per_type, axis=0).tolist(),
        seed=int(config.seed),
        counts=daily.tolist() if keep_counts else None,
        turned_away=turned_away,
        extra={"acceptable_days": config.acceptable_days, "demand_mode": config.demand_mode},
    )
    logger.info(f"Multi-day '{policy_name}': mean daily fill {report.mean:.3f}")
    return report


def percentage_changes(pairs: Sequence[Tuple[float, float]]) -> np.ndarray:
    """(compared - base) / base * 100 for each (base, compared) pair."""
    values = np.asarray(pairs, dtype=float).reshape(-1, 2)
    if (values[:, 0] == 0).any():
        raise GapComputationError("cannot compute a percentage change against a zero base value")
    return (values[:, 1] - values[:, 0]) / values[:, 0] * 100.0


def gap_statistics(pairs: Sequence[Tuple[float, float]], formula: str = "gap") -> Dict[str, float]:
    """Max (largest magnitude), average and median of per-scenario percentage changes.

    formula "gap" reads pairs as (optimal, heuristic); "improvement" as (baseline, alternative).
    Both evaluate to (second - first) / first.
    """
    if formula not in ("gap", "improvement"):
        raise UnknownNameError(f"unknown statistic formula '{formula}'")
    if len(pairs) == 0:
        raise GapComputationError("no scenarios to summarise")
    changes = percentage_changes(pairs)
    return {
        "max": float(changes[np.argmax(np.abs(changes))]),
        "average": float(changes.mean()),
        "median": float(np.median(changes)),
    }
