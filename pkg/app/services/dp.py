"""Backward induction over the remaining-capacity lattice.

Every solver works on a dense table V[n, s] where s is the mixed-radix index of the
capacity vector m (radices b_j + 1). Actions of all kinds are handled as stage vectors:
entry j holds the position of slot type j in the offer (0 = not offered), so an offer
set is a 0/1 row and an offer sequence S_1-...-S_K numbers its sets 1..K.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import binom

from app.core.config import settings
from app.core.errors import CapacityError, InfeasibleActionError, SchedulingError, UnknownNameError
from app.services.model import (
    Instance,
    action_from_stages,
    available_mask,
    stage_outcomes,
    stages_from_action,
    submasks,
)

logger = logging.getLogger(__name__)


class Variant(str, Enum):
    NONSEQ = "NONSEQ"
    SEQ = "SEQ"
    FULLINFO = "FULLINFO"
    POLICY = "POLICY"


class SeqMode(str, Enum):
    PERMUTATION = "PERMUTATION"
    EXHAUSTIVE = "EXHAUSTIVE"


class StateLattice:
    """All capacity vectors 0 <= m <= b in C order, with the index shift for m - e_j."""

    def __init__(self, capacity: Sequence[int]):
        self.capacity = np.asarray(capacity, dtype=np.int64)
        self.radices = tuple(int(b) + 1 for b in self.capacity)
        self.size = int(np.prod(self.radices))
        self.n_slots = len(self.radices)
        self.states = np.indices(self.radices).reshape(self.n_slots, -1).T.copy()
        self.strides = np.array(
            [int(np.prod(self.radices[j + 1:])) for j in range(self.n_slots)], dtype=np.int64
        )
        self.available = self.states > 0
        self.avail_masks = (self.available << np.arange(self.n_slots)).sum(axis=1)
        own = np.arange(self.size)
        # depleted coordinates point at the state itself; their outcome weight is always 0
        self.down = np.where(self.available, own[:, None] - self.strides, own[:, None])

    def index(self, m: Sequence[int]) -> int:
        m = tuple(int(x) for x in m)
        if len(m) != self.n_slots or any(x < 0 or x >= r for x, r in zip(m, self.radices)):
            raise SchedulingError(f"state {list(m)} lies outside the capacity lattice {self.capacity.tolist()}")
        return int(np.ravel_multi_index(m, self.radices))

    def indices(self, states: np.ndarray) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.asarray(states, dtype=np.int64).T), self.radices)


@dataclass(frozen=True, eq=False)
class ValueTable:
    variant: Variant
    capacity: np.ndarray
    horizon: int
    values: np.ndarray
    actions: Optional[np.ndarray] = None
    first_period: int = 0

    @property
    def lattice(self) -> StateLattice:
        return _lattice(tuple(int(b) for b in self.capacity))

    @property
    def sequential(self) -> bool:
        return self.variant in (Variant.SEQ, Variant.FULLINFO)

    def layer(self, n: int) -> np.ndarray:
        if n < self.first_period or n > self.horizon:
            raise SchedulingError(f"period {n} is not stored in this value table")
        return self.values[n - self.first_period]

    def value(self, n: int, m: Sequence[int]) -> float:
        return float(self.layer(n)[self.lattice.index(m)])

    @property
    def initial_value(self) -> float:
        """V_N(b)."""
        return self.value(self.horizon, self.capacity)

    def action(self, n: int, m: Sequence[int]):
        """Stored action at (n, m): an OfferSet, an OfferSequence, or for FULLINFO the 1-based slot per customer type."""
        if self.actions is None:
            raise SchedulingError("value table was solved without action storage")
        if n < 1:
            raise SchedulingError("no action is taken at n = 0")
        row = self.actions[n - self.first_period][self.lattice.index(m)]
        if self.variant == Variant.FULLINFO:
            return tuple(int(j) for j in row)
        return action_from_stages(row, sequential=self.variant == Variant.SEQ)

    def stage_layer(self, n: int) -> np.ndarray:
        if self.actions is None:
            raise SchedulingError("value table was solved without action storage")
        return self.actions[n - self.first_period]


@lru_cache(maxsize=32)
def _lattice(capacity: Tuple[int, ...]) -> StateLattice:
    return StateLattice(capacity)


def _check_budget(instance: Instance, layers: int) -> StateLattice:
    if instance.n_slot_types > settings.MAX_SLOT_TYPES:
        raise CapacityError(f"{instance.n_slot_types} slot types exceed the limit of {settings.MAX_SLOT_TYPES}")
    size = int(np.prod(instance.capacity + 1))
    if size * layers > settings.CELL_BUDGET:
        raise CapacityError(
            f"value table needs {size * layers} cells, budget is {settings.CELL_BUDGET}",
            detail={"cells": size * layers, "budget": settings.CELL_BUDGET},
        )
    return _lattice(tuple(int(b) for b in instance.capacity))


def _gains(lattice: StateLattice, v_prev: np.ndarray) -> np.ndarray:
    """G[s, j] = 1 + V_{n-1}(m - e_j) - V_{n-1}(m), the value of booking one type-j slot."""
    return 1.0 + v_prev[lattice.down] - v_prev[:, None]


def _mask_rows(n_slots: int) -> np.ndarray:
    masks = np.arange(1 << n_slots)
    return ((masks[:, None] >> np.arange(n_slots)) & 1).astype(np.int64)


def _maximise(gains: np.ndarray, outcomes: np.ndarray, feasible: np.ndarray, tol: float) -> Tuple[np.ndarray, np.ndarray]:
    """Best candidate per state; the first candidate within tol of the maximum wins."""
    n_states, n_cand = gains.shape[0], outcomes.shape[0]
    chunk = max(1, (1 << 22) // max(n_states, 1))
    best_val = np.full(n_states, -np.inf)
    best_idx = np.zeros(n_states, dtype=np.int64)
    for start in range(0, n_cand, chunk):
        stop = min(n_cand, start + chunk)
        q = gains @ outcomes[start:stop].T
        q[~feasible[:, start:stop]] = -np.inf
        chunk_max = q.max(axis=1)
        first = np.argmax(q >= chunk_max[:, None] - tol, axis=1) + start
        improve = chunk_max > best_val + tol
        best_idx = np.where(improve, first, best_idx)
        best_val = np.maximum(best_val, chunk_max)
    return best_val, best_idx


def solve_nonseq(instance: Instance, store_actions: bool = True) -> ValueTable:
    """Optimal non-sequential offering: max over every subset of the available types, empty set included."""
    lattice = _check_budget(instance, instance.horizon + 1)
    n_slots, tol = instance.n_slot_types, settings.VALUE_TOL
    logger.info(f"Solving non-sequential model: J={n_slots}, states={lattice.size}, N={instance.horizon}")

    rows = _mask_rows(n_slots)
    q, _ = stage_outcomes(instance, rows)
    masks = np.arange(1 << n_slots)
    feasible = (masks[None, :] & ~lattice.avail_masks[:, None]) == 0

    values = np.zeros((instance.horizon + 1, lattice.size))
    actions = np.zeros((instance.horizon + 1, lattice.size, n_slots), dtype=np.int8) if store_actions else None
    for n in range(1, instance.horizon + 1):
        v_prev = values[n - 1]
        best, idx = _maximise(_gains(lattice, v_prev), q, feasible, tol)
        values[n] = v_prev + best
        if store_actions:
            actions[n] = rows[idx]
        logger.debug(f"non-seq period {n} done")

    table = ValueTable(Variant.NONSEQ, instance.capacity.copy(), instance.horizon, values, actions)
    logger.info(f"Non-sequential V_N(b) = {table.initial_value:.6f}")
    return table


# --- Ordered set partitions ---

def ordered_partition_count(a: int) -> int:
    """Number of ordered partitions of an a-element set into nonempty blocks."""
    counts = [1]
    for size in range(1, a + 1):
        counts.append(sum(math.comb(size, k) * counts[size - k] for k in range(1, size + 1)))
    return counts[a]


def ordered_partitions(mask: int) -> Iterator[Tuple[int, ...]]:
    """Every sequence of disjoint nonempty blocks whose union is mask; blocks ascend by bitmask."""
    if mask == 0:
        yield ()
        return
    for block in submasks(mask):
        if block == 0:
            continue
        for rest in ordered_partitions(mask & ~block):
            yield (block,) + rest


def _sequence_candidates(avail: int, n_slots: int, include_partial: bool, max_stages: Optional[int]) -> np.ndarray:
    covers = submasks(avail) if include_partial else [avail]
    rows = []
    for cover in covers:
        for seq in ordered_partitions(cover):
            if max_stages is not None and len(seq) > max_stages:
                continue
            rows.append(stages_from_action(seq, n_slots) if seq else np.zeros(n_slots, dtype=np.int64))
    return np.array(rows, dtype=np.int64).reshape(len(rows), n_slots)


def solve_seq(
    instance: Instance,
    mode: SeqMode = SeqMode.PERMUTATION,
    store_actions: bool = True,
    include_partial: bool = False,
    max_stages: Optional[int] = None,
) -> ValueTable:
    """Optimal sequential offering.

    PERMUTATION offers the available singletons by decreasing V_{n-1}(m - e_j), lower index first on ties.
    EXHAUSTIVE searches ordered partitions of the available types (of any subset with include_partial,
    of at most max_stages sets when given) and keeps the first optimum in enumeration order.
    """
    mode = SeqMode(mode)
    lattice = _check_budget(instance, instance.horizon + 1)
    n_slots = instance.n_slot_types
    logger.info(f"Solving sequential model ({mode.value}): J={n_slots}, states={lattice.size}, N={instance.horizon}")

    values = np.zeros((instance.horizon + 1, lattice.size))
    actions = np.zeros((instance.horizon + 1, lattice.size, n_slots), dtype=np.int8) if store_actions else None

    if mode == SeqMode.PERMUTATION:
        for n in range(1, instance.horizon + 1):
            v_prev = values[n - 1]
            gains = _gains(lattice, v_prev)
            key = np.where(lattice.available, gains, -np.inf)
            order = np.argsort(-key, axis=1, kind="stable")
            ranks = np.argsort(order, axis=1)
            stages = np.where(lattice.available, ranks + 1, 0)
            q, _ = stage_outcomes(instance, stages)
            values[n] = v_prev + (q * gains).sum(axis=1)
            if store_actions:
                actions[n] = stages
    else:
        _check_exhaustive(instance)
        groups = {}
        for avail in np.unique(lattice.avail_masks):
            cand = _sequence_candidates(int(avail), n_slots, include_partial, max_stages)
            q, _ = stage_outcomes(instance, cand)
            groups[int(avail)] = (np.flatnonzero(lattice.avail_masks == avail), cand, q)
        logger.info(f"Exhaustive search over {sum(len(g[1]) for g in groups.values())} candidate sequences")
        for n in range(1, instance.horizon + 1):
            v_prev = values[n - 1]
            gains = _gains(lattice, v_prev)
            for members, cand, q in groups.values():
                feasible = np.ones((len(members), len(cand)), dtype=bool)
                best, idx = _maximise(gains[members], q, feasible, settings.VALUE_TOL)
                values[n, members] = v_prev[members] + best
                if store_actions:
                    actions[n, members] = cand[idx]

    table = ValueTable(Variant.SEQ, instance.capacity.copy(), instance.horizon, values, actions)
    logger.info(f"Sequential V_N(b) = {table.initial_value:.6f}")
    return table


def _check_exhaustive(instance: Instance):
    widest = int((instance.capacity > 0).sum())
    if widest > settings.EXHAUSTIVE_MAX_TYPES:
        raise CapacityError(
            f"exhaustive search over {widest} slot types ({ordered_partition_count(widest)} sequences per state) "
            f"exceeds the limit of {settings.EXHAUSTIVE_MAX_TYPES} types"
        )


def solve_fullinfo(instance: Instance, store_actions: bool = True) -> ValueTable:
    """Scheduler sees the arriving type and hands it the acceptable available slot with the largest value-to-go.

    Stored actions hold, per customer type, the assigned 1-based slot type (0 = nothing acceptable left).
    """
    lattice = _check_budget(instance, instance.horizon + 1)
    n_types = instance.n_customer_types
    logger.info(f"Solving full-information model: states={lattice.size}, N={instance.horizon}")

    values = np.zeros((instance.horizon + 1, lattice.size))
    actions = np.zeros((instance.horizon + 1, lattice.size, n_types), dtype=np.int8) if store_actions else None
    accept = instance.omega.astype(bool)
    for n in range(1, instance.horizon + 1):
        v_prev = values[n - 1]
        after = v_prev[lattice.down]
        gain = np.zeros(lattice.size)
        for i in range(n_types):
            allowed = lattice.available & accept[i]
            to_go = np.where(allowed, after, -np.inf)
            j_star = np.argmax(to_go, axis=1)
            served = allowed.any(axis=1)
            best = after[np.arange(lattice.size), j_star]
            gain += instance.lam[i] * np.where(served, 1.0 + best - v_prev, 0.0)
            if store_actions:
                actions[n, :, i] = np.where(served, j_star + 1, 0)
        values[n] = v_prev + gain

    table = ValueTable(Variant.FULLINFO, instance.capacity.copy(), instance.horizon, values, actions)
    logger.info(f"Full-information V_N(b) = {table.initial_value:.6f}")
    return table


def evaluate_policy(instance: Instance, policy, keep_all: bool = True) -> ValueTable:
    """Expected fill count of a fixed (possibly randomised) policy by backward induction.

    policy.mixture(instance, n, states) returns [(weight, stage matrix)] for a batch of states.
    With keep_all=False only V_N is kept, which is what scaled instances need.
    """
    lattice = _check_budget(instance, instance.horizon + 1 if keep_all else 2)
    name = getattr(policy, "name", type(policy).__name__)
    logger.info(f"Evaluating policy '{name}': states={lattice.size}, N={instance.horizon}")

    values = np.zeros((instance.horizon + 1 if keep_all else 1, lattice.size))
    v_prev = np.zeros(lattice.size)
    for n in range(1, instance.horizon + 1):
        gains = _gains(lattice, v_prev)
        gain = np.zeros(lattice.size)
        for weight, stages in policy.mixture(instance, n, lattice.states):
            stages = np.asarray(stages, dtype=np.int64)
            bad = (stages > 0) & ~lattice.available
            if bad.any():
                state = lattice.states[np.flatnonzero(bad.any(axis=1))[0]].tolist()
                raise InfeasibleActionError(
                    f"policy '{name}' offers a depleted slot type at n={n}, m={state}",
                    detail={"n": n, "m": state},
                )
            q, _ = stage_outcomes(instance, stages)
            gain += weight * (q * gains).sum(axis=1)
        v_prev = v_prev + gain
        if keep_all:
            values[n] = v_prev
    if not keep_all:
        values[0] = v_prev

    table = ValueTable(
        Variant.POLICY, instance.capacity.copy(), instance.horizon, values,
        first_period=0 if keep_all else instance.horizon,
    )
    logger.info(f"Policy '{name}' V_N(b) = {table.initial_value:.6f}")
    return table


def boundary_binomial(instance: Instance, p: float, x: int, n: Optional[int] = None) -> float:
    """E[min(x, Bin(n, p))]: fill of a single slot type with capacity x facing demand rate p.

    n defaults to the instance horizon.
    """
    n = instance.horizon if n is None else n
    if x <= 0 or n <= 0:
        return 0.0
    k = np.arange(n + 1)
    return float((np.minimum(x, k) * binom.pmf(k, n, min(max(p, 0.0), 1.0))).sum())


def marginal_values(table: ValueTable, n: int, m: Sequence[int]) -> np.ndarray:
    """Δ^j_{n-1}(m) = V_{n-1}(m) - V_{n-1}(m - e_j); NaN where m_j = 0."""
    if n < 1:
        raise SchedulingError("marginal values need n >= 1")
    lattice = table.lattice
    s = lattice.index(m)
    v_prev = table.layer(n - 1)
    return np.where(lattice.available[s], v_prev[s] - v_prev[lattice.down[s]], np.nan)


def marginal_value_grid(table: ValueTable, n: int) -> np.ndarray:
    """Δ^j_{n-1} over the whole lattice, shape (states, J)."""
    lattice = table.lattice
    v_prev = table.layer(n - 1)
    return np.where(lattice.available, v_prev[:, None] - v_prev[lattice.down], np.nan)


def optimal_actions(table: ValueTable, instance: Instance, n: int, m: Sequence[int]) -> List:
    """Every action attaining the optimum at (n, m) within VALUE_TOL."""
    if table.variant not in (Variant.NONSEQ, Variant.SEQ, Variant.FULLINFO):
        raise UnknownNameError(f"optimal actions are undefined for {table.variant.value} tables")
    lattice = table.lattice
    s = lattice.index(m)
    gains = _gains(lattice, table.layer(n - 1))[s]
    avail = available_mask(m)
    if table.variant == Variant.NONSEQ:
        candidates = submasks(avail)
        stages = np.array([stages_from_action(c, instance.n_slot_types) for c in candidates])
    else:
        if bin(avail).count("1") > settings.EXHAUSTIVE_MAX_TYPES:
            raise CapacityError("too many available slot types to enumerate sequences")
        candidates = list(ordered_partitions(avail)) or [()]
        stages = _sequence_candidates(avail, instance.n_slot_types, False, None) if avail else \
            np.zeros((1, instance.n_slot_types), dtype=np.int64)
    q, _ = stage_outcomes(instance, stages)
    scores = q @ gains
    best = scores.max()
    return [c for c, score in zip(candidates, scores) if score >= best - settings.VALUE_TOL]


# --- JSON export ---

def value_table_to_json(table: ValueTable) -> Dict:
    doc = {
        "variant": table.variant.value,
        "radices": list(table.lattice.radices),
        "capacity": table.capacity.tolist(),
        "horizon": table.horizon,
        "first_period": table.first_period,
        "values": table.values.tolist(),
    }
    if table.actions is not None:
        doc["actions"] = table.actions.tolist()
    return doc


def value_table_from_json(doc: Dict) -> ValueTable:
    try:
        variant = Variant(doc["variant"])
    except ValueError:
        raise UnknownNameError(f"unknown value table variant '{doc.get('variant')}'")
    actions = doc.get("actions")
    return ValueTable(
        variant=variant,
        capacity=np.asarray(doc["capacity"], dtype=np.int64),
        horizon=int(doc["horizon"]),
        values=np.asarray(doc["values"], dtype=float),
        actions=None if actions is None else np.asarray(actions, dtype=np.int8),
        first_period=int(doc.get("first_period", 0)),
    )


MODEL_NAMES = ["nonseq", "seq", "fullinfo"]


def solve_model(instance: Instance, model: str, exhaustive: bool = False, store_actions: bool = True) -> ValueTable:
    """Dispatches a model name (nonseq, seq, fullinfo) to its solver."""
    key = model.strip().lower()
    if key == "nonseq":
        return solve_nonseq(instance, store_actions=store_actions)
    if key == "seq":
        mode = SeqMode.EXHAUSTIVE if exhaustive else SeqMode.PERMUTATION
        return solve_seq(instance, mode, store_actions=store_actions)
    if key == "fullinfo":
        return solve_fullinfo(instance, store_actions=store_actions)
    raise UnknownNameError(f"unknown model '{model}'", detail={"known": MODEL_NAMES})
