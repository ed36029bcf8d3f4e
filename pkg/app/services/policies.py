"""Named scheduling rules.

Each policy maps a batch of states (rows of remaining capacity) at n periods to go onto
stage matrices, the action representation shared with the solvers in app.services.dp.
Randomised policies sample with a caller-supplied numpy Generator and expose their exact
law to the evaluator through mixture().
"""
import itertools
import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import settings
from app.core.errors import CapacityError, PolicyMismatchError, SchedulingError, UnknownNameError
from app.services.dp import SeqMode, ValueTable, Variant, solve_fullinfo, solve_nonseq, solve_seq
from app.services.model import CANONICAL_MATRICES, Instance, action_from_stages, action_outcomes, is_nested, nested_order

logger = logging.getLogger(__name__)

Mixture = List[Tuple[float, np.ndarray]]


def _ranks_to_stages(order: np.ndarray, available: np.ndarray) -> np.ndarray:
    ranks = np.argsort(order, axis=1)
    return np.where(available, ranks + 1, 0)


class Policy:
    name = "policy"
    sequential = False
    randomized = False

    def stages(self, instance: Instance, n: int, states: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        raise NotImplementedError

    def mixture(self, instance: Instance, n: int, states: np.ndarray) -> Mixture:
        return [(1.0, self.stages(instance, n, states))]

    def action(self, instance: Instance, n: int, m: Sequence[int], rng: Optional[np.random.Generator] = None):
        """Action at a single state, as an OfferSet or an OfferSequence."""
        row = self.stages(instance, n, np.asarray([m], dtype=np.int64), rng)[0]
        return action_from_stages(row, self.sequential)


class OfferingAll(Policy):
    name = "offering-all"

    def stages(self, instance, n, states, rng=None):
        return (np.asarray(states) > 0).astype(np.int64)


class Pi1(Policy):
    """Holds back the middle slot type of the M instance while both outer types remain."""
    name = "pi1"

    def __init__(self, instance: Instance):
        if instance.omega.tolist() != CANONICAL_MATRICES["M"]:
            raise PolicyMismatchError("pi1 applies to the M choice matrix only")

    def stages(self, instance, n, states, rng=None):
        states = np.asarray(states)
        offer = (states > 0).astype(np.int64)
        hold = (states[:, 0] > 0) & (states[:, 2] > 0)
        offer[hold, 1] = 0
        return offer


class NestedSequential(Policy):
    name = "nested-seq"
    sequential = True

    def __init__(self, instance: Instance):
        nested, witness = is_nested(instance.omega)
        if not nested:
            raise PolicyMismatchError(
                f"nested-seq needs a nested choice matrix; slot types {witness} overlap without inclusion",
                detail={"witness": list(witness)},
            )
        self.order = np.array(nested_order(instance.omega), dtype=np.int64)

    def stages(self, instance, n, states, rng=None):
        available = np.asarray(states) > 0
        order = np.broadcast_to(self.order, available.shape)
        return _ranks_to_stages(order, available)


class CorollarySequential(Policy):
    """Closed-form optimal sequences: {1}-{2} on N, {1,3}-{2} on M, restricted to what is available."""
    sequential = True
    STAGES = {"N": [1, 2], "M": [1, 2, 1]}

    def __init__(self, instance: Instance, family: str):
        family = family.upper()
        if family not in self.STAGES or instance.omega.tolist() != CANONICAL_MATRICES[family]:
            raise PolicyMismatchError(f"corollary policy for '{family}' does not match this choice matrix")
        self.name = f"corollary-{family.lower()}"
        self.template = np.array(self.STAGES[family], dtype=np.int64)

    def stages(self, instance, n, states, rng=None):
        return np.where(np.asarray(states) > 0, self.template, 0)


class Drain(Policy):
    """Offers singletons by decreasing ratio of remaining capacity to expected remaining load."""
    name = "drain"
    sequential = True

    def indices(self, instance: Instance, n: int, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64)
        available = (states > 0).astype(float)
        omega = instance.omega.astype(float)
        reach = available @ omega.T
        share = np.divide(instance.lam, reach, out=np.zeros_like(reach), where=reach > 0)
        load = n * (share @ omega)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(load > 0, states / np.where(load > 0, load, 1.0), np.inf)
        return ratio

    def stages(self, instance, n, states, rng=None):
        states = np.asarray(states, dtype=np.int64)
        available = states > 0
        key = np.where(available, self.indices(instance, n, states), -np.inf)
        order = np.argsort(-key, axis=1, kind="stable")
        return _ranks_to_stages(order, available)


class RandomSequential(Policy):
    name = "random-seq"
    sequential = True
    randomized = True

    def stages(self, instance, n, states, rng=None):
        if rng is None:
            raise SchedulingError("random-seq needs a random generator")
        available = np.asarray(states) > 0
        order = np.argsort(rng.random(available.shape), axis=1)
        return _ranks_to_stages(order, available)

    def mixture(self, instance, n, states):
        n_slots = instance.n_slot_types
        if n_slots > settings.EXHAUSTIVE_MAX_TYPES:
            raise CapacityError(f"exact random-seq evaluation over {math.factorial(n_slots)} permutations is too large")
        available = np.asarray(states) > 0
        weight = 1.0 / math.factorial(n_slots)
        out = []
        for perm in itertools.permutations(range(n_slots)):
            order = np.broadcast_to(np.array(perm), available.shape)
            out.append((weight, _ranks_to_stages(order, available)))
        return out


class StaticRandomizedPolicy(Policy):
    """Offers w^k with probability p_k regardless of state; depleted types in w^k are ignored."""
    name = "static-randomized"
    randomized = True

    def __init__(self, p: Sequence[float]):
        p = np.asarray(p, dtype=float)
        n_slots = int(round(math.log2(len(p)))) if len(p) else -1
        if len(p) == 0 or (1 << n_slots) != len(p):
            raise SchedulingError("static randomized policy needs one probability per subset of slot types")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-10:
            raise SchedulingError("static randomized probabilities must be non-negative and sum to 1")
        self.p = p
        masks = np.arange(len(p))
        self.rows = ((masks[:, None] >> np.arange(n_slots)) & 1).astype(np.int64)

    def stages(self, instance, n, states, rng=None):
        if rng is None:
            raise SchedulingError("static-randomized needs a random generator")
        available = np.asarray(states) > 0
        picks = rng.choice(len(self.p), size=len(available), p=self.p)
        return self.rows[picks] * available

    def mixture(self, instance, n, states):
        available = np.asarray(states) > 0
        return [(float(w), self.rows[k] * available) for k, w in enumerate(self.p) if w > 0]


class Myopic(Policy):
    """Offer set with the largest immediate booking probability; smallest bitmask on ties."""
    name = "myopic"

    def __init__(self, instance: Instance):
        q, _ = action_outcomes(instance, range(1 << instance.n_slot_types))
        self.booking = q.sum(axis=1)
        masks = np.arange(len(self.booking))
        self.rows = ((masks[:, None] >> np.arange(instance.n_slot_types)) & 1).astype(np.int64)

    def stages(self, instance, n, states, rng=None):
        states = np.asarray(states)
        avail = ((states > 0) << np.arange(states.shape[1])).sum(axis=1)
        feasible = (np.arange(len(self.booking))[None, :] & ~avail[:, None]) == 0
        score = np.where(feasible, self.booking[None, :], -np.inf)
        best = score.max(axis=1)
        pick = np.argmax(score >= best[:, None] - settings.VALUE_TOL, axis=1)
        return self.rows[pick]


class TablePolicy(Policy):
    """Replays the actions stored in a solved value table."""

    def __init__(self, table: ValueTable, name: Optional[str] = None):
        if table.actions is None or table.variant not in (Variant.NONSEQ, Variant.SEQ):
            raise PolicyMismatchError("table policy needs a non-sequential or sequential table with stored actions")
        self.table = table
        self.sequential = table.variant == Variant.SEQ
        self.name = name or f"table-{table.variant.value.lower()}"

    def stages(self, instance, n, states, rng=None):
        idx = self.table.lattice.indices(states)
        return self.table.stage_layer(n)[idx].astype(np.int64)


class FullInformationPolicy(Policy):
    """Sees the arriving customer type and assigns it one slot type; only the simulator runs it."""
    name = "fullinfo"
    sequential = True

    def __init__(self, table: ValueTable):
        if table.variant != Variant.FULLINFO or table.actions is None:
            raise PolicyMismatchError("fullinfo policy needs a full-information table with stored actions")
        self.table = table

    def assign(self, instance: Instance, n: int, states: np.ndarray) -> np.ndarray:
        """1-based slot type per (state, customer type); 0 when nothing acceptable is left."""
        idx = self.table.lattice.indices(states)
        return self.table.stage_layer(n)[idx].astype(np.int64)

    def stages(self, instance, n, states, rng=None):
        raise PolicyMismatchError("fullinfo decisions depend on the customer type; use assign()")

    def mixture(self, instance, n, states):
        raise PolicyMismatchError("fullinfo is evaluated by solve_fullinfo, not as an offer policy")


# --- single-state helpers ---

def offering_all(m: Sequence[int]) -> int:
    return OfferingAll().action(None, 1, m)


def pi1(m: Sequence[int]) -> int:
    m = list(m)
    if len(m) != 3:
        raise PolicyMismatchError("pi1 applies to the M choice matrix only")
    mask = sum(1 << j for j, mj in enumerate(m) if mj > 0)
    return mask & ~0b010 if m[0] > 0 and m[2] > 0 else mask


def nested_sequential(instance: Instance, m: Sequence[int]) -> Tuple[int, ...]:
    return NestedSequential(instance).action(instance, 1, m)


def drain(instance: Instance, n: int, m: Sequence[int]) -> Tuple[int, ...]:
    return Drain().action(instance, n, m)


def random_sequential(m: Sequence[int], rng: np.random.Generator) -> Tuple[int, ...]:
    available = np.asarray([m]) > 0
    return action_from_stages(RandomSequential().stages(None, 1, available.astype(np.int64), rng)[0], True)


def static_randomized(p: Sequence[float], rng: np.random.Generator):
    policy = StaticRandomizedPolicy(p)

    def decide(m: Sequence[int]) -> int:
        return policy.action(None, 1, m, rng)

    return decide


def myopic(instance: Instance, m: Sequence[int]) -> int:
    return Myopic(instance).action(instance, 1, m)


POLICY_NAMES = [
    "offering-all", "pi1", "nested-seq", "corollary-n", "corollary-m", "drain", "random-seq",
    "static-randomized", "optimal-nonseq", "optimal-seq", "fullinfo", "myopic",
]


def policy_from_name(name: str, instance: Instance, p: Optional[Sequence[float]] = None) -> Policy:
    """Resolves a CLI policy name; optimal policies solve the instance first."""
    key = name.strip().lower()
    if key == "offering-all":
        return OfferingAll()
    if key == "pi1":
        return Pi1(instance)
    if key == "nested-seq":
        return NestedSequential(instance)
    if key in ("corollary-n", "corollary-m"):
        return CorollarySequential(instance, key[-1])
    if key == "drain":
        return Drain()
    if key == "random-seq":
        return RandomSequential()
    if key == "myopic":
        return Myopic(instance)
    if key == "static-randomized":
        if p is None:
            from app.services.fluid import build_fluid, extract_pstar, solve_fluid

            return extract_pstar(solve_fluid(build_fluid(instance)))
        return StaticRandomizedPolicy(p)
    if key == "optimal-nonseq":
        return TablePolicy(solve_nonseq(instance), name=key)
    if key == "optimal-seq":
        return TablePolicy(solve_seq(instance, SeqMode.PERMUTATION), name=key)
    if key == "fullinfo":
        return FullInformationPolicy(solve_fullinfo(instance))
    raise UnknownNameError(f"unknown policy '{name}'", detail={"known": POLICY_NAMES})
