"""Problem instances, offer actions and the customer choice model."""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core.config import settings
from app.core.errors import InstanceValidationError, SchedulingError, UnknownNameError

logger = logging.getLogger(__name__)

# Choice matrices of the four named instance families (rows: customer types, columns: slot types)
CANONICAL_MATRICES: Dict[str, List[List[int]]] = {
    "N": [[1, 1], [0, 1]],
    "W": [[1, 0], [1, 1], [0, 1]],
    "M": [[1, 1, 0], [0, 1, 1]],
    "M_PLUS_1": [[1, 1, 0], [0, 1, 1], [0, 1, 0]],
}

OfferSet = int
OfferSequence = Tuple[int, ...]


class InstanceDocument(BaseModel):
    """JSON contract shared by every CLI subcommand and HTTP endpoint."""
    model_config = ConfigDict(populate_by_name=True)

    omega: List[List[int]]
    lambda_: List[float] = Field(alias="lambda")
    horizon: int
    capacity: List[int]


def _choice_matrix(omega) -> np.ndarray:
    # ragged rows become an empty matrix so validate() can report them
    if not isinstance(omega, np.ndarray):
        rows = [list(row) if isinstance(row, (list, tuple, np.ndarray)) else [row] for row in omega]
        if len({len(row) for row in rows}) > 1:
            return np.zeros((0, 0), dtype=np.int64)
    return np.array(omega, dtype=np.int64, ndmin=2)


@dataclass(frozen=True, eq=False)
class Instance:
    omega: np.ndarray
    lam: np.ndarray
    horizon: int
    capacity: np.ndarray

    def __post_init__(self):
        omega = _choice_matrix(self.omega)
        lam = np.array(self.lam, dtype=float, ndmin=1)
        capacity = np.array(self.capacity, dtype=np.int64, ndmin=1)
        for arr in (omega, lam, capacity):
            arr.setflags(write=False)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "capacity", capacity)
        object.__setattr__(self, "horizon", int(self.horizon))

    @property
    def n_customer_types(self) -> int:
        return self.omega.shape[0]

    @property
    def n_slot_types(self) -> int:
        return self.omega.shape[1]

    @property
    def lambda0(self) -> float:
        return max(0.0, 1.0 - float(self.lam.sum()))

    @property
    def full_mask(self) -> int:
        return (1 << self.n_slot_types) - 1

    def replace(self, omega=None, lam=None, horizon=None, capacity=None) -> "Instance":
        return Instance(
            omega=self.omega if omega is None else omega,
            lam=self.lam if lam is None else lam,
            horizon=self.horizon if horizon is None else horizon,
            capacity=self.capacity if capacity is None else capacity,
        )

    def scaled(self, k: int) -> "Instance":
        """The K-th problem of the scaling sequence: horizon NK, capacity bK."""
        return self.replace(horizon=self.horizon * k, capacity=self.capacity * k)

    def accepting(self, j: int) -> frozenset:
        """I(j) for a 0-based slot type: the 0-based customer types accepting it."""
        return frozenset(np.flatnonzero(self.omega[:, j]).tolist())

    def to_document(self) -> Dict:
        return {
            "omega": self.omega.tolist(),
            "lambda": self.lam.tolist(),
            "horizon": self.horizon,
            "capacity": self.capacity.tolist(),
        }

    @classmethod
    def from_document(cls, doc) -> "Instance":
        """Parses an Instance JSON document (dict or InstanceDocument) and validates it."""
        if not isinstance(doc, InstanceDocument):
            doc = InstanceDocument.model_validate(doc)
        instance = cls(omega=doc.omega, lam=doc.lambda_, horizon=doc.horizon, capacity=doc.capacity)
        ensure_valid(instance)
        return instance


@dataclass(frozen=True, eq=False)
class OutcomeDistribution:
    q: np.ndarray
    q0: float

    @property
    def booking_probability(self) -> float:
        return float(self.q.sum())

    def as_list(self) -> List[float]:
        return self.q.tolist() + [self.q0]


# --- Offer sets and sequences ---

def offer_set(*types: int) -> OfferSet:
    """Bitmask of 1-based slot types."""
    mask = 0
    for j in types:
        mask |= 1 << (j - 1)
    return mask


def offer_types(mask: OfferSet) -> Tuple[int, ...]:
    """1-based slot types contained in a bitmask."""
    out = []
    j = 0
    while mask >> j:
        if (mask >> j) & 1:
            out.append(j + 1)
        j += 1
    return tuple(out)


def format_offer(action) -> str:
    """Renders an OfferSet as {1,3} and an OfferSequence as {1,3}-{2}."""
    if isinstance(action, (tuple, list)):
        if not action:
            return "{}"
        return "-".join(format_offer(int(s)) for s in action)
    return "{" + ",".join(str(j) for j in offer_types(int(action))) + "}"


def parse_offer(text: str):
    """Inverse of format_offer."""
    text = text.strip()
    parts = [p for p in text.split("-")]
    masks = []
    for part in parts:
        body = part.strip().strip("{}").strip()
        masks.append(offer_set(*[int(t) for t in body.split(",") if t.strip()]) if body else 0)
    return masks[0] if len(masks) == 1 else tuple(masks)


def available_mask(m: Sequence[int]) -> OfferSet:
    """Bitmask of S̄(m), the slot types with remaining capacity."""
    mask = 0
    for j, mj in enumerate(m):
        if mj > 0:
            mask |= 1 << j
    return mask


def submasks(mask: int) -> List[int]:
    """Every subset of mask, ascending, empty set included."""
    subs = []
    sub = mask
    while True:
        subs.append(sub)
        if sub == 0:
            break
        sub = (sub - 1) & mask
    return sorted(subs)


def check_sequence(seq: OfferSequence, avail: Optional[int] = None) -> List[str]:
    problems = []
    if len(seq) == 0:
        problems.append("empty offer sequence")
    seen = 0
    for s in seq:
        if s == 0:
            problems.append("empty set inside offer sequence")
        if s & seen:
            problems.append("offer sets overlap")
        seen |= s
    if avail is not None and seen & ~avail:
        problems.append("offer sequence contains a depleted slot type")
    return problems


def stages_from_action(action, n_slots: int) -> np.ndarray:
    """Stage vector of an action: entry j is k if slot type j+1 is in the k-th set, 0 if never offered."""
    seq = tuple(action) if isinstance(action, (tuple, list)) else (int(action),)
    stages = np.zeros(n_slots, dtype=np.int64)
    for k, s in enumerate(seq, start=1):
        for j in offer_types(s):
            stages[j - 1] = k
    return stages


def action_from_stages(stages: Sequence[int], sequential: bool):
    stages = [int(s) for s in stages]
    if not sequential:
        return sum(1 << j for j, s in enumerate(stages) if s > 0)
    seq = []
    for k in sorted(set(s for s in stages if s > 0)):
        seq.append(sum(1 << j for j, s in enumerate(stages) if s == k))
    return tuple(seq)


# --- Validation ---

def validate(instance: Instance) -> List[str]:
    """Returns every violated instance invariant; an empty list means the instance is valid."""
    errors = []
    omega, lam, capacity = instance.omega, instance.lam, instance.capacity

    if omega.ndim != 2 or omega.size == 0:
        return ["choice matrix must be a non-empty I x J matrix"]
    n_types, n_slots = omega.shape

    if not np.isin(omega, (0, 1)).all():
        errors.append("choice matrix entries must be 0 or 1")
    if n_slots > settings.MAX_SLOT_TYPES:
        errors.append(f"too many slot types ({n_slots} > {settings.MAX_SLOT_TYPES})")
    if (omega.sum(axis=1) == 0).any():
        errors.append("customer type accepts no slot type (zero row)")
    if len({tuple(row) for row in omega.tolist()}) < n_types:
        errors.append("duplicate customer type")

    if lam.shape != (n_types,):
        errors.append(f"expected {n_types} arrival probabilities, got {lam.size}")
    elif not np.isfinite(lam).all():
        errors.append("arrival probabilities must be finite numbers")
    else:
        if (lam <= 0).any() or (lam > 1).any():
            errors.append("arrival probabilities must lie in (0, 1]")
        if lam.sum() > 1.0 + settings.LAMBDA_TOL:
            errors.append("arrival probabilities exceed 1")

    if instance.horizon < 1:
        errors.append("horizon must be at least 1")
    if capacity.shape != (n_slots,):
        errors.append(f"expected {n_slots} capacities, got {capacity.size}")
    else:
        if (capacity < 0).any():
            errors.append("negative capacity")
        elif capacity.sum() == 0:
            errors.append("at least one slot type needs positive capacity")
    return errors


def ensure_valid(instance: Instance) -> Instance:
    errors = validate(instance)
    if errors:
        raise InstanceValidationError(errors)
    return instance


def canonical(name: str) -> np.ndarray:
    key = name.strip().upper().replace("+", "_PLUS_").replace("-", "_").replace("__", "_")
    if key == "MPLUS1" or key == "M_PLUS_1_":
        key = "M_PLUS_1"
    if key not in CANONICAL_MATRICES:
        raise UnknownNameError(f"unknown canonical instance '{name}'")
    return np.array(CANONICAL_MATRICES[key], dtype=np.int64)


def canonical_instance(name: str, lam: Sequence[float], horizon: int, capacity: Sequence[int]) -> Instance:
    return ensure_valid(Instance(omega=canonical(name), lam=lam, horizon=horizon, capacity=capacity))


# --- Choice probabilities ---

def conditional_choice(instance: Instance, i: int, s: OfferSet) -> np.ndarray:
    """q_{ij}(S) for the 1-based customer type i: uniform over the acceptable offered types."""
    if not 1 <= i <= instance.n_customer_types:
        raise SchedulingError(f"customer type {i} outside 1..{instance.n_customer_types}")
    row = instance.omega[i - 1]
    acceptable = row * _mask_vector(int(s), instance.n_slot_types)
    total = acceptable.sum()
    if total == 0:
        return np.zeros(instance.n_slot_types)
    return acceptable / total


def _mask_vector(mask: int, n_slots: int) -> np.ndarray:
    return (mask >> np.arange(n_slots)) & 1


def stage_outcomes(instance: Instance, stages: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised outcome distributions for a batch of stage vectors.

    stages has shape (R, J); row r offers slot type j in stage stages[r, j] (0 = not offered).
    A customer goes to the first stage holding an acceptable type and picks uniformly inside it.
    Returns q with shape (R, J) and q0 with shape (R,).
    """
    stages = np.atleast_2d(np.asarray(stages, dtype=np.int64))
    q = np.zeros(stages.shape, dtype=float)
    big = np.iinfo(np.int64).max
    for row, lam_i in zip(instance.omega.astype(bool), instance.lam):
        offered = (stages > 0) & row
        first = np.where(offered, stages, big).min(axis=1)
        chosen = offered & (stages == first[:, None])
        count = chosen.sum(axis=1)
        share = np.divide(lam_i, count, out=np.zeros(len(count)), where=count > 0)
        q += chosen * share[:, None]
    q0 = 1.0 - q.sum(axis=1)
    return q, q0


def outcome_distribution(instance: Instance, s: OfferSet) -> OutcomeDistribution:
    """q_j(S) = Σ_i λ_i q_ij(S), q0 = 1 - Σ_j q_j(S)."""
    q, q0 = stage_outcomes(instance, _mask_vector(int(s), instance.n_slot_types)[None, :])
    return OutcomeDistribution(q=q[0], q0=float(q0[0]))


def sequence_outcome_distribution(instance: Instance, seq: OfferSequence) -> OutcomeDistribution:
    """Outcome of offering S_1-...-S_K: each type stops at the first set holding an acceptable type."""
    stages = stages_from_action(tuple(seq), instance.n_slot_types)
    q, q0 = stage_outcomes(instance, stages[None, :])
    return OutcomeDistribution(q=q[0], q0=float(q0[0]))


def action_outcomes(instance: Instance, masks: Iterable[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Outcome distributions of single offer sets, one row per mask."""
    masks = list(masks)
    stages = np.array([_mask_vector(m, instance.n_slot_types) for m in masks], dtype=np.int64)
    return stage_outcomes(instance, stages.reshape(len(masks), instance.n_slot_types))


# --- Preference structure ---

def is_nested(omega) -> Tuple[bool, Optional[Tuple[int, int]]]:
    """True iff every pair of accepting sets I(j1), I(j2) is disjoint or comparable; else a 1-based witness."""
    omega = np.asarray(omega, dtype=bool)
    sets = [frozenset(np.flatnonzero(omega[:, j]).tolist()) for j in range(omega.shape[1])]
    for a in range(len(sets)):
        for b in range(a + 1, len(sets)):
            sa, sb = sets[a], sets[b]
            if sa.isdisjoint(sb) or sa <= sb or sb <= sa:
                continue
            return False, (a + 1, b + 1)
    return True, None


def nested_order(omega) -> List[int]:
    """0-based slot types ordered so that I(j1) ⊂ I(j2) puts j1 first; free pairs go by index."""
    omega = np.asarray(omega, dtype=bool)
    n_slots = omega.shape[1]
    sets = [frozenset(np.flatnonzero(omega[:, j]).tolist()) for j in range(n_slots)]
    # j must wait for every strict subset of its accepting set
    blockers = {j: {k for k in range(n_slots) if k != j and sets[k] < sets[j]} for j in range(n_slots)}
    order, placed = [], set()
    while len(order) < n_slots:
        ready = [j for j in range(n_slots) if j not in placed and blockers[j] <= placed]
        j = min(ready)
        order.append(j)
        placed.add(j)
    return order
