"""Zone model: slots, coupons, and the occupancy projection behind every
admission decision.

The ledger is the single authoritative registry for one zone.  It tracks
coupons through their OFFERED -> ACTIVE -> CONSUMED / DECLINED lifecycle,
keeps per-slot reservation counts, and projects expected occupancy onto an
11-point grid per slot (step slot_length/10).  Projected density is the
grid maximum of expected concurrent occupancy divided by capacity.

Occupancy contributions are analytic: a coupon granted in slot [a, b)
occupies the zone at time t with probability P(entry <= t < entry+transit)
under the zone's entry-jitter and transit laws.  Because slots are uniform
and the laws homogeneous, the contribution depends only on the slot lag,
so one small weight table per policy covers every coupon, including
transit that spills past the slot boundary into later slots.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import (
    IllegalTransition,
    OutOfHorizon,
    RejectSpec,
    StaleDecision,
    UnknownZone,
)
from .laws import (
    ENTRY_AT_START,
    ENTRY_JITTERS,
    ENTRY_UNIFORM,
    DurationLaw,
    Exponential,
    PointMass,
    law_from_json,
    law_to_json,
)

if TYPE_CHECKING:
    from .admission import Decision

FREE = "FREE"
PAID = "PAID"
KINDS = (FREE, PAID)

OFFERED = "OFFERED"
ACTIVE = "ACTIVE"
DECLINED = "DECLINED"
CONSUMED = "CONSUMED"
RESERVING = (OFFERED, ACTIVE)

REGULATED = "REGULATED"
ADVISORY = "ADVISORY"

GRID_POINTS = 11
# Tolerance for density-vs-threshold comparisons.  Real violations change
# density by at least 1/(11*C); 1e-12 only absorbs float rounding.
DENSITY_TOL = 1e-12
# One-coupon occupancy weights below this are treated as zero when sizing
# the spill span (exponential transit has unbounded support).
WEIGHT_CUTOFF = 1e-15


def int_floor(x: float, eps: float = 1e-9) -> int:
    """floor(x) robust to float rounding just below an integer (0.2*100 -> 20)."""
    return int(math.floor(x + eps))


@dataclass(frozen=True)
class ZonePolicy:
    """Per-zone admission parameters."""

    zone_id: str
    capacity: int
    slot_length_s: float
    rho_free: float
    rho_hard: float
    horizon_slots: int
    flexibility_default_s: float = 0.0
    k_alternatives: int = 3
    transit_law: DurationLaw = PointMass(600.0)
    entry_jitter: str = ENTRY_UNIFORM
    mode: str = REGULATED

    @property
    def horizon_s(self) -> float:
        return self.horizon_slots * self.slot_length_s

    @property
    def paid_bunker_per_slot(self) -> int:
        """Paid coupons issuable per slot without breaching the hard cap."""
        return int_floor((self.rho_hard - self.rho_free) * self.capacity)

    def slot(self, index: int) -> TimeSlot:
        if not 0 <= index < self.horizon_slots:
            raise OutOfHorizon(f"slot {index} outside 0..{self.horizon_slots - 1}")
        start = index * self.slot_length_s
        return TimeSlot(self.zone_id, index, start, start + self.slot_length_s)

    def validate(self) -> None:
        if self.capacity < 1:
            raise RejectSpec(f"capacity must be >= 1, got {self.capacity}")
        if not self.slot_length_s > 0.0:
            raise RejectSpec(f"slot length must be > 0, got {self.slot_length_s}")
        if not 0.0 < self.rho_free <= self.rho_hard <= 1.0:
            raise RejectSpec(
                f"need 0 < rho_free <= rho_hard <= 1, got {self.rho_free}, {self.rho_hard}"
            )
        if self.horizon_slots < 1:
            raise RejectSpec(f"horizon must be >= 1 slot, got {self.horizon_slots}")
        if self.k_alternatives < 1:
            raise RejectSpec(f"k_alternatives must be >= 1, got {self.k_alternatives}")
        if self.flexibility_default_s < 0.0:
            raise RejectSpec("default flexibility must be >= 0")
        if not isinstance(self.transit_law, (PointMass, Exponential)):
            raise RejectSpec("transit law must be point-mass or exponential")
        if isinstance(self.transit_law, PointMass) and self.transit_law.value < 0.0:
            raise RejectSpec("transit duration must be >= 0")
        if self.entry_jitter not in ENTRY_JITTERS:
            raise RejectSpec(f"entry_jitter must be one of {ENTRY_JITTERS}")
        if self.mode not in (REGULATED, ADVISORY):
            raise RejectSpec(f"mode must be REGULATED or ADVISORY, got {self.mode!r}")


@dataclass(frozen=True)
class TimeSlot:
    """Half-open booking interval [start, end) of one slot."""

    zone_id: str
    index: int
    start: float
    end: float


@dataclass(frozen=True)
class Request:
    """One participant's entry application.

    The desired slot may be given as an index or as a timestamp; exactly
    one is required and the timestamp form is mapped through ``slot_of``
    at evaluation time.
    """

    request_id: str
    zone_id: str
    desired_slot: int | None = None
    desired_time_s: float | None = None
    flexibility_s: float = 0.0
    willing_to_pay: bool = False
    submitted_at: float = 0.0

    def resolve_desired(self, policy: ZonePolicy) -> int:
        if self.zone_id != policy.zone_id:
            raise UnknownZone(f"zone {self.zone_id!r} not managed here")
        if self.flexibility_s < 0.0:
            raise RejectSpec("request flexibility must be >= 0")
        if self.desired_slot is not None:
            if not 0 <= self.desired_slot < policy.horizon_slots:
                raise OutOfHorizon(f"desired slot {self.desired_slot} outside horizon")
            return self.desired_slot
        if self.desired_time_s is None:
            raise RejectSpec("request needs desired_slot or desired_time_s")
        return slot_of(self.desired_time_s, policy).index


@dataclass
class Coupon:
    """Electronic entry permission for one request and slot."""

    coupon_id: str
    request_id: str
    slot: TimeSlot
    kind: str
    state: str = OFFERED


LEGAL_TRANSITIONS = {
    (OFFERED, ACTIVE),
    (OFFERED, DECLINED),
    (ACTIVE, CONSUMED),
}


@dataclass
class OfferRecord:
    """Grouping of sibling OFFERED coupons answered as one unit."""

    offer_id: str
    request_id: str
    coupon_ids: tuple[str, ...]
    expires_at: float


def slot_of(time_s: float, policy: ZonePolicy) -> TimeSlot:
    """Slot containing ``time_s``; intervals are half-open [start, end)."""
    if time_s < 0.0 or time_s >= policy.horizon_s:
        raise OutOfHorizon(f"time {time_s} outside [0, {policy.horizon_s})")
    return policy.slot(int(time_s // policy.slot_length_s))


def _one_coupon_weights(policy: ZonePolicy) -> np.ndarray:
    """Occupancy weights of a single coupon, indexed (slot lag, grid point).

    Row k gives P(present at t) on the 11-point grid of the k-th slot after
    the coupon's own, for one coupon booked into slot [0, delta).  Rows stop
    once the whole row falls below WEIGHT_CUTOFF.
    """
    delta = policy.slot_length_s
    transit = policy.transit_law
    rows = []
    for lag in range(policy.horizon_slots):
        row = np.zeros(GRID_POINTS)
        for g in range(GRID_POINTS):
            t = lag * delta + g * (delta / 10.0)
            if policy.entry_jitter == ENTRY_AT_START:
                row[g] = transit.survival(t)
            else:
                row[g] = transit.survival_integral(t - min(t, delta), t) / delta
        rows.append(row)
        if lag >= 1 and row.max() < WEIGHT_CUTOFF:
            break
    return np.array(rows)


class Ledger:
    """Authoritative, serially-mutated registry of coupons for one zone.

    Every mutation bumps ``version``; decisions record the version they
    were evaluated against and recording them against a newer ledger
    raises StaleDecision so the caller re-evaluates.
    """

    def __init__(self, policy: ZonePolicy):
        policy.validate()
        self.policy = policy
        self.coupons: dict[str, Coupon] = {}
        self.offers: dict[str, OfferRecord] = {}
        self.version = 0
        self._counts = np.zeros((policy.horizon_slots, 2), dtype=np.int64)
        self._weights = _one_coupon_weights(policy)
        self._next_coupon = 1
        self._next_offer = 1

    # -- id minting (peeked at evaluation, committed at record) ------------

    def peek_coupon_ids(self, count: int) -> list[str]:
        return [f"c{self._next_coupon + i}" for i in range(count)]

    def peek_offer_id(self) -> str:
        return f"o{self._next_offer}"

    def _commit_id(self, coupon_id: str) -> None:
        self._next_coupon = max(self._next_coupon, int(coupon_id[1:]) + 1)

    # -- counts and budgets -------------------------------------------------

    def per_slot_counts(self) -> np.ndarray:
        """(horizon, 2) array of reserving coupons by slot and kind (FREE, PAID)."""
        return self._counts.copy()

    def recount(self) -> np.ndarray:
        """Full recount of OFFERED/ACTIVE coupons by slot and kind (test oracle)."""
        counts = np.zeros_like(self._counts)
        for c in self.coupons.values():
            if c.state in RESERVING:
                counts[c.slot.index, KINDS.index(c.kind)] += 1
        return counts

    def bunker_budget(self, slot_index: int) -> int:
        """Remaining paid capacity of a slot."""
        paid = int(self._counts[slot_index, 1])
        return self.policy.paid_bunker_per_slot - paid

    # -- mutations ------------------------------------------------------------

    def install_coupon(self, coupon: Coupon) -> None:
        if coupon.coupon_id in self.coupons:
            raise StaleDecision(f"coupon id {coupon.coupon_id} already installed")
        self.coupons[coupon.coupon_id] = coupon
        if coupon.state in RESERVING:
            self._counts[coupon.slot.index, KINDS.index(coupon.kind)] += 1
        self._commit_id(coupon.coupon_id)
        self.version += 1

    def install_offer(self, record: OfferRecord) -> None:
        self.offers[record.offer_id] = record
        self._next_offer = max(self._next_offer, int(record.offer_id[1:]) + 1)

    def transition(self, coupon_id: str, to_state: str) -> Coupon:
        coupon = self.coupons.get(coupon_id)
        if coupon is None:
            raise IllegalTransition(f"unknown coupon {coupon_id}")
        if (coupon.state, to_state) not in LEGAL_TRANSITIONS:
            raise IllegalTransition(f"{coupon.state} -> {to_state} not allowed")
        if to_state in (DECLINED, CONSUMED):
            self._counts[coupon.slot.index, KINDS.index(coupon.kind)] -= 1
        coupon.state = to_state
        self.version += 1
        return coupon

    def active_request_ids(self) -> set[str]:
        return {c.request_id for c in self.coupons.values() if c.state == ACTIVE}

    def has_reserving_coupons(self) -> bool:
        return bool(np.any(self._counts))

    def swap_policy(self, policy: ZonePolicy) -> None:
        """Replace the policy; callers enforce the immutability preconditions."""
        policy.validate()
        self.policy = policy
        self._weights = _one_coupon_weights(policy)
        self.version += 1

    def clone(self) -> "Ledger":
        return copy.deepcopy(self)

    # -- canonical serialization (replay oracle) -----------------------------

    def canonical_state(self) -> dict:
        return {
            "policy": zone_policy_to_json(self.policy),
            "version": self.version,
            "coupons": [
                {
                    "coupon_id": c.coupon_id,
                    "request_id": c.request_id,
                    "slot": c.slot.index,
                    "kind": c.kind,
                    "state": c.state,
                }
                for _, c in sorted(self.coupons.items())
            ],
            "offers": [
                {
                    "offer_id": o.offer_id,
                    "request_id": o.request_id,
                    "coupon_ids": list(o.coupon_ids),
                    "expires_at": o.expires_at,
                }
                for _, o in sorted(self.offers.items())
            ],
            "counts": self._counts.tolist(),
        }


def occupancy_profile(
    ledger: Ledger,
    slot: TimeSlot | int,
    extra: Sequence[Coupon] = (),
    kinds: Iterable[str] | None = None,
) -> np.ndarray:
    """Expected concurrent occupancy on the slot's 11-point evaluation grid.

    Sums P(entry <= t < entry + transit) over every reserving coupon in the
    ledger plus the hypothetical ``extra`` coupons; coupons booked into
    earlier slots contribute through transit spill.  ``kinds`` restricts
    the sum to FREE or PAID coupons.
    """
    index = slot.index if isinstance(slot, TimeSlot) else int(slot)
    if not 0 <= index < ledger.policy.horizon_slots:
        raise OutOfHorizon(f"slot {index} outside horizon")
    wanted = KINDS if kinds is None else tuple(kinds)
    cols = [KINDS.index(k) for k in wanted]
    per_slot = ledger._counts[:, cols].sum(axis=1).astype(float)
    for c in extra:
        if c.kind in wanted and 0 <= c.slot.index < ledger.policy.horizon_slots:
            per_slot[c.slot.index] += 1.0
    weights = ledger._weights
    profile = np.zeros(GRID_POINTS)
    for lag in range(min(len(weights), index + 1)):
        n = per_slot[index - lag]
        if n:
            profile += n * weights[lag]
    return profile


def projected_density(
    ledger: Ledger,
    slot: TimeSlot | int,
    extra: Sequence[Coupon] = (),
    kinds: Iterable[str] | None = None,
) -> float:
    """Grid maximum of expected occupancy divided by capacity."""
    return float(occupancy_profile(ledger, slot, extra, kinds).max()) / ledger.policy.capacity


def record_decision(ledger: Ledger, decision: "Decision") -> Ledger:
    """Apply an admission decision to the ledger it was evaluated against.

    Atomic: either every coupon of the decision is installed or none is.
    Raises StaleDecision when the ledger has moved past the version the
    decision was computed at.
    """
    if decision.evaluated_against != ledger.version:
        raise StaleDecision(
            f"decision evaluated at version {decision.evaluated_against}, "
            f"ledger now at {ledger.version}"
        )
    if not decision.binding or not decision.coupons:
        return ledger
    clash = [c.coupon_id for c in decision.coupons if c.coupon_id in ledger.coupons]
    if clash:
        raise StaleDecision(f"coupon ids already installed: {clash}")
    for coupon in decision.coupons:
        ledger.install_coupon(coupon)
    if decision.offer_id is not None:
        ledger.install_offer(
            OfferRecord(
                offer_id=decision.offer_id,
                request_id=decision.request_id,
                coupon_ids=tuple(c.coupon_id for c in decision.coupons),
                expires_at=decision.expires_at,
            )
        )
    return ledger


def coupon_transition(ledger: Ledger, coupon_id: str, to_state: str) -> Ledger:
    """Move one coupon through its state machine (see LEGAL_TRANSITIONS)."""
    ledger.transition(coupon_id, to_state)
    return ledger


# -- policy file (JSON) ------------------------------------------------------

def zone_policy_from_json(obj: dict) -> ZonePolicy:
    slot_length = obj.get("slot_length_s")
    if slot_length is None and "slot_length_min" in obj:
        slot_length = float(obj["slot_length_min"]) * 60.0
    flexibility = obj.get("flexibility_default_s")
    if flexibility is None and "flexibility_default_min" in obj:
        flexibility = float(obj["flexibility_default_min"]) * 60.0
    jitter = obj.get("entry_jitter", ENTRY_UNIFORM)
    policy = ZonePolicy(
        zone_id=str(obj.get("zone_id", "A1")),
        capacity=int(obj["capacity"]),
        slot_length_s=float(slot_length),
        rho_free=float(obj["rho_free"]),
        rho_hard=float(obj["rho_hard"]),
        horizon_slots=int(obj["horizon_slots"]),
        flexibility_default_s=float(flexibility or 0.0),
        k_alternatives=int(obj.get("k_alternatives", 3)),
        transit_law=law_from_json(obj["transit"]),
        entry_jitter=jitter if isinstance(jitter, str) else str(jitter),
        mode=str(obj.get("mode", REGULATED)),
    )
    policy.validate()
    return policy


def zone_policy_to_json(policy: ZonePolicy) -> dict:
    return {
        "zone_id": policy.zone_id,
        "capacity": policy.capacity,
        "slot_length_s": policy.slot_length_s,
        "rho_free": policy.rho_free,
        "rho_hard": policy.rho_hard,
        "horizon_slots": policy.horizon_slots,
        "flexibility_default_s": policy.flexibility_default_s,
        "k_alternatives": policy.k_alternatives,
        "transit": law_to_json(policy.transit_law),
        "entry_jitter": policy.entry_jitter,
        "mode": policy.mode,
    }
