"""Admission pipeline: free grant under the density threshold, else nearest
feasible alternative slots, else a paid coupon from the bunker, else reject.

All evaluation is read-only against a ledger snapshot; applying a decision
goes through ``ledger.record_decision`` which rejects stale decisions, so
two contenders for the last feasible unit resolve to exactly one grant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotInOffer, OfferExpired, OutOfHorizon
from .ledger import (
    ACTIVE,
    DECLINED,
    DENSITY_TOL,
    FREE,
    OFFERED,
    PAID,
    REGULATED,
    Coupon,
    Ledger,
    OfferRecord,
    Request,
    TimeSlot,
    ZonePolicy,
    projected_density,
)

GRANT = "GRANT"
OFFER = "OFFER"
PAID_GRANT = "PAID_GRANT"
REJECT = "REJECT"

REASON_EXHAUSTED = "FREE_AND_ALTERNATIVES_EXHAUSTED"
REASON_BUNKER = "BUNKER_EXHAUSTED"
REASON_UNWILLING = "UNWILLING_TO_PAY"

DEFAULT_OFFER_TTL_S = 300.0


@dataclass(frozen=True)
class Decision:
    """Outcome of one request evaluation.

    ``kind`` is GRANT / OFFER / PAID_GRANT / REJECT.  Grants carry one
    ACTIVE coupon; offers carry the ordered alternative slots with one
    pre-reserved OFFERED coupon each; rejects carry a reason.  ``binding``
    is False in ADVISORY mode: the decision is reported but records
    nothing.  ``evaluated_against`` stamps the ledger version the decision
    was computed at.
    """

    kind: str
    request_id: str
    zone_id: str
    evaluated_against: int
    binding: bool = True
    coupons: tuple[Coupon, ...] = ()
    alternatives: tuple[TimeSlot, ...] = ()
    reason: str | None = None
    offer_id: str | None = None
    expires_at: float = 0.0

    @property
    def coupon(self) -> Coupon | None:
        return self.coupons[0] if self.coupons else None


@dataclass(frozen=True)
class BunkerPlan:
    """Per-slot paid capacity that cannot worsen the hard-cap guarantee."""

    per_slot: tuple[int, ...]

    def b(self, slot_index: int) -> int:
        return self.per_slot[slot_index]


def size_bunker(policy: ZonePolicy) -> BunkerPlan:
    """Paid reserve per slot: floor((rho_hard - rho_free) * capacity).

    Sized for the conservative point-mass-entry bound, where projected
    density of n same-slot coupons is exactly n/capacity; entry jitter only
    lowers the peak expectation, so the hard cap holds for any jitter.
    """
    policy.validate()
    return BunkerPlan((policy.paid_bunker_per_slot,) * policy.horizon_slots)


def _affected_range(ledger: Ledger, slot_index: int) -> range:
    # Slots whose grid a coupon at slot_index can touch; the spill span is
    # the length of the precomputed one-coupon weight table.
    last = min(ledger.policy.horizon_slots, slot_index + len(ledger._weights))
    return range(slot_index, last)


def feasible_free(slot: TimeSlot | int, ledger: Ledger, request: Request) -> bool:
    """Would one more FREE coupon at ``slot`` stay within both thresholds?

    Checks every slot the candidate's transit can reach: FREE-only
    projected density must stay <= rho_free and total density <= rho_hard
    (the hard cap matters when transit spills into slots already carrying
    paid load).
    """
    policy = ledger.policy
    index = slot.index if isinstance(slot, TimeSlot) else int(slot)
    candidate = Coupon("?", request.request_id, policy.slot(index), FREE, ACTIVE)
    for s in _affected_range(ledger, index):
        if projected_density(ledger, s, (candidate,), kinds=(FREE,)) > policy.rho_free + DENSITY_TOL:
            return False
        if projected_density(ledger, s, (candidate,)) > policy.rho_hard + DENSITY_TOL:
            return False
    return True


def _paid_feasible(slot_index: int, ledger: Ledger, request: Request) -> bool:
    policy = ledger.policy
    if ledger.bunker_budget(slot_index) <= 0:
        return False
    candidate = Coupon("?", request.request_id, policy.slot(slot_index), PAID, ACTIVE)
    return all(
        projected_density(ledger, s, (candidate,)) <= policy.rho_hard + DENSITY_TOL
        for s in _affected_range(ledger, slot_index)
    )


def find_alternative_slots(request: Request, ledger: Ledger) -> list[TimeSlot]:
    """Feasible slots in the request's flexibility window, nearest first.

    Candidates are slots whose start lies within ``flexibility_s`` of the
    desired slot's start, excluding the desired slot itself and any slot
    already started by submission time.  Ordered by |start - desired start|
    ascending with ties to the earlier slot, truncated to k_alternatives.
    """
    policy = ledger.policy
    desired = request.resolve_desired(policy)
    desired_start = policy.slot(desired).start
    flex = request.flexibility_s
    delta = policy.slot_length_s
    lo = max(0, int(np.ceil((desired_start - flex) / delta - 1e-9)))
    hi = min(policy.horizon_slots - 1, int(np.floor((desired_start + flex) / delta + 1e-9)))
    candidates = []
    for i in range(lo, hi + 1):
        if i == desired:
            continue
        slot = policy.slot(i)
        if abs(slot.start - desired_start) > flex + 1e-9:
            continue
        if slot.start <= request.submitted_at:
            continue
        if feasible_free(slot, ledger, request):
            candidates.append(slot)
    candidates.sort(key=lambda s: (abs(s.start - desired_start), s.index))
    return candidates[: policy.k_alternatives]


def evaluate_request(
    request: Request,
    ledger: Ledger,
    *,
    ttl_s: float = DEFAULT_OFFER_TTL_S,
    now: float | None = None,
) -> Decision:
    """Run the decision pipeline against the current ledger snapshot.

    Pure given (request, ledger state, policy): no mutation happens here.
    Raises UnknownZone for a foreign zone and OutOfHorizon when the desired
    slot is outside the horizon or has already started (advance booking).
    """
    policy = ledger.policy
    desired = request.resolve_desired(policy)
    desired_slot = policy.slot(desired)
    if request.submitted_at >= desired_slot.start:
        raise OutOfHorizon(
            f"slot {desired} starts at {desired_slot.start}, already past "
            f"submission time {request.submitted_at}"
        )
    now = request.submitted_at if now is None else now
    binding = policy.mode == REGULATED
    common = dict(
        request_id=request.request_id,
        zone_id=policy.zone_id,
        evaluated_against=ledger.version,
        binding=binding,
    )

    if feasible_free(desired_slot, ledger, request):
        coupon = Coupon(ledger.peek_coupon_ids(1)[0], request.request_id, desired_slot, FREE, ACTIVE)
        return Decision(kind=GRANT, coupons=(coupon,), **common)

    alternatives = find_alternative_slots(request, ledger)
    if alternatives:
        ids = ledger.peek_coupon_ids(len(alternatives))
        coupons = tuple(
            Coupon(cid, request.request_id, slot, FREE, OFFERED)
            for cid, slot in zip(ids, alternatives)
        )
        return Decision(
            kind=OFFER,
            coupons=coupons,
            alternatives=tuple(alternatives),
            offer_id=ledger.peek_offer_id(),
            expires_at=now + ttl_s,
            **common,
        )

    paid_possible = _paid_feasible(desired, ledger, request)
    if request.willing_to_pay and paid_possible:
        coupon = Coupon(ledger.peek_coupon_ids(1)[0], request.request_id, desired_slot, PAID, ACTIVE)
        return Decision(kind=PAID_GRANT, coupons=(coupon,), **common)

    if request.willing_to_pay:
        reason = REASON_BUNKER
    elif paid_possible:
        reason = REASON_UNWILLING
    else:
        reason = REASON_EXHAUSTED
    return Decision(kind=REJECT, reason=reason, **common)


def _resolve_offer(ledger: Ledger, offer: "Decision | OfferRecord | str") -> OfferRecord:
    offer_id = offer if isinstance(offer, str) else offer.offer_id
    record = ledger.offers.get(offer_id)
    if record is None:
        raise NotInOffer(f"no open offer {offer_id!r}")
    return record


def _release_offer(ledger: Ledger, record: OfferRecord, keep: str | None = None) -> None:
    for cid in record.coupon_ids:
        if cid != keep:
            ledger.transition(cid, DECLINED)
    del ledger.offers[record.offer_id]


def accept_offer(
    ledger: Ledger,
    offer: "Decision | OfferRecord | str",
    chosen_slot: TimeSlot | int,
    *,
    now: float = 0.0,
) -> Decision:
    """Activate the chosen alternative and release its siblings.

    Mutates the ledger directly (this is the answer to an already-recorded
    offer, not a new decision to record).  Raises OfferExpired after the
    TTL, releasing every reserved slot, and NotInOffer for a slot that was
    not part of the offer.
    """
    record = _resolve_offer(ledger, offer)
    if now > record.expires_at:
        _release_offer(ledger, record)
        raise OfferExpired(f"offer {record.offer_id} expired at {record.expires_at}")
    chosen_index = chosen_slot.index if isinstance(chosen_slot, TimeSlot) else int(chosen_slot)
    chosen = next(
        (
            cid
            for cid in record.coupon_ids
            if ledger.coupons[cid].slot.index == chosen_index
        ),
        None,
    )
    if chosen is None:
        raise NotInOffer(f"slot {chosen_index} is not part of offer {record.offer_id}")
    coupon = ledger.transition(chosen, ACTIVE)
    _release_offer(ledger, record, keep=chosen)
    return Decision(
        kind=GRANT,
        request_id=record.request_id,
        zone_id=ledger.policy.zone_id,
        evaluated_against=ledger.version,
        binding=ledger.policy.mode == REGULATED,
        coupons=(coupon,),
    )


def decline_offer(ledger: Ledger, offer: "Decision | OfferRecord | str") -> None:
    """Release every slot reserved by the offer."""
    _release_offer(ledger, _resolve_offer(ledger, offer))


def expire_offers(ledger: Ledger, now: float) -> list[str]:
    """Release all offers whose TTL elapsed; returns the expired offer ids."""
    expired = [oid for oid, rec in ledger.offers.items() if now > rec.expires_at]
    for oid in expired:
        _release_offer(ledger, ledger.offers[oid])
    return expired


# -- wire / log serialization -------------------------------------------------

def decision_to_json(decision: Decision) -> dict:
    doc: dict = {
        "decision": decision.kind,
        "request_id": decision.request_id,
        "zone_id": decision.zone_id,
        "evaluated_against": decision.evaluated_against,
        "binding": decision.binding,
    }
    if decision.kind in (GRANT, PAID_GRANT):
        c = decision.coupon
        doc["coupon"] = {
            "coupon_id": c.coupon_id,
            "slot_index": c.slot.index,
            "slot_start_s": c.slot.start,
            "slot_end_s": c.slot.end,
            "kind": c.kind,
        }
    elif decision.kind == OFFER:
        doc["offer_id"] = decision.offer_id
        doc["expires_at"] = decision.expires_at
        doc["alternatives"] = [
            {
                "slot_index": s.index,
                "start_s": s.start,
                "end_s": s.end,
                "coupon_id": c.coupon_id,
            }
            for s, c in zip(decision.alternatives, decision.coupons)
        ]
    else:
        doc["reason"] = decision.reason
    return doc


def decision_from_json(doc: dict, policy: ZonePolicy) -> Decision:
    kind = doc["decision"]
    common = dict(
        kind=kind,
        request_id=doc["request_id"],
        zone_id=doc["zone_id"],
        evaluated_against=int(doc["evaluated_against"]),
        binding=bool(doc["binding"]),
    )
    if kind in (GRANT, PAID_GRANT):
        c = doc["coupon"]
        coupon = Coupon(c["coupon_id"], doc["request_id"], policy.slot(c["slot_index"]), c["kind"], ACTIVE)
        return Decision(coupons=(coupon,), **common)
    if kind == OFFER:
        slots = tuple(policy.slot(a["slot_index"]) for a in doc["alternatives"])
        coupons = tuple(
            Coupon(a["coupon_id"], doc["request_id"], slot, FREE, OFFERED)
            for a, slot in zip(doc["alternatives"], slots)
        )
        return Decision(
            coupons=coupons,
            alternatives=slots,
            offer_id=doc["offer_id"],
            expires_at=float(doc["expires_at"]),
            **common,
        )
    return Decision(reason=doc.get("reason"), **common)
