"""Error types shared across the package.

Every rejection carries a stable ``code`` string so that callers (CLI,
HTTP service, tests) can branch on it without parsing messages.
"""

from __future__ import annotations


class ZonepassError(Exception):
    """Base class for all package errors."""

    code = "ERROR"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
        self.message = message or self.code


class RejectSpec(ZonepassError):
    """A demand-process spec violates one of its invariants."""

    code = "REJECT_SPEC"


class RejectAction(ZonepassError):
    """A control action is invalid (non-positive rate multiplier)."""

    code = "REJECT_ACTION"


class NoConvergence(ZonepassError):
    """The stationary-distribution solve failed within the iteration cap."""

    code = "NO_CONVERGENCE"


class OutOfHorizon(ZonepassError):
    """A time or slot index falls outside the zone's booking horizon."""

    code = "OUT_OF_HORIZON"


class UnknownZone(ZonepassError):
    """The request names a zone this ledger does not manage."""

    code = "UNKNOWN_ZONE"


class StaleDecision(ZonepassError):
    """The ledger changed between evaluation and recording."""

    code = "STALE_DECISION"


class IllegalTransition(ZonepassError):
    """A coupon state change outside OFFERED->{ACTIVE,DECLINED}, ACTIVE->CONSUMED."""

    code = "ILLEGAL_TRANSITION"


class OfferExpired(ZonepassError):
    """The offer's reservation TTL elapsed before it was answered."""

    code = "OFFER_EXPIRED"


class NotInOffer(ZonepassError):
    """The chosen slot is not one of the offered alternatives."""

    code = "NOT_IN_OFFER"


class ScenarioInvalid(ZonepassError):
    """A simulation scenario fails validation."""

    code = "SCENARIO_INVALID"


class SpaceInvalid(ZonepassError):
    """A search space or objective weighting fails validation."""

    code = "SPACE_INVALID"


class CorruptLog(ZonepassError):
    """The event log is malformed; ``bad_seq`` is the first bad sequence number."""

    code = "CORRUPT_LOG"

    def __init__(self, message: str = "", bad_seq: int | None = None):
        super().__init__(message)
        self.bad_seq = bad_seq
