"""Discrete-event simulation coupling demand, admission, and randomized
entry/transit into policy metrics.

A run is strictly sequential in event order and a pure function of its
scenario (the seed is part of the scenario).  Three independent substreams
keep replications comparable: demand generation, participant behaviour on
offers, and entry/transit realization.  ``compare_policies`` reuses the
demand substream across policy variants (common random numbers).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .admission import (
    GRANT,
    OFFER,
    PAID_GRANT,
    REJECT,
    accept_offer,
    decline_offer,
    evaluate_request,
)
from .demand import ControlAction, DemandEvent, DemandProcessSpec, generate_horizon
from .errors import OutOfHorizon, ScenarioInvalid, ZonepassError
from .laws import ENTRY_AT_START
from .ledger import (
    FREE,
    PAID,
    REGULATED,
    Coupon,
    Ledger,
    ZonePolicy,
    record_decision,
)


@dataclass(frozen=True)
class Scenario:
    """One simulation setup: demand model, zone policy, control, behaviour."""

    demand: DemandProcessSpec
    policy: ZonePolicy
    control: ControlAction = ControlAction()
    p_accept_offer: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        try:
            self.demand.validate()
            self.policy.validate()
            self.control.validate()
        except ZonepassError as exc:
            raise ScenarioInvalid(str(exc)) from exc
        if not 0.0 <= self.p_accept_offer <= 1.0:
            raise ScenarioInvalid(f"p_accept_offer must lie in [0,1], got {self.p_accept_offer}")


@dataclass(frozen=True)
class TraceEvent:
    t: float
    kind: str  # REQUEST | DECISION | ACCEPT | DECLINE | ENTRY | EXIT
    payload: dict


@dataclass
class Trace:
    """Ordered event log plus the realized occupancy step function."""

    horizon_s: float
    events: list[TraceEvent] = field(default_factory=list)
    # (time, new occupancy level) changes; level before the first change is 0
    occupancy_steps: list[tuple[float, int]] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [
            json.dumps({"t": e.t, "kind": e.kind, **e.payload}, sort_keys=True)
            for e in self.events
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    def entries(self) -> int:
        return sum(1 for e in self.events if e.kind == "ENTRY")

    def exits_within_horizon(self) -> int:
        return sum(1 for e in self.events if e.kind == "EXIT" and e.t <= self.horizon_s)

    def occupancy_at_end(self) -> int:
        level = 0
        for t, lvl in self.occupancy_steps:
            if t > self.horizon_s:
                break
            level = lvl
        return level


@dataclass(frozen=True)
class Metrics:
    """Per-run outcome rates and congestion measures.

    Rates are fractions of all submitted requests.  ``reject_rate`` counts
    system rejections; declined offers and out-of-horizon submissions are
    tracked separately so the accounting identity
    grant + offer_converted + offer_declined + paid + reject + out_of_horizon = 1
    holds exactly.
    """

    requests: int
    grant_rate: float
    offer_rate: float
    offer_converted_rate: float
    offer_declined_rate: float
    paid_share: float
    reject_rate: float
    out_of_horizon_rate: float
    mean_offset_s: float
    overload_probability: float
    peak_density: float
    throughput: int
    slot_length_s: float

    def accounting_total(self) -> float:
        return (
            self.grant_rate
            + self.offer_converted_rate
            + self.offer_declined_rate
            + self.paid_share
            + self.reject_rate
            + self.out_of_horizon_rate
        )

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def realize_entry_time(coupon: Coupon, policy: ZonePolicy, rng: np.random.Generator) -> float:
    """Entry instant within the granted slot under the zone's jitter law."""
    if policy.entry_jitter == ENTRY_AT_START:
        return coupon.slot.start
    return float(rng.uniform(coupon.slot.start, coupon.slot.end))


def _occupancy_steps(
    entries: list[tuple[float, str]], exits: list[tuple[float, str]]
) -> list[tuple[float, int]]:
    # entries sort before exits at equal times so occupancy never dips below 0
    deltas = [(t, 0, cid, +1) for t, cid in entries] + [(t, 1, cid, -1) for t, cid in exits]
    deltas.sort(key=lambda d: (d[0], d[1], d[2]))
    steps = []
    level = 0
    for t, _, _, change in deltas:
        level += change
        if steps and steps[-1][0] == t:
            steps[-1] = (t, level)
        else:
            steps.append((t, level))
    return steps


def run(scenario: Scenario, events: list[DemandEvent] | None = None) -> tuple[Metrics, Trace]:
    """Simulate one horizon; deterministic given the scenario.

    ``events`` may carry a precomputed demand stream (must come from
    ``generate_horizon`` with this scenario's demand, control, horizon and
    seed); ``compare_policies`` uses this to share streams across variants.
    """
    scenario.validate()
    policy = scenario.policy
    if events is None:
        events = generate_horizon(
            scenario.demand,
            scenario.control,
            policy.horizon_s,
            scenario.seed,
            zone_id=policy.zone_id,
        )
    rng_behaviour = np.random.default_rng([scenario.seed, 1])
    rng_realize = np.random.default_rng([scenario.seed, 2])

    ledger = Ledger(policy)
    binding = policy.mode == REGULATED
    trace = Trace(horizon_s=policy.horizon_s)
    admitted: list[tuple[str, int, str]] = []  # (request_id, slot index, kind)
    n = dict.fromkeys(
        ("requests", "grant", "converted", "declined", "paid", "reject", "ooh"), 0
    )
    offers = 0
    offsets: list[float] = []

    for event in events:
        for request in event.requests:
            n["requests"] += 1
            trace.events.append(
                TraceEvent(
                    event.epoch,
                    "REQUEST",
                    {
                        "request_id": request.request_id,
                        "desired_time_s": request.desired_time_s,
                        "desired_slot": request.desired_slot,
                        "willing_to_pay": request.willing_to_pay,
                    },
                )
            )
            try:
                decision = evaluate_request(request, ledger, now=event.epoch)
            except OutOfHorizon as exc:
                n["ooh"] += 1
                trace.events.append(
                    TraceEvent(
                        event.epoch,
                        "DECISION",
                        {"request_id": request.request_id, "decision": "OUT_OF_HORIZON",
                         "detail": str(exc)},
                    )
                )
                continue
            desired_start = policy.slot(request.resolve_desired(policy)).start
            trace.events.append(
                TraceEvent(
                    event.epoch,
                    "DECISION",
                    {
                        "request_id": request.request_id,
                        "decision": decision.kind,
                        "slots": [c.slot.index for c in decision.coupons],
                        "reason": decision.reason,
                    },
                )
            )
            if binding:
                record_decision(ledger, decision)

            if decision.kind == GRANT:
                n["grant"] += 1
                offsets.append(0.0)
                admitted.append((request.request_id, decision.coupon.slot.index, FREE))
            elif decision.kind == PAID_GRANT:
                n["paid"] += 1
                offsets.append(0.0)
                admitted.append((request.request_id, decision.coupon.slot.index, PAID))
            elif decision.kind == OFFER:
                offers += 1
                chosen = decision.alternatives[0]
                if rng_behaviour.random() < scenario.p_accept_offer:
                    if binding:
                        accept_offer(ledger, decision.offer_id, chosen, now=event.epoch)
                    n["converted"] += 1
                    offsets.append(abs(chosen.start - desired_start))
                    admitted.append((request.request_id, chosen.index, FREE))
                    trace.events.append(
                        TraceEvent(
                            event.epoch,
                            "ACCEPT",
                            {"request_id": request.request_id, "slot": chosen.index},
                        )
                    )
                else:
                    if binding:
                        decline_offer(ledger, decision.offer_id)
                    n["declined"] += 1
                    trace.events.append(
                        TraceEvent(event.epoch, "DECLINE", {"request_id": request.request_id}),
                    )
            else:
                n["reject"] += 1

    # realized entries/exits, in admission order
    entry_events: list[tuple[float, str]] = []
    exit_events: list[tuple[float, str]] = []
    for request_id, slot_index, kind in admitted:
        slot = policy.slot(slot_index)
        coupon = Coupon("-", request_id, slot, kind)
        entry = realize_entry_time(coupon, policy, rng_realize)
        transit = float(policy.transit_law.sample(rng_realize))
        entry_events.append((entry, request_id))
        exit_events.append((entry + transit, request_id))
        trace.events.append(TraceEvent(entry, "ENTRY", {"request_id": request_id, "slot": slot_index}))
        trace.events.append(
            TraceEvent(entry + transit, "EXIT", {"request_id": request_id, "slot": slot_index})
        )

    trace.events.sort(key=lambda e: e.t)
    trace.occupancy_steps = _occupancy_steps(entry_events, exit_events)

    total = max(n["requests"], 1)
    overload, peak = _overload_and_peak(trace.occupancy_steps, policy)
    metrics = Metrics(
        requests=n["requests"],
        grant_rate=n["grant"] / total,
        offer_rate=offers / total,
        offer_converted_rate=n["converted"] / total,
        offer_declined_rate=n["declined"] / total,
        paid_share=n["paid"] / total,
        reject_rate=n["reject"] / total,
        out_of_horizon_rate=n["ooh"] / total,
        mean_offset_s=float(np.mean(offsets)) if offsets else 0.0,
        overload_probability=overload,
        peak_density=peak,
        throughput=len(entry_events),
        slot_length_s=policy.slot_length_s,
    )
    return metrics, trace


def _overload_and_peak(
    steps: list[tuple[float, int]], policy: ZonePolicy
) -> tuple[float, float]:
    horizon = policy.horizon_s
    cap = policy.rho_hard * policy.capacity + 1e-9
    overload_time = 0.0
    peak = 0
    level = 0
    prev_t = 0.0
    for t, new_level in steps:
        if t >= horizon:
            break
        if level > cap:
            overload_time += t - prev_t
        level = new_level
        prev_t = t
        peak = max(peak, level)
    if level > cap:
        overload_time += horizon - prev_t
    fraction = overload_time / horizon if horizon > 0 else 0.0
    return fraction, peak / policy.capacity


def overload_probability(trace: Trace, policy: ZonePolicy) -> float:
    """Time-weighted fraction of the horizon with occupancy above the hard cap."""
    return _overload_and_peak(trace.occupancy_steps, policy)[0]


@dataclass(frozen=True)
class VariantResult:
    """Aggregate of one policy variant over the common replications."""

    name: str
    policy: ZonePolicy
    reps: tuple[Metrics, ...]

    def mean(self, metric: str) -> float:
        return float(np.mean([getattr(m, metric) for m in self.reps]))

    def se(self, metric: str) -> float:
        values = [getattr(m, metric) for m in self.reps]
        if len(values) < 2:
            return 0.0
        return float(np.std(values, ddof=1) / np.sqrt(len(values)))


def compare_policies(
    scenario_base: Scenario,
    policy_variants: list[tuple[str, ZonePolicy]] | list[ZonePolicy],
    n_replications: int = 1,
) -> list[VariantResult]:
    """Evaluate each variant on the same demand streams (common random numbers).

    Replication r uses scenario seed ``base seed + r``; its demand stream is
    generated once and shared by every variant.  Variants must keep the
    total booking horizon (seconds) of the base policy, otherwise streams
    would diverge and the comparison would not be paired.
    """
    if n_replications < 1:
        raise ScenarioInvalid("n_replications must be >= 1")
    variants: list[tuple[str, ZonePolicy]] = []
    for i, v in enumerate(policy_variants):
        variants.append(v if isinstance(v, tuple) else (f"variant{i}", v))
    base_horizon = scenario_base.policy.horizon_s
    for name, policy in variants:
        policy.validate()
        if policy.horizon_s != base_horizon:
            raise ScenarioInvalid(
                f"variant {name!r} changes the total horizon "
                f"({policy.horizon_s} != {base_horizon}); streams would diverge"
            )
    streams = [
        generate_horizon(
            scenario_base.demand,
            scenario_base.control,
            base_horizon,
            scenario_base.seed + rep,
            zone_id=scenario_base.policy.zone_id,
        )
        for rep in range(n_replications)
    ]
    results = []
    for name, policy in variants:
        reps = []
        for rep in range(n_replications):
            scenario = Scenario(
                demand=scenario_base.demand,
                policy=policy,
                control=scenario_base.control,
                p_accept_offer=scenario_base.p_accept_offer,
                seed=scenario_base.seed + rep,
            )
            metrics, _ = run(scenario, events=streams[rep])
            reps.append(metrics)
        results.append(VariantResult(name=name, policy=policy, reps=tuple(reps)))
    return results
