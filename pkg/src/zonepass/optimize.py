"""Grid search over policy parameters: slot length, free threshold, and
bunker slack, scored by a weighted objective over simulated replications.

Every parameter combination is evaluated on the same demand streams
(common random numbers), so rankings reflect policy differences rather
than sampling noise.  The search itself is an exhaustive grid; a searcher
callable can be plugged in where the grid would be enumerated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import SpaceInvalid, ZonepassError
from .ledger import ZonePolicy
from .simulate import Metrics, Scenario, VariantResult, compare_policies

TABLE_METRICS = (
    "overload_probability",
    "mean_offset_s",
    "reject_rate",
    "grant_rate",
    "offer_converted_rate",
    "paid_share",
    "throughput",
    "peak_density",
)


@dataclass(frozen=True)
class ObjectiveWeights:
    """Nonnegative weights of the scalarized objective.

    overload, offset (normalized by slot length) and reject are penalized;
    throughput per request is subtracted.
    """

    w_overload: float = 1.0
    w_offset: float = 0.25
    w_reject: float = 1.0
    w_throughput: float = 0.5

    def validate(self) -> None:
        values = (self.w_overload, self.w_offset, self.w_reject, self.w_throughput)
        if any(w < 0.0 for w in values):
            raise SpaceInvalid("objective weights must be >= 0")
        if not any(w > 0.0 for w in values):
            raise SpaceInvalid("at least one objective weight must be nonzero")


# Shipped default weighting; a documented configuration choice.
DEFAULT_WEIGHTS = ObjectiveWeights(1.0, 0.25, 1.0, 0.5)


def objective(metrics: Metrics, weights: ObjectiveWeights) -> float:
    """w_o*overload + w_f*(mean offset / slot length) + w_r*reject - w_t*(throughput/requests)."""
    weights.validate()
    served = metrics.throughput / metrics.requests if metrics.requests else 0.0
    return (
        weights.w_overload * metrics.overload_probability
        + weights.w_offset * (metrics.mean_offset_s / metrics.slot_length_s)
        + weights.w_reject * metrics.reject_rate
        - weights.w_throughput * served
    )


@dataclass(frozen=True)
class Combination:
    delta_s: float
    rho_free: float
    slack: float


@dataclass(frozen=True)
class GridRow:
    """One grid point with its objective statistics and per-metric means."""

    combination: Combination
    mean_objective: float
    se_objective: float
    metric_means: dict

    def as_record(self) -> dict:
        rec = {
            "delta_s": self.combination.delta_s,
            "rho_free": self.combination.rho_free,
            "slack": self.combination.slack,
            "mean_objective": self.mean_objective,
            "se": self.se_objective,
        }
        rec.update({f"mean_{k}": v for k, v in self.metric_means.items()})
        return rec


@dataclass(frozen=True)
class SearchSpace:
    """Candidate lists for slot length, free threshold, and bunker slack.

    Variant policies keep the base policy's total horizon (seconds), so
    each slot-length candidate must divide it.
    """

    scenario: Scenario
    delta_candidates: tuple[float, ...]
    rho_free_candidates: tuple[float, ...]
    slack_candidates: tuple[float, ...]
    n_replications: int = 1

    def combinations(self) -> list[Combination]:
        return [
            Combination(d, r, s)
            for d in self.delta_candidates
            for r in self.rho_free_candidates
            for s in self.slack_candidates
        ]

    def policy_for(self, combo: Combination) -> ZonePolicy:
        base = self.scenario.policy
        horizon_s = base.horizon_s
        n_slots = horizon_s / combo.delta_s
        if abs(n_slots - round(n_slots)) > 1e-9:
            raise SpaceInvalid(
                f"slot length {combo.delta_s} does not divide the horizon {horizon_s}"
            )
        rho_hard = combo.rho_free + combo.slack
        if 1.0 < rho_hard < 1.0 + 1e-9:
            rho_hard = 1.0
        policy = replace(
            base,
            slot_length_s=combo.delta_s,
            horizon_slots=int(round(n_slots)),
            rho_free=combo.rho_free,
            rho_hard=rho_hard,
        )
        try:
            policy.validate()
        except ZonepassError as exc:
            raise SpaceInvalid(f"combination {combo} yields an invalid policy: {exc}") from exc
        return policy

    def validate(self) -> None:
        if not (self.delta_candidates and self.rho_free_candidates and self.slack_candidates):
            raise SpaceInvalid("candidate lists must be nonempty")
        if self.n_replications < 1:
            raise SpaceInvalid("replication count must be >= 1")
        self.scenario.validate()
        for combo in self.combinations():
            self.policy_for(combo)


def grid_search(
    space: SearchSpace, weights: ObjectiveWeights = DEFAULT_WEIGHTS
) -> tuple[Combination, list[GridRow]]:
    """Evaluate every combination under common random numbers.

    Returns the argmin of the mean objective plus the full result table.
    Ties break toward smaller slot length, then larger free threshold,
    then smaller slack.
    """
    space.validate()
    weights.validate()
    combos = space.combinations()
    variants = [(f"combo{i}", space.policy_for(c)) for i, c in enumerate(combos)]
    results: list[VariantResult] = compare_policies(
        space.scenario, variants, n_replications=space.n_replications
    )
    rows = []
    for combo, result in zip(combos, results):
        objectives = [objective(m, weights) for m in result.reps]
        se = 0.0
        if len(objectives) > 1:
            se = float(np.std(objectives, ddof=1) / np.sqrt(len(objectives)))
        rows.append(
            GridRow(
                combination=combo,
                mean_objective=float(np.mean(objectives)),
                se_objective=se,
                metric_means={k: result.mean(k) for k in TABLE_METRICS},
            )
        )
    best = min(
        rows,
        key=lambda r: (
            r.mean_objective,
            r.combination.delta_s,
            -r.combination.rho_free,
            r.combination.slack,
        ),
    )
    return best.combination, rows


def optimize_interval_length(
    zone_scenario: Scenario,
    candidates_s,
    weights: ObjectiveWeights = DEFAULT_WEIGHTS,
    n_replications: int = 1,
) -> float:
    """Pick the best slot length from the candidates, other parameters fixed."""
    if not candidates_s:
        raise SpaceInvalid("slot-length candidates must be nonempty")
    base = zone_scenario.policy
    space = SearchSpace(
        scenario=zone_scenario,
        delta_candidates=tuple(float(c) for c in candidates_s),
        rho_free_candidates=(base.rho_free,),
        slack_candidates=(base.rho_hard - base.rho_free,),
        n_replications=n_replications,
    )
    best, _ = grid_search(space, weights)
    return best.delta_s


def write_results_csv(rows: list[GridRow], path: str | Path) -> None:
    """Fixed-column CSV: delta_s, rho_free, slack, mean_objective, se, per-metric means."""
    records = [r.as_record() for r in rows]
    fieldnames = list(records[0].keys()) if records else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(records)
