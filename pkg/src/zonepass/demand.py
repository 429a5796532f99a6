"""Controlled batch semi-Markov demand flow.

Entry requests arrive in batches at the epochs of a semi-Markov phase
process: an embedded Markov chain picks the phase, each phase has its own
sojourn (inter-epoch) law and batch-size law, and a control action scales
the arrival intensity and shifts batch sizes.  The module exposes the
generator itself plus its analytical summaries (stationary phase
distribution, mean arrival rate).

Internally all times are seconds from the start of the booking horizon.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import NoConvergence, RejectAction, RejectSpec
from .laws import DurationLaw, PointMass, law_from_json, law_to_json
from .ledger import Request

ROW_SUM_TOL = 1e-9

# Damped power iteration on the embedded chain; the damping removes
# periodicity without changing the fixed point.
STATIONARY_MAX_ITER = 500_000
STATIONARY_TOL = 1e-13


@dataclass(frozen=True)
class PhaseKernel:
    """Embedded phase chain: row-stochastic transitions plus per-phase sojourn laws."""

    transition: np.ndarray
    sojourn_laws: tuple[DurationLaw, ...]

    @property
    def n_phases(self) -> int:
        return len(self.sojourn_laws)

    def validate(self, initial_phase: int = 0) -> None:
        p = np.asarray(self.transition, dtype=float)
        n = self.n_phases
        if p.shape != (n, n):
            raise RejectSpec(f"transition must be {n}x{n}, got {p.shape}")
        if np.any(p < 0.0) or np.any(p > 1.0):
            raise RejectSpec("transition probabilities must lie in [0, 1]")
        sums = p.sum(axis=1)
        bad = np.nonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)[0]
        if bad.size:
            raise RejectSpec(f"transition row {bad[0]} sums to {sums[bad[0]]:.12g}, not 1")
        for i, law in enumerate(self.sojourn_laws):
            if isinstance(law, PointMass):
                if law.value < 0.0:
                    raise RejectSpec(f"phase {i} point-mass sojourn must be >= 0")
            else:
                params = [v for v in vars(law).values()]
                if any(v <= 0.0 for v in params):
                    raise RejectSpec(f"phase {i} sojourn parameters must be strictly positive")
        if not (0 <= initial_phase < n):
            raise RejectSpec(f"initial phase {initial_phase} outside 0..{n - 1}")
        self._validate_reachable_class(p, initial_phase)

    def _validate_reachable_class(self, p: np.ndarray, initial_phase: int) -> None:
        adj = p > 0.0
        reach = np.zeros(len(p), dtype=bool)
        frontier = [initial_phase]
        reach[initial_phase] = True
        while frontier:
            nxt = np.nonzero(adj[frontier].any(axis=0) & ~reach)[0]
            reach[nxt] = True
            frontier = list(nxt)
        idx = np.nonzero(reach)[0]
        sub = csr_matrix(adj[np.ix_(idx, idx)])
        n_comp, _ = connected_components(sub, directed=True, connection="strong")
        if n_comp != 1:
            raise RejectSpec(
                "phases reachable from the initial phase must form a single communicating class"
            )


@dataclass(frozen=True)
class BatchLaw:
    """Per-phase probability vectors over batch sizes 1..len(vector)."""

    pmfs: tuple[np.ndarray, ...]

    @property
    def b_max(self) -> int:
        return max(len(p) for p in self.pmfs)

    def mean(self, phase: int) -> float:
        pmf = self.pmfs[phase]
        return float(np.dot(pmf, np.arange(1, len(pmf) + 1)))

    def validate(self, n_phases: int) -> None:
        if len(self.pmfs) != n_phases:
            raise RejectSpec(f"batch law has {len(self.pmfs)} phases, kernel has {n_phases}")
        for i, pmf in enumerate(self.pmfs):
            if len(pmf) < 1:
                raise RejectSpec(f"phase {i} batch vector is empty (B_max >= 1 required)")
            if np.any(pmf < 0.0):
                raise RejectSpec(f"phase {i} batch probabilities must be >= 0")
            if abs(float(pmf.sum()) - 1.0) > ROW_SUM_TOL:
                raise RejectSpec(f"phase {i} batch vector sums to {float(pmf.sum()):.12g}, not 1")


@dataclass(frozen=True)
class ControlAction:
    """Arrival-side control: intensity multiplier and batch shift.

    ``rate_multiplier`` m scales every sojourn by 1/m, multiplying the
    arrival intensity by m exactly.  ``batch_shift`` is added to each
    (B_max-truncated) batch draw.
    """

    rate_multiplier: float = 1.0
    batch_shift: int = 0

    def validate(self) -> None:
        if not self.rate_multiplier > 0.0:
            raise RejectAction(f"rate_multiplier must be > 0, got {self.rate_multiplier}")
        if self.batch_shift < 0 or int(self.batch_shift) != self.batch_shift:
            raise RejectAction(f"batch_shift must be an integer >= 0, got {self.batch_shift}")


IDENTITY_CONTROL = ControlAction(1.0, 0)


@dataclass(frozen=True)
class DemandProcessSpec:
    """Full demand model: phase kernel, batch law, and request synthesis.

    ``preference_weights`` are piecewise-constant intensity weights for the
    desired entry time: the booking horizon is split into ``len(weights)``
    equal pieces and a request's desired time is drawn with density
    proportional to its piece's weight.  ``p_pay`` is the probability a
    request accepts paid entry; ``flexibility_s`` the half-width of the
    acceptable offset window stamped on each request.
    """

    kernel: PhaseKernel
    batch: BatchLaw
    initial_phase: int = 0
    preference_weights: tuple[float, ...] = (1.0,)
    p_pay: float = 0.0
    flexibility_s: float = 0.0

    def validate(self) -> None:
        self.kernel.validate(self.initial_phase)
        self.batch.validate(self.kernel.n_phases)
        w = np.asarray(self.preference_weights, dtype=float)
        if w.size == 0 or np.any(w < 0.0) or not np.any(w > 0.0):
            raise RejectSpec("preference weights must be nonnegative and not all zero")
        if not 0.0 <= self.p_pay <= 1.0:
            raise RejectSpec(f"p_pay must lie in [0, 1], got {self.p_pay}")
        if self.flexibility_s < 0.0:
            raise RejectSpec(f"flexibility must be >= 0, got {self.flexibility_s}")


@dataclass(frozen=True)
class DemandEvent:
    """One arrival epoch with its batch of simultaneous requests."""

    epoch: float
    requests: tuple[Request, ...]


@dataclass
class GeneratorState:
    """Mutable cursor of the generator: current phase, clock, and the next
    request ordinal (used only to mint unique request ids)."""

    phase: int
    clock: float
    next_seq: int = 0


def validate_spec(spec: DemandProcessSpec) -> DemandProcessSpec:
    """Return ``spec`` unchanged iff every invariant holds, else RejectSpec."""
    spec.validate()
    return spec


def stationary_phase_distribution(kernel: PhaseKernel, initial_phase: int = 0) -> np.ndarray:
    """Stationary distribution pi of the embedded chain, pi @ P = pi.

    Solved by damped power iteration (pi <- pi (P + I)/2), which shares the
    fixed point with P but is aperiodic.  Mass starting at ``initial_phase``
    stays inside its closed reachable class, so unreachable phases get 0.
    """
    p = np.asarray(kernel.transition, dtype=float)
    n = p.shape[0]
    pi = np.zeros(n)
    pi[initial_phase] = 1.0
    half = 0.5 * (p + np.eye(n))
    for _ in range(STATIONARY_MAX_ITER):
        nxt = pi @ half
        nxt /= nxt.sum()
        if np.max(np.abs(pi @ p - pi)) < STATIONARY_TOL:
            return pi
        pi = nxt
    raise NoConvergence(
        f"stationary distribution did not converge in {STATIONARY_MAX_ITER} iterations"
    )


def mean_arrival_rate(spec: DemandProcessSpec, action: ControlAction = IDENTITY_CONTROL) -> float:
    """Long-run requests per second: m * sum_i pi_i E[B_i + shift] / sum_i pi_i E[tau_i]."""
    validate_spec(spec)
    action.validate()
    pi = stationary_phase_distribution(spec.kernel, spec.initial_phase)
    mean_batch = sum(
        pi[i] * (spec.batch.mean(i) + action.batch_shift) for i in range(spec.kernel.n_phases)
    )
    mean_sojourn = sum(
        pi[i] * spec.kernel.sojourn_laws[i].mean() for i in range(spec.kernel.n_phases)
    )
    if mean_sojourn <= 0.0:
        raise RejectSpec("mean sojourn must be positive for a finite arrival rate")
    return action.rate_multiplier * mean_batch / mean_sojourn


def _draw_desired_time(spec: DemandProcessSpec, horizon_s: float, rng: np.random.Generator) -> float:
    w = np.asarray(spec.preference_weights, dtype=float)
    piece = int(rng.choice(w.size, p=w / w.sum()))
    piece_len = horizon_s / w.size
    return (piece + rng.random()) * piece_len


def next_event(
    state: GeneratorState | tuple[int, float],
    spec: DemandProcessSpec,
    action: ControlAction,
    rng: np.random.Generator,
    *,
    horizon_s: float,
    zone_id: str = "A1",
) -> tuple[DemandEvent, GeneratorState]:
    """Advance the generator one epoch.

    The sojourn is drawn from the current phase's law scaled by
    1/rate_multiplier, the batch from the current phase's batch law plus
    the batch shift, then the phase transitions.  Draw order is fixed:
    sojourn, batch size, per-request (desired time, pay flag), next phase.
    """
    if isinstance(state, tuple):
        state = GeneratorState(state[0], state[1])
    phase, clock = state.phase, state.clock
    sojourn = float(spec.kernel.sojourn_laws[phase].sample(rng)) / action.rate_multiplier
    if sojourn <= 0.0:
        raise RejectSpec("zero sojourn sampled; epochs must strictly increase")
    epoch = clock + sojourn
    pmf = spec.batch.pmfs[phase]
    size = int(rng.choice(len(pmf), p=pmf)) + 1 + action.batch_shift
    requests = []
    for k in range(size):
        desired = _draw_desired_time(spec, horizon_s, rng)
        pay = bool(rng.random() < spec.p_pay)
        requests.append(
            Request(
                request_id=f"r{state.next_seq + k}",
                zone_id=zone_id,
                desired_time_s=desired,
                flexibility_s=spec.flexibility_s,
                willing_to_pay=pay,
                submitted_at=epoch,
            )
        )
    next_phase = int(rng.choice(spec.kernel.n_phases, p=spec.kernel.transition[phase]))
    new_state = GeneratorState(next_phase, epoch, state.next_seq + size)
    return DemandEvent(epoch, tuple(requests)), new_state


def generate_horizon(
    spec: DemandProcessSpec,
    action: ControlAction,
    horizon_s: float,
    seed,
    *,
    zone_id: str = "A1",
) -> list[DemandEvent]:
    """Generate every demand event with epoch < horizon_s.

    Pure in (spec, action, horizon_s, seed): identical inputs give an
    identical event list.
    """
    validate_spec(spec)
    action.validate()
    if horizon_s < 0.0:
        raise RejectSpec(f"horizon must be >= 0, got {horizon_s}")
    rng = np.random.default_rng(seed)
    state = GeneratorState(spec.initial_phase, 0.0)
    events: list[DemandEvent] = []
    while True:
        event, state = next_event(state, spec, action, rng, horizon_s=horizon_s, zone_id=zone_id)
        if event.epoch >= horizon_s:
            return events
        events.append(event)


def apply_control(spec: DemandProcessSpec, action: ControlAction) -> DemandProcessSpec:
    """Fold a control action into the spec's parameters.

    Uncontrolled generation from the result is distributionally identical
    to controlled generation from the original: sojourn laws are scaled by
    1/m and batch vectors are shifted by zero-padding their low end.
    The identity action returns ``spec`` itself.
    """
    action.validate()
    if action.rate_multiplier == 1.0 and action.batch_shift == 0:
        return spec
    m = action.rate_multiplier
    scaled = []
    for law in spec.kernel.sojourn_laws:
        if isinstance(law, PointMass):
            scaled.append(PointMass(law.value / m))
        elif hasattr(law, "mean_s"):
            scaled.append(type(law)(law.mean_s / m))
        else:
            scaled.append(type(law)(law.lo / m, law.hi / m))
    shift = int(action.batch_shift)
    pmfs = tuple(np.concatenate([np.zeros(shift), pmf]) for pmf in spec.batch.pmfs)
    return replace(
        spec,
        kernel=PhaseKernel(spec.kernel.transition, tuple(scaled)),
        batch=BatchLaw(pmfs),
    )


# -- spec file (JSON) ------------------------------------------------------

def demand_spec_from_json(obj: dict) -> tuple[DemandProcessSpec, ControlAction]:
    """Parse a demand spec document; returns the spec and its control block."""
    n = int(obj["phases"])
    transition = np.asarray(obj["transition"], dtype=float)
    sojourn = tuple(law_from_json(b) for b in obj["sojourn"])
    if len(sojourn) != n:
        raise RejectSpec(f"'sojourn' lists {len(sojourn)} laws for {n} phases")
    batch = BatchLaw(tuple(np.asarray(p, dtype=float) for p in obj["batch"]))
    control_obj = obj.get("control", {})
    control = ControlAction(
        rate_multiplier=float(control_obj.get("rate_multiplier", 1.0)),
        batch_shift=int(control_obj.get("batch_shift", 0)),
    )
    if "flexibility_s" in obj:
        flexibility = float(obj["flexibility_s"])
    elif "flexibility_min" in obj:
        flexibility = float(obj["flexibility_min"]) * 60.0
    else:
        flexibility = 0.0
    spec = DemandProcessSpec(
        kernel=PhaseKernel(transition, sojourn),
        batch=batch,
        initial_phase=int(obj.get("initial_phase", 0)),
        preference_weights=tuple(float(w) for w in obj.get("preference", [1.0])),
        p_pay=float(obj.get("p_pay", 0.0)),
        flexibility_s=flexibility,
    )
    validate_spec(spec)
    control.validate()
    return spec, control


def demand_spec_to_json(spec: DemandProcessSpec, control: ControlAction = IDENTITY_CONTROL) -> dict:
    return {
        "phases": spec.kernel.n_phases,
        "initial_phase": spec.initial_phase,
        "transition": np.asarray(spec.kernel.transition).tolist(),
        "sojourn": [law_to_json(law) for law in spec.kernel.sojourn_laws],
        "batch": [np.asarray(p).tolist() for p in spec.batch.pmfs],
        "control": {"rate_multiplier": control.rate_multiplier, "batch_shift": control.batch_shift},
        "preference": list(spec.preference_weights),
        "p_pay": spec.p_pay,
        "flexibility_s": spec.flexibility_s,
    }


def load_demand_file(path: str | Path) -> tuple[DemandProcessSpec, ControlAction]:
    with open(path, encoding="utf-8") as fh:
        return demand_spec_from_json(json.load(fh))
