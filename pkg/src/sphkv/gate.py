"""Decode-time stability gate and long-horizon stability metrics.

The gate turns a predicted-drift-to-margin ratio into a bounded danger
score and runs it through a two-threshold hysteresis band: crossing the
upper threshold protects (tier-up, pin), crossing the lower one releases
(down-tier/drop allowed), and anything inside the band holds the
previous mode so the policy cannot oscillate.

The metrics quantify whether an approximation preserved behavior:
across-seed outcome variance, stopping-length drift against the dense
reference, exact trajectory disagreement, and a failure-rate-vs-budget
curve under workload-declared predicates (early stop, non-termination,
top-1 flip at a designated critical step).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DANGER_CLAMP = 10.0
_MARGIN_EPS = 1e-9

ACTION_PROTECT = "tier_up_or_protect"
ACTION_ALLOW = "allow_downtier"
ACTION_HOLD = "hold"


@dataclass(frozen=True)
class GateConfig:
    tau_drop: float
    tau_prot: float
    alpha: float = 1.0

    def __post_init__(self):
        if not self.tau_drop < self.tau_prot:
            raise ValueError("hysteresis needs tau_drop < tau_prot strictly")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


@dataclass(frozen=True)
class GateState:
    mode: str = "held"  # compressible | held | protected
    last_danger: float = 0.0


def margin(logits: np.ndarray) -> float:
    """Top-1 minus top-2 logit; +inf when fewer than two candidates."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size < 2:
        return math.inf
    top2 = np.partition(logits, -2)[-2:]
    return float(top2[1] - top2[0])


def danger_score(drift_bound: float, margin_value: float) -> float:
    """Predicted drift over local margin, clamped to [0, 10]."""
    if drift_bound < 0 or margin_value < 0:
        raise ValueError("danger inputs must be nonnegative")
    if math.isinf(margin_value):
        return 0.0
    return min(drift_bound / (margin_value + _MARGIN_EPS), DANGER_CLAMP)


def gate_step(d_t: float, state: GateState, cfg: GateConfig) -> tuple[str, GateState]:
    """One hysteretic transition; in-band danger holds the previous mode."""
    if d_t >= cfg.tau_prot:
        return ACTION_PROTECT, GateState("protected", d_t)
    if d_t <= cfg.tau_drop:
        return ACTION_ALLOW, GateState("compressible", d_t)
    return ACTION_HOLD, GateState(state.mode, d_t)


# ---------------------------------------------------------------------------
# Long-horizon stability metrics
# ---------------------------------------------------------------------------


def trajectory_sensitivity(values_by_input: dict) -> float:
    """Mean over inputs of the across-seed population variance of a metric."""
    if not values_by_input:
        raise ValueError("no inputs")
    variances = []
    for key, vals in values_by_input.items():
        vals = np.asarray(list(vals), dtype=np.float64)
        if vals.size < 2:
            raise ValueError(f"input {key!r} has fewer than 2 seeds")
        variances.append(float(np.var(vals)))
    return float(np.mean(variances))


def length_drift(lengths: dict, dense_lengths: dict) -> float:
    """Mean absolute generated-length difference against the dense runs."""
    if set(lengths) != set(dense_lengths):
        missing = set(lengths) ^ set(dense_lengths)
        raise ValueError(f"unpaired inputs: {sorted(missing)}")
    if not lengths:
        raise ValueError("no inputs")
    return float(np.mean([abs(lengths[k] - dense_lengths[k]) for k in lengths]))


def disagreement_rate(trajectories: dict, reference: dict) -> float:
    """Fraction of episodes whose token trajectory differs from reference."""
    if set(trajectories) != set(reference):
        missing = set(trajectories) ^ set(reference)
        raise ValueError(f"unpaired episodes: {sorted(missing)}")
    if not trajectories:
        raise ValueError("empty episode set")
    diff = sum(1 for k in trajectories
               if tuple(trajectories[k]) != tuple(reference[k]))
    return diff / len(trajectories)


def failure_rate(episodes_by_budget: dict, predicate) -> list[tuple[float, float]]:
    """Failure fraction per budget point; reported as a curve, not asserted
    monotone. `predicate(episode)` decides failure."""
    curve = []
    for budget in sorted(episodes_by_budget):
        eps = episodes_by_budget[budget]
        if not eps:
            raise ValueError(f"budget {budget} has no episodes")
        rate = sum(1 for e in eps if predicate(e)) / len(eps)
        curve.append((budget, rate))
    return curve


# workload-declared failure predicates (desk-scale analogues)

def early_stop_failure(trace, min_length: int) -> bool:
    return trace.length < min_length


def non_termination_failure(trace, max_steps: int) -> bool:
    return trace.stop_reason == "max_steps" and trace.length >= max_steps


def critical_flip_failure(trace, dense_trace, step: int, window: int = 0) -> bool:
    """Top-1 token differs from dense at the designated critical step, or
    anywhere in the planted [step - window, step] span when the workload
    declares a boosted window."""
    if step >= trace.length or step >= dense_trace.length:
        return True  # one side never reached the critical step
    lo = max(step - window, 0)
    return any(trace.tokens[t] != dense_trace.tokens[t]
               for t in range(lo, step + 1))
