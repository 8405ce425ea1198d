"""Variant x budget sweeps, iso-quality filtering, Pareto envelopes,
frontier summary ratios, representative points, and the ablation
synergy functional.

Variants (allocation policy + compute path):
    Dense       raw keys, dense path, no compression (the reference);
    SphKV-Joint joint keep/drop + tiering, angle path;
    Recon       joint allocation, reconstruct-then-dot (A1 negative control);
    RD-only     joint allocation, reconstruct-then-dot (control-lever ablation);
    Angle-only  keep everything at the largest uniform tier that fits,
                angle path (compute-lever ablation);
    Quant-only  same uniform keep-all tiering, reconstruct-then-dot;
    KeepDrop    retention-only: greedy keep/drop at the maximum tier;
    Decoupled   two-stage: keep/drop sized at a mid reference tier, then
                a separate uniform tier fitted to the budget afterwards.

Budgets are fractions of the dense key payload bits (L*H*T_p*d*16).
Points whose protection demand cannot fit are flagged infeasible and
excluded downstream. Quality is averaged over seeds, throughput is the
per-seed wall-clock median, and each seed's variant ladder runs inside
one worker so wall-clock comparisons share a contention environment.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import controller as ctrl
from .codec import DROP_TIER_ID, TierTable, rate_bits
from .controller import (ControllerConfig, InfeasibleProtectionError, StateScores,
                         TierAssignment, allocate_greedy, compute_features,
                         downtier_before_drop, full_best_tier_assignment,
                         protected_mask, score_states)
from .decode import decode_rollout
from .gate import GateConfig
from .store import DenseStore, TrafficMeter, pack_pages_arrays
from .workload import WorkloadConfig, generate, quality_score

VARIANTS = ("Dense", "SphKV-Joint", "Angle-only", "RD-only", "KeepDrop",
            "Quant-only", "Decoupled", "Recon")

_CODED_PATH = {
    "SphKV-Joint": "angle",
    "Angle-only": "angle",
    "RD-only": "recon",
    "Recon": "recon",
    "KeepDrop": "recon",
    "Quant-only": "recon",
    "Decoupled": "recon",
}


@dataclass
class OperatingPoint:
    """One measured (b_KV, b_HBM, s, Q) tuple for a (variant, budget)."""

    variant: str
    budget_idx: int
    budget_bits: int
    b_kv: float | None = None
    b_hbm: float | None = None
    s: float | None = None
    q: float | None = None
    stability: dict = field(default_factory=dict)
    feasible: bool = True
    retained: bool = False
    on_envelope: bool = False
    is_star: bool = False


@dataclass
class SweepConfig:
    budget_fracs: tuple[float, ...] = (0.05, 0.0766, 0.1174, 0.1799,
                                       0.2757, 0.4224, 0.6473, 1.0)
    variants: tuple[str, ...] = ("Dense", "SphKV-Joint", "Angle-only", "RD-only")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    delta: float = 0.8
    beta: float = 5.0
    workers: int = 2
    warmup: int = 8
    refresh_cadence: int = 0

    def __post_init__(self):
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r}")
        if self.delta < 0 or self.beta <= 0:
            raise ValueError("delta must be >= 0 and beta > 0")


def geometric_budgets(n: int, lo_frac: float, hi_frac: float) -> tuple[float, ...]:
    """n budget fractions geometrically spaced over [lo_frac, hi_frac]."""
    if n < 1 or lo_frac <= 0 or hi_frac < lo_frac:
        raise ValueError("bad budget grid")
    if n == 1:
        return (hi_frac,)
    ratio = hi_frac / lo_frac
    return tuple(lo_frac * ratio ** (j / (n - 1)) for j in range(n))


def dense_key_bits(cfg: WorkloadConfig) -> int:
    return cfg.layers * cfg.heads * cfg.prefill * cfg.d * 16


# ---------------------------------------------------------------------------
# Variant allocations
# ---------------------------------------------------------------------------


def _uniform_keep_all(scores: StateScores, protected: np.ndarray, budget_bits: int,
                      tiers: TierTable, d: int) -> TierAssignment:
    """Largest uniform tier whose keep-all cost fits the budget; raises
    InfeasibleProtectionError when even the cheapest tier does not fit."""
    n_prot = int(np.sum(protected))
    n_free = protected.size - n_prot
    base = n_prot * tiers.rate_bits(tiers.max_tier.id, d)
    chosen = None
    for t in tiers.non_drop:
        if base + n_free * rate_bits(t, d) <= budget_bits:
            chosen = t.id
    if chosen is None:
        raise InfeasibleProtectionError(
            f"no uniform keep-all tier fits {budget_bits} bits")
    tier = np.full(protected.shape, chosen, dtype=np.int16)
    tier[protected] = tiers.max_tier.id
    z = np.ones(protected.shape, dtype=np.int8)
    return TierAssignment(z, tier, protected.copy())


def _decoupled(scores: StateScores, protected: np.ndarray, budget_bits: int,
               tiers: TierTable, d: int) -> TierAssignment:
    """Two-stage control: retention sized at a mid reference tier, then a
    uniform tier fitted over the retained set afterwards."""
    ref = tiers.non_drop[len(tiers.non_drop) // 2]
    stage1 = allocate_greedy(ctrl.fixed_tier_scores(scores, ref.id, tiers, d),
                             protected, budget_bits, tiers, d)
    kept_free = (stage1.z == 1) & ~protected
    n_prot = int(np.sum(protected))
    base = n_prot * tiers.rate_bits(tiers.max_tier.id, d)
    n_kept = int(np.sum(kept_free))
    chosen = None
    for t in tiers.non_drop:
        if base + n_kept * rate_bits(t, d) <= budget_bits:
            chosen = t.id
    if chosen is None:
        raise InfeasibleProtectionError(
            f"decoupled stage 2 cannot fit {budget_bits} bits")
    tier = np.full(protected.shape, DROP_TIER_ID, dtype=np.int16)
    tier[kept_free] = chosen
    tier[protected] = tiers.max_tier.id
    z = (tier != DROP_TIER_ID).astype(np.int8)
    return TierAssignment(z, tier, protected.copy())


def variant_assignment(variant: str, scores: StateScores, protected: np.ndarray,
                       budget_bits: int, tiers: TierTable, d: int,
                       allocator: str = "greedy") -> TierAssignment:
    if variant in ("SphKV-Joint", "RD-only", "Recon"):
        if allocator == "downtier":
            start = full_best_tier_assignment(scores, protected, tiers)
            return downtier_before_drop(start, scores, budget_bits, tiers, d)
        return allocate_greedy(scores, protected, budget_bits, tiers, d)
    if variant in ("Angle-only", "Quant-only"):
        return _uniform_keep_all(scores, protected, budget_bits, tiers, d)
    if variant == "KeepDrop":
        fixed = ctrl.fixed_tier_scores(scores, tiers.max_tier.id, tiers, d)
        return allocate_greedy(fixed, protected, budget_bits, tiers, d)
    if variant == "Decoupled":
        return _decoupled(scores, protected, budget_bits, tiers, d)
    raise ValueError(f"variant {variant!r} has no coded allocation")


def _append_policy(variant: str, assignment: TierAssignment, tiers: TierTable):
    """Decode-time append tier: joint variants rescore, fixed-tier variants
    reuse their uniform tier."""
    if variant in ("SphKV-Joint", "RD-only", "Recon"):
        return "score"
    if variant == "KeepDrop":
        return tiers.max_tier.id
    retained = assignment.tier[assignment.z == 1]
    if retained.size:
        return int(np.max(retained))
    return tiers.non_drop[0].id


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------


def _run_seed_ladder(seed, wl_cfg, tiers, ctrl_cfg, sweep_cfg, gate_cfg, budgets_bits,
                     progress=None):
    """All rollouts of one seed: dense reference first, then each
    (variant, budget) on the same workload."""
    wl = generate(wl_cfg, seed)
    feat = compute_features(wl, ctrl_cfg)
    prot = protected_mask(wl, ctrl_cfg)
    scores = score_states(wl.radii, feat, tiers, ctrl_cfg.lam, prot, wl_cfg.d)

    dense_store = DenseStore(wl_cfg.layers, wl_cfg.heads, wl_cfg.d, wl.d_v,
                             wl_cfg.page_size, TrafficMeter())
    dense_store.bulk_load(wl.keys, wl.values)
    dense_trace = decode_rollout(wl, dense_store, path="dense",
                                 steps=wl_cfg.decode_steps, warmup=sweep_cfg.warmup)
    results = {("Dense", -1): {
        "q": 100.0, "s": dense_trace.s, "b_kv": dense_trace.b_kv,
        "b_hbm": dense_trace.b_hbm, "len": dense_trace.length,
        "tokens": tuple(dense_trace.tokens), "feasible": True,
    }}
    if progress:
        s_txt = f"{dense_trace.s:.1f}" if dense_trace.s else "n/a"
        progress(f"seed {seed}: Dense done (s={s_txt} tok/s)")

    # adjacent budgets often yield the identical assignment (the allocator
    # saturates); a rollout is deterministic given (assignment, path,
    # append policy), so duplicates reuse the measurement
    memo = {}
    for variant in sweep_cfg.variants:
        if variant == "Dense":
            continue
        for j, budget_bits in enumerate(budgets_bits):
            key = (variant, j)
            try:
                assignment = variant_assignment(
                    variant, scores, prot, budget_bits, tiers, wl_cfg.d,
                    allocator=ctrl_cfg.allocator)
            except InfeasibleProtectionError:
                results[key] = {"feasible": False}
                continue
            policy = _append_policy(variant, assignment, tiers)
            fingerprint = (_CODED_PATH[variant], str(policy),
                           hash(assignment.tier.tobytes()),
                           hash(assignment.protected.tobytes()))
            if fingerprint in memo:
                results[key] = memo[fingerprint]
                continue
            store = pack_pages_arrays(assignment, wl.radii, wl.angles, wl.values,
                                      tiers, wl_cfg.page_size, TrafficMeter())
            trace = decode_rollout(
                wl, store, path=_CODED_PATH[variant], steps=wl_cfg.decode_steps,
                warmup=sweep_cfg.warmup, refresh_cadence=sweep_cfg.refresh_cadence,
                feat=feat, tiers=tiers, lam=ctrl_cfg.lam, append_tier=policy,
                gate_cfg=gate_cfg)
            results[key] = memo[fingerprint] = {
                "q": quality_score(trace, dense_trace), "s": trace.s,
                "b_kv": trace.b_kv, "b_hbm": trace.b_hbm, "len": trace.length,
                "tokens": tuple(trace.tokens), "feasible": True,
            }
            if progress:
                progress(f"seed {seed}: {variant} budget {j} done "
                         f"(q={results[key]['q']:.2f})")
    return results


@dataclass
class SweepResult:
    points: list[OperatingPoint]
    q_star: float
    delta: float
    budgets_bits: tuple[int, ...]

    def dense_point(self) -> OperatingPoint:
        return next(p for p in self.points if p.variant == "Dense")

    def variant_points(self, variant: str) -> list[OperatingPoint]:
        return [p for p in self.points if p.variant == variant]

    def retained_points(self, variant: str | None = None) -> list[OperatingPoint]:
        return [p for p in self.points if p.retained
                and (variant is None or p.variant == variant)]


def run_sweep(wl_cfg: WorkloadConfig, tiers: TierTable, ctrl_cfg: ControllerConfig,
              sweep_cfg: SweepConfig, gate_cfg: GateConfig | None = None,
              progress=None) -> SweepResult:
    """Execute the sweep and assemble filtered, enveloped, starred points."""
    budgets_bits = tuple(int(f * dense_key_bits(wl_cfg)) for f in sweep_cfg.budget_fracs)
    per_seed = {}
    if sweep_cfg.workers > 1 and len(sweep_cfg.seeds) > 1:
        with ThreadPoolExecutor(max_workers=sweep_cfg.workers) as pool:
            futs = {seed: pool.submit(_run_seed_ladder, seed, wl_cfg, tiers, ctrl_cfg,
                                      sweep_cfg, gate_cfg, budgets_bits, progress)
                    for seed in sweep_cfg.seeds}
            per_seed = {seed: f.result() for seed, f in futs.items()}
    else:
        for seed in sweep_cfg.seeds:
            per_seed[seed] = _run_seed_ladder(seed, wl_cfg, tiers, ctrl_cfg,
                                              sweep_cfg, gate_cfg, budgets_bits,
                                              progress)

    points = []
    keys = [("Dense", -1)]
    for variant in sweep_cfg.variants:
        if variant == "Dense":
            continue
        keys += [(variant, j) for j in range(len(budgets_bits))]
    for variant, j in keys:
        rows = [per_seed[seed][(variant, j)] for seed in sweep_cfg.seeds]
        budget = budgets_bits[j] if j >= 0 else dense_key_bits(wl_cfg)
        point = OperatingPoint(variant=variant, budget_idx=j, budget_bits=budget)
        if not all(r["feasible"] for r in rows):
            point.feasible = False
        else:
            dense_rows = [per_seed[seed][("Dense", -1)] for seed in sweep_cfg.seeds]
            point.q = float(np.mean([r["q"] for r in rows]))
            point.s = float(np.median([r["s"] for r in rows]))
            point.b_kv = float(np.mean([r["b_kv"] for r in rows]))
            point.b_hbm = float(np.mean([r["b_hbm"] for r in rows]))
            point.stability = {
                "disagree": float(np.mean([
                    r["tokens"] != d["tokens"] for r, d in zip(rows, dense_rows)])),
                "length_drift": float(np.mean([
                    abs(r["len"] - d["len"]) for r, d in zip(rows, dense_rows)])),
                "q_var": float(np.var([r["q"] for r in rows])),
            }
        points.append(point)

    q_star = max(p.q for p in points if p.variant == "Dense" and p.feasible)
    measurable = [p for p in points if p.feasible]
    for p in iso_quality_filter(measurable, q_star, sweep_cfg.delta):
        p.retained = True
    for variant in sweep_cfg.variants:
        retained = [p for p in points if p.variant == variant and p.retained]
        for p in pareto_envelope(retained):
            p.on_envelope = True
    joint_env = [p for p in points if p.variant == "SphKV-Joint" and p.on_envelope]
    if joint_env:
        representative_point(joint_env).is_star = True
    return SweepResult(points, q_star, sweep_cfg.delta, budgets_bits)


# ---------------------------------------------------------------------------
# Frontier machinery
# ---------------------------------------------------------------------------


def iso_quality_filter(points, q_star: float, delta: float):
    """Matched-quality feasible set: q >= q_star - delta. Idempotent."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    return [p for p in points if p.q is not None and p.q >= q_star - delta]


def pareto_envelope(points):
    """Non-dominated points in the (b_kv down, s up) plane, sorted by b_kv.

    p is dominated when some p' has b' <= b and s' >= s with at least one
    strict inequality; duplicate (b, s) pairs survive together.
    """
    pts = [p for p in points if p.b_kv is not None and p.s is not None]
    if not pts:
        return []
    order = sorted(pts, key=lambda p: (p.b_kv, -p.s))
    env = []
    best_s_smaller_b = -math.inf
    i = 0
    while i < len(order):
        j = i
        b = order[i].b_kv
        while j < len(order) and order[j].b_kv == b:
            j += 1
        group = order[i:j]
        group_max = max(p.s for p in group)
        if group_max > best_s_smaller_b:
            env.extend(p for p in group if p.s == group_max)
        best_s_smaller_b = max(best_s_smaller_b, group_max)
        i = j
    return env


def gamma_summaries(retained, dense_point):
    """Iso-quality speedup and iso-throughput memory ratio.

    gamma_s = max s(p)/s_dense over the retained set; gamma_m = min
    b_kv(p)/b_kv_dense over retained points at least as fast as dense.
    Either is None when its defining set is empty.
    """
    s_d, b_d = dense_point.s, dense_point.b_kv
    if s_d is None or b_d is None or s_d <= 0 or b_d <= 0:
        raise ValueError("dense point must carry positive s and b_kv")
    pts = [p for p in retained if p.s is not None and p.b_kv is not None]
    gamma_s = max((p.s / s_d for p in pts), default=None)
    fast = [p for p in pts if p.s >= s_d]
    gamma_m = min((p.b_kv / b_d for p in fast), default=None)
    return gamma_s, gamma_m


def representative_point(envelope):
    """Best throughput-per-resident-byte point with the deterministic
    tie ladder: larger s, smaller b_kv, smaller b_hbm, smallest budget."""
    if not envelope:
        raise ValueError("empty envelope")

    def ladder(p):
        return (p.s / p.b_kv, p.s, -p.b_kv,
                -(p.b_hbm if p.b_hbm is not None else math.inf),
                -p.budget_idx)

    return max(envelope, key=ladder)


def synergy_gap(points_by_variant: dict, beta: float) -> float:
    """Psi(Joint) - max Psi over {KeepDrop, Quant-only, Decoupled} where
    Psi = q + beta * ln(s)."""
    needed = ("SphKV-Joint", "KeepDrop", "Quant-only", "Decoupled")
    for name in needed:
        p = points_by_variant.get(name)
        if p is None or p.q is None or p.s is None:
            raise ValueError(f"missing variant {name} at this budget")
        if p.s <= 0:
            raise ValueError("throughput must be positive for the functional")

    def psi(p):
        return p.q + beta * math.log(p.s)

    alt = max(psi(points_by_variant[n]) for n in needed[1:])
    return psi(points_by_variant["SphKV-Joint"]) - alt


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def write_frontier_csv(result: SweepResult, path: str, model: str = "synthetic",
                       context: int | None = None):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "variant", "L", "budget_idx", "b_kv", "b_hbm", "s",
                    "q", "retained", "on_envelope", "is_star"])
        for p in result.points:
            w.writerow([
                model, p.variant, context if context is not None else "",
                p.budget_idx,
                f"{p.b_kv:.6f}" if p.b_kv is not None else "",
                f"{p.b_hbm:.6f}" if p.b_hbm is not None else "",
                f"{p.s:.6f}" if p.s is not None else "",
                f"{p.q:.6f}" if p.q is not None else "",
                int(p.retained), int(p.on_envelope), int(p.is_star),
            ])


def read_frontier_csv(path: str) -> list[OperatingPoint]:
    points = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            points.append(OperatingPoint(
                variant=row["variant"], budget_idx=int(row["budget_idx"]),
                budget_bits=0,
                b_kv=float(row["b_kv"]) if row["b_kv"] else None,
                b_hbm=float(row["b_hbm"]) if row["b_hbm"] else None,
                s=float(row["s"]) if row["s"] else None,
                q=float(row["q"]) if row["q"] else None,
                feasible=bool(row["b_kv"]),
                retained=row["retained"] == "1",
                on_envelope=row["on_envelope"] == "1",
                is_star=row["is_star"] == "1",
            ))
    return points


def write_summary_csv(result: SweepResult, path: str, beta: float):
    """Per-panel gammas plus the synergy gap at each budget where the four
    A2 variants all have measurable points."""
    dense = result.dense_point()
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "budget_idx", "value"])
        retained = [p for p in result.points if p.retained]
        gamma_s, gamma_m = gamma_summaries(retained, dense) if retained else (None, None)
        w.writerow(["gamma_s", "", f"{gamma_s:.6f}" if gamma_s else "absent"])
        w.writerow(["gamma_m", "", f"{gamma_m:.6f}" if gamma_m else "absent"])
        w.writerow(["q_star_dense", "", f"{result.q_star:.6f}"])
        by_budget = {}
        for p in result.points:
            if p.budget_idx >= 0 and p.feasible:
                by_budget.setdefault(p.budget_idx, {})[p.variant] = p
        for j in sorted(by_budget):
            try:
                gap = synergy_gap(by_budget[j], beta)
            except ValueError:
                continue
            w.writerow(["delta_joint", j, f"{gap:.6f}"])
