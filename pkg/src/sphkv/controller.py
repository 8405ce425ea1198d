"""Retention controller: features, distortion proxies, tier scoring, and
budgeted keep/drop + tier allocation with hard protection.

Scoring follows the Lagrangian template: each state gets a per-tier
distortion proxy D(t) built from calibrated tier constants and
replicable feature scalars, a score S(t) = -D(t) - lambda * R(t), and a
value-per-bit nu = (D(drop) - D(t*)) / R(t*). Allocation is greedy by
descending nu with lexicographic (layer, head, token) tie-breaks;
protected states are charged first at the maximum tier. A second
allocator starts from the over-budget best-tier assignment and
down-tiers the lowest-nu states before dropping anything.

Feature recipes (pinned, deterministic, replaceable):
    - u_hat: mean prefill attention mass into keys older than a recency
      window (T_p // 8), max-normalized across heads; heads that attend
      far back score high;
    - s_hat: 1 minus the max-normalized mean inverse top1-top2 logit
      margin, so the head with the most margin-threatened prefill rows
      scores 0 (least stable).
Query rows are subsampled to at most 512 evenly spaced positions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .codec import DROP_TIER_ID, SphericalKey, TierSpec, TierTable, rate_bits
from .workload import SEG_RECENT, SEGMENTS, SyntheticWorkload

_NU_EPS = 1e-12
_MARGIN_EPS = 1e-6
MAX_FEATURE_ROWS = 512


class StateId(NamedTuple):
    layer: int
    head: int
    token: int


class InfeasibleProtectionError(Exception):
    """Protected demand alone exceeds the bit budget."""


@dataclass(frozen=True)
class ControllerConfig:
    lam: float = 1e-4
    omega_prefix: float = 0.25
    omega_retrieved: float = 2.0
    omega_recent: float = 1.0
    alpha_theta: float = 1.0
    alpha_r: float = 1.0
    protect_spans: tuple[tuple[int, int], ...] = ()
    protect_outliers: bool = False
    allocator: str = "greedy"  # or "downtier"

    def __post_init__(self):
        for name in ("omega_prefix", "omega_retrieved", "omega_recent",
                     "alpha_theta", "alpha_r"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.allocator not in ("greedy", "downtier"):
            raise ValueError(f"unknown allocator {self.allocator!r}")

    @property
    def omega(self) -> np.ndarray:
        return np.array([self.omega_prefix, self.omega_retrieved, self.omega_recent])


@dataclass
class ControllerFeatures:
    """Replicable scalars the proxy consumes; all strictly deterministic."""

    u_hat: np.ndarray          # (L, H) in [0, 1]
    s_hat: np.ndarray          # (L, H) in [0, 1]
    r_q: float                 # query-norm estimate
    omega: np.ndarray          # (3,) segment weights, SEGMENTS order
    alpha_theta: float
    alpha_r: float
    segments: np.ndarray       # (T_p,) int8 labels
    prefill: int

    def age(self, token: int) -> int:
        return self.prefill - token

    def omega_of(self, token: int) -> float:
        if 0 <= token < self.prefill:
            return float(self.omega[self.segments[token]])
        return float(self.omega[SEG_RECENT])  # decode-appended states


def compute_features(workload: SyntheticWorkload, config: ControllerConfig,
                     max_rows: int = MAX_FEATURE_ROWS) -> ControllerFeatures:
    """Head reuse/stability scalars from a dense prefill attention pass."""
    cfg = workload.config
    L, H, T, d = workload.keys.shape
    if T == 0:
        raise ValueError("empty prefill")
    window = max(T // 8, 1)
    if T <= max_rows:
        rows = np.arange(T)
    else:
        rows = np.unique(np.round(np.linspace(0, T - 1, max_rows)).astype(int))

    u_raw = np.zeros((L, H))
    inv_margin = np.zeros((L, H))
    scale = math.sqrt(d)
    for l in range(L):
        for h in range(H):
            q = workload.queries[l, h, rows]
            k = workload.keys[l, h]
            logits = q @ k.T / scale
            mask = np.arange(T)[None, :] > rows[:, None]
            logits = np.where(mask, -np.inf, logits)
            z = logits - logits.max(axis=1, keepdims=True)
            w = np.exp(z)
            w /= w.sum(axis=1, keepdims=True)
            old = np.arange(T)[None, :] <= (rows[:, None] - window)
            u_raw[l, h] = float(np.mean(np.sum(np.where(old, w, 0.0), axis=1)))
            ok = rows >= 1
            if np.any(ok):
                part = np.sort(np.where(mask[ok], -np.inf, logits[ok]), axis=1)
                margins = part[:, -1] - part[:, -2]
                inv_margin[l, h] = float(np.mean(1.0 / (margins + _MARGIN_EPS)))

    u_max = u_raw.max()
    u_hat = u_raw / u_max if u_max > 0 else np.ones_like(u_raw)
    m_max = inv_margin.max()
    s_hat = 1.0 - (inv_margin / m_max if m_max > 0 else np.zeros_like(inv_margin))
    r_q = float(np.mean(np.linalg.norm(workload.queries, axis=-1)))
    return ControllerFeatures(
        u_hat=u_hat, s_hat=s_hat, r_q=r_q, omega=config.omega,
        alpha_theta=config.alpha_theta, alpha_r=config.alpha_r,
        segments=workload.segments, prefill=T,
    )


def protected_mask(workload: SyntheticWorkload, config: ControllerConfig) -> np.ndarray:
    """(L, H, T) protection indicator from config spans and outlier flags."""
    L, H, T, _ = workload.keys.shape
    mask = np.zeros((L, H, T), dtype=bool)
    for lo, hi in config.protect_spans:
        if not (0 <= lo <= hi <= T):
            raise ValueError(f"protect span {(lo, hi)} outside [0, {T}]")
        mask[:, :, lo:hi] = True
    if config.protect_outliers:
        mask |= workload.outliers
    return mask


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def distortion_weights(state: StateId, key_radius: float, feat: ControllerFeatures,
                       d: int) -> tuple[float, float]:
    l, h, i = state
    om = feat.omega_of(i)
    sqrt_d = math.sqrt(d)
    w_theta = feat.alpha_theta * feat.u_hat[l, h] * om * (feat.r_q * key_radius / sqrt_d)
    w_r = feat.alpha_r * (1.0 - feat.s_hat[l, h]) * om * (feat.r_q / sqrt_d)
    return w_theta, w_r


def distortion_proxy(state: StateId, tier: TierSpec, key: SphericalKey,
                     feat: ControllerFeatures, tiers: TierTable) -> float:
    """D(t) = w_theta * eps_theta(t) + w_r * eps_r(t); drop uses (1, 1)."""
    w_theta, w_r = distortion_weights(state, key.radius, feat, key.dim)
    eps_t, eps_r = tiers.distortion_constants(tier.id)
    return w_theta * eps_t + w_r * eps_r


def score_and_best_tier(state: StateId, key: SphericalKey, feat: ControllerFeatures,
                        tiers: TierTable, lam: float,
                        protected: bool = False) -> tuple[int, float, float]:
    """Best tier under S(t) = -D(t) - lambda R(t); ties go to lower rate.

    Protected states never consider drop. Returns (tier_id, score, nu).
    """
    d = key.dim
    best_id, best_score = None, -math.inf
    d_drop = distortion_proxy(state, tiers.spec_for(DROP_TIER_ID), key, feat, tiers)
    candidates = tiers.non_drop if protected else tiers.tiers
    for t in candidates:  # ascending rate; strict > keeps the cheaper tier on ties
        s = -distortion_proxy(state, t, key, feat, tiers) - lam * rate_bits(t, d)
        if s > best_score:
            best_id, best_score = t.id, s
    d_best = distortion_proxy(state, tiers.spec_for(best_id), key, feat, tiers)
    nu = (d_drop - d_best) / (rate_bits(tiers.spec_for(best_id), d) + _NU_EPS)
    return best_id, best_score, nu


@dataclass
class StateScores:
    """Vectorized per-state scoring over the whole (L, H, T) grid."""

    best_tier: np.ndarray   # (L, H, T) int16
    score: np.ndarray       # (L, H, T)
    nu: np.ndarray          # (L, H, T)
    d_drop: np.ndarray      # (L, H, T)
    w_theta: np.ndarray     # (L, H, T) proxy weights, kept for re-scoring
    w_r: np.ndarray


def score_states(radii: np.ndarray, feat: ControllerFeatures, tiers: TierTable,
                 lam: float, protected: np.ndarray, d: int) -> StateScores:
    if not tiers.calibrated:
        raise ValueError("tier table must be calibrated before scoring")
    tiers.validate_rates(d)
    L, H, T = radii.shape
    sqrt_d = math.sqrt(d)
    om = feat.omega[feat.segments].astype(np.float64)[None, None, :]
    w_theta = feat.alpha_theta * feat.u_hat[:, :, None] * om * (feat.r_q * radii / sqrt_d)
    w_r = feat.alpha_r * (1.0 - feat.s_hat[:, :, None]) * om * (feat.r_q / sqrt_d)

    d_drop = w_theta + w_r  # eps = (1, 1)
    best_tier = np.full((L, H, T), DROP_TIER_ID, dtype=np.int16)
    best_score = -d_drop.copy()
    best_score[protected] = -np.inf  # drop not allowed there
    for t in tiers.non_drop:  # ascending rate; strict improvement keeps cheap ties
        eps_t, eps_r = tiers.distortion_constants(t.id)
        s = -(w_theta * eps_t + w_r * eps_r) - lam * rate_bits(t, d)
        better = s > best_score
        best_score = np.where(better, s, best_score)
        best_tier = np.where(better, np.int16(t.id), best_tier)

    d_best = np.empty_like(d_drop)
    rate_best = np.empty_like(d_drop)
    for t in tiers.tiers:
        sel = best_tier == t.id
        if not np.any(sel):
            continue
        eps_t, eps_r = tiers.distortion_constants(t.id)
        d_best[sel] = (w_theta * eps_t + w_r * eps_r)[sel]
        rate_best[sel] = rate_bits(t, d)
    nu = (d_drop - d_best) / (rate_best + _NU_EPS)
    return StateScores(best_tier, best_score, nu, d_drop, w_theta, w_r)


def fixed_tier_scores(scores: StateScores, tier_id: int, tiers: TierTable,
                      d: int) -> StateScores:
    """Re-score with every state's best tier pinned to `tier_id`.

    Retention-only and two-stage variants rank states by the value per
    bit they would realize at the pinned tier.
    """
    eps_t, eps_r = tiers.distortion_constants(tier_id)
    d_fixed = scores.w_theta * eps_t + scores.w_r * eps_r
    rate = rate_bits(tiers.spec_for(tier_id), d)
    nu = (scores.d_drop - d_fixed) / (rate + _NU_EPS)
    best = np.full(scores.best_tier.shape, tier_id, dtype=np.int16)
    return StateScores(best, -d_fixed - rate * 0.0, nu, scores.d_drop,
                       scores.w_theta, scores.w_r)


# ---------------------------------------------------------------------------
# Assignment and allocators
# ---------------------------------------------------------------------------


@dataclass
class TierAssignment:
    """Joint (z, tier, protected) per (layer, head, token), array-backed.

    Invariants: z == 0 exactly where tier == drop; protected implies
    retention at the maximum tier.
    """

    z: np.ndarray          # (L, H, T) int8
    tier: np.ndarray       # (L, H, T) int16
    protected: np.ndarray  # (L, H, T) bool

    def __getitem__(self, state) -> tuple[int, int, bool]:
        l, h, i = state
        return int(self.z[l, h, i]), int(self.tier[l, h, i]), bool(self.protected[l, h, i])

    def check(self, tiers: TierTable):
        assert np.all((self.z == 0) == (self.tier == DROP_TIER_ID))
        if np.any(self.protected):
            assert np.all(self.z[self.protected] == 1)
            assert np.all(self.tier[self.protected] == tiers.max_tier.id)

    def total_rate_bits(self, tiers: TierTable, d: int) -> int:
        total = 0
        for t in tiers.non_drop:
            total += int(np.sum(self.tier == t.id)) * rate_bits(t, d)
        return total

    def retained_fraction(self) -> float:
        return float(np.mean(self.z == 1))


def allocate_greedy(scores: StateScores, protected: np.ndarray, budget_bits: int,
                    tiers: TierTable, d: int) -> TierAssignment:
    """Greedy keep/drop + tier assignment under a hard bit budget.

    Protected states are charged first at the maximum tier (infeasible
    protection raises). The rest are scanned by descending nu with
    lexicographic (layer, head, token) tie-break; a state is retained at
    its best tier when the rate still fits the remaining budget.
    """
    if budget_bits < 0:
        raise ValueError("budget must be nonnegative")
    L, H, T = scores.best_tier.shape
    z = np.zeros((L, H, T), dtype=np.int8)
    tier = np.full((L, H, T), DROP_TIER_ID, dtype=np.int16)

    max_id = tiers.max_tier.id
    max_rate = tiers.rate_bits(max_id, d)
    n_prot = int(np.sum(protected))
    remaining = budget_bits - n_prot * max_rate
    if remaining < 0:
        raise InfeasibleProtectionError(
            f"protected demand {n_prot * max_rate} bits exceeds budget {budget_bits}")
    z[protected] = 1
    tier[protected] = max_id

    rate_of = {t.id: rate_bits(t, d) for t in tiers.tiers}
    free = ~protected
    ls, hs, toks = np.nonzero(free)
    nu = scores.nu[free]
    order = np.lexsort((toks, hs, ls, -nu))
    best = scores.best_tier[free]
    for j in order:
        t_id = int(best[j])
        if t_id == DROP_TIER_ID:
            continue
        cost = rate_of[t_id]
        if cost <= remaining:
            l, h, i = int(ls[j]), int(hs[j]), int(toks[j])
            z[l, h, i] = 1
            tier[l, h, i] = t_id
            remaining -= cost

    out = TierAssignment(z, tier, protected.copy())
    assert out.total_rate_bits(tiers, d) <= budget_bits
    out.check(tiers)
    return out


def downtier_before_drop(initial: TierAssignment, scores: StateScores, budget_bits: int,
                         tiers: TierTable, d: int) -> TierAssignment:
    """Reduce lowest-nu unprotected states one tier step at a time until
    the assignment fits the budget; drop only from the lowest tier."""
    if budget_bits < 0:
        raise ValueError("budget must be nonnegative")
    z = initial.z.copy()
    tier = initial.tier.copy()
    protected = initial.protected.copy()
    rate_of = {t.id: rate_bits(t, d) for t in tiers.tiers}
    tier_ids = [t.id for t in tiers.tiers]  # ascending rate, drop first
    below = {tid: tier_ids[k - 1] for k, tid in enumerate(tier_ids) if k > 0}

    total = sum(rate_of[int(t)] for t in tier.ravel())
    if total <= budget_bits:
        return TierAssignment(z, tier, protected)

    free = ~protected
    ls, hs, toks = np.nonzero(free)
    nu = scores.nu[free]
    order = np.lexsort((toks, hs, ls, nu))  # ascending nu
    for j in order:
        l, h, i = int(ls[j]), int(hs[j]), int(toks[j])
        while total > budget_bits and tier[l, h, i] != DROP_TIER_ID:
            cur = int(tier[l, h, i])
            nxt = below[cur]
            total -= rate_of[cur] - rate_of[nxt]
            tier[l, h, i] = nxt
            if nxt == DROP_TIER_ID:
                z[l, h, i] = 0
        if total <= budget_bits:
            break
    if total > budget_bits:
        raise InfeasibleProtectionError(
            f"protected demand {total} bits exceeds budget {budget_bits}")
    out = TierAssignment(z, tier, protected)
    out.check(tiers)
    return out


def full_best_tier_assignment(scores: StateScores, protected: np.ndarray,
                              tiers: TierTable) -> TierAssignment:
    """Every state at its best tier (protected at max); possibly over budget.

    The canonical starting point for downtier_before_drop.
    """
    tier = scores.best_tier.copy()
    tier[protected] = tiers.max_tier.id
    z = (tier != DROP_TIER_ID).astype(np.int8)
    return TierAssignment(z, tier, protected.copy())


# ---------------------------------------------------------------------------
# Allocation statistics
# ---------------------------------------------------------------------------


def segment_stats(assignment: TierAssignment, segments: np.ndarray,
                  tiers: TierTable, d: int) -> dict[str, tuple[float, float]]:
    """Per-segment retention rate and mean realized bytes per state."""
    out = {}
    bytes_of = {t.id: rate_bits(t, d) / 8.0 for t in tiers.tiers}
    state_bytes = np.zeros_like(assignment.tier, dtype=np.float64)
    for tid, b in bytes_of.items():
        state_bytes[assignment.tier == tid] = b
    for s_id, name in enumerate(SEGMENTS):
        sel = segments == s_id
        if not np.any(sel):
            continue
        rho = float(np.mean(assignment.z[:, :, sel] == 1))
        b_bar = float(np.mean(state_bytes[:, :, sel]))
        out[name] = (rho, b_bar)
    return out


def head_allocation_stats(assignment: TierAssignment, tiers: TierTable, d: int,
                          tokens: int) -> tuple[np.ndarray, float, float]:
    """Realized bytes/token per (layer, head), entropy, and Gini.

    a_h = (1/T) sum_i bytes(z, t); uniform allocation gives entropy
    log(n_heads) and Gini 0; an all-zero allocation reports (0, 0).
    """
    if tokens < 1:
        raise ValueError("token count must be >= 1")
    bytes_of = {t.id: rate_bits(t, d) / 8.0 for t in tiers.tiers}
    state_bytes = np.zeros_like(assignment.tier, dtype=np.float64)
    for tid, b in bytes_of.items():
        state_bytes[assignment.tier == tid] = b
    a = state_bytes.sum(axis=2) / tokens  # (L, H)
    flat = a.ravel()
    total = flat.sum()
    if total == 0:
        return a, 0.0, 0.0
    pi = flat / total
    nz = pi > 0
    entropy = float(-np.sum(pi[nz] * np.log(pi[nz])))
    n = flat.size
    gini = float(np.abs(flat[:, None] - flat[None, :]).sum() / (2.0 * n * total))
    return a, entropy, gini


def export_assignment_csv(assignment: TierAssignment, scores: StateScores, path: str):
    """`layer,head,token,z,tier,protected,nu` rows for downstream tooling."""
    L, H, T = assignment.z.shape
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "head", "token", "z", "tier", "protected", "nu"])
        for l in range(L):
            for h in range(H):
                for i in range(T):
                    w.writerow([l, h, i, int(assignment.z[l, h, i]),
                                int(assignment.tier[l, h, i]),
                                int(assignment.protected[l, h, i]),
                                f"{scores.nu[l, h, i]:.9g}"])
