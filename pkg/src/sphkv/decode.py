"""Decode loop with three interchangeable compute paths.

    dense  - exact scaled dot products over raw keys (the reference);
    angle  - logits straight from packed radius/angle codes via the
             angular recurrence; no dense key exists on this path, the
             dense_k_* meter categories stay at exactly zero, and the
             codec's reconstruction counter is asserted unchanged;
    recon  - the negative control: dense key blocks are staged through a
             real buffer write and re-read before every dot product,
             paying the densification tax (a metered write plus read of
             d*2 bytes per item per step) on top of the code-stream
             reads; reconstruction arithmetic runs once per item, since
             the tax in the underlying cost model is traffic, not flops.

Per decode step the rollout computes logits for every (layer, head),
mixes values with a numerically stable softmax, feeds the toy LM to emit
a token, appends the new token's coded KV, and optionally rescores new
items on a bounded refresh cadence. Throughput is wall-clock tokens per
second over the post-warmup window; the meter is reset at the
measurement boundary.

Per-page trig work is memoized on the page (keyed by item count): the
angle path keeps the recurrence's running-product features so steady
state is one small matvec per page, while the recon path re-stages its
cached dense key block through a scratch buffer every step, which is the
traffic the reconstruct-then-dot meter charges.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import codec, gate as gate_mod
from .codec import DROP_TIER_ID, SphericalKey, TierTable, angles_from_unit
from .controller import ControllerFeatures, StateId, score_and_best_tier
from .gate import GateConfig, GateState
from .store import PAGE_HEADER_BYTES, PagedStore
from .workload import SyntheticWorkload, toy_lm_step

PATHS = ("dense", "angle", "recon")


@dataclass
class DriftRecord:
    """One step's logit and softmax drift against the dense reference."""

    max_abs_drift: float
    l1_softmax: float
    bound: float  # 2 * max_abs_drift, the softmax Lipschitz bound


@dataclass
class AttentionOutput:
    weights: np.ndarray
    output: np.ndarray


def dense_logits(q: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Reference logits q . k / sqrt(d) over key rows."""
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[1] != q.shape[0]:
        raise ValueError(f"dimension mismatch: q has {q.shape[0]}, keys {keys.shape}")
    return keys @ q / math.sqrt(q.shape[0])


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    w = np.exp(z)
    return w / w.sum()


def softmax_mix(logits: np.ndarray, values: np.ndarray) -> AttentionOutput:
    """Stable softmax over logits, then the weight-mixed value sum."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("empty logits")
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != logits.shape[0]:
        raise ValueError("values not aligned with logits")
    w = stable_softmax(logits)
    return AttentionOutput(w, w @ values)


def logit_drift_bound(r_q: float, r_k: float, eps_r: float, eps_theta: float,
                      d: int) -> float:
    """Upper bound on |approx - exact| logit for |cos| <= 1:
    (r_q / sqrt(d)) * (r_k * eps_theta + eps_r + eps_r * eps_theta)."""
    if min(r_q, r_k, eps_r, eps_theta) < 0:
        raise ValueError("drift bound inputs must be nonnegative")
    return (r_q / math.sqrt(d)) * (r_k * eps_theta + eps_r + eps_r * eps_theta)


def softmax_drift_check(dense: np.ndarray, approx: np.ndarray) -> DriftRecord:
    """Record and assert the softmax L1 Lipschitz bound."""
    dense = np.asarray(dense, dtype=np.float64)
    approx = np.asarray(approx, dtype=np.float64)
    if dense.shape != approx.shape:
        raise ValueError("logit vectors differ in length")
    max_drift = float(np.max(np.abs(dense - approx))) if dense.size else 0.0
    l1 = float(np.abs(stable_softmax(dense) - stable_softmax(approx)).sum()) if dense.size else 0.0
    bound = 2.0 * max_drift
    assert l1 <= bound + 1e-9, f"softmax L1 {l1} exceeds bound {bound}"
    return DriftRecord(max_drift, l1, bound)


# ---------------------------------------------------------------------------
# Per-page kernels
# ---------------------------------------------------------------------------


def _page_cache(page) -> dict:
    if page._feat_cache is None:
        page._feat_cache = {}
    return page._feat_cache


def _page_trig(page, d: int):
    """cos/sin of decoded angles plus decoded radii, extended incrementally."""
    cache = _page_cache(page)
    n = page.count
    got = cache.get("trig_n", 0)
    if got < n:
        if "cos" not in cache:
            cap = page.capacity
            cache["cos"] = np.empty((cap, d - 1))
            cache["sin"] = np.empty((cap, d - 1))
            cache["radii"] = np.empty(cap)
        ang = codec.dequantize_angles(page.angle_codes[got:n], page.tier.angle_bits)
        cache["cos"][got:n] = np.cos(ang)
        cache["sin"][got:n] = np.sin(ang)
        levels = float((1 << page.tier.radius_bits) - 1)
        cache["radii"][got:n] = (page.radius_codes[got:n].astype(np.float64)
                                 / levels * page.radius_scale)
        cache["trig_n"] = n
    return cache["cos"][:n], cache["sin"][:n], cache["radii"][:n]


def _page_angular_features(page, d: int):
    """Running-product feature rows for the recurrence, cached per page."""
    cache = _page_cache(page)
    n = page.count
    got = cache.get("feat_n", 0)
    if got < n:
        if "feat" not in cache:
            cache["feat"] = np.empty((page.capacity, d))
        c, s, _ = _page_trig(page, d)
        prods = np.cumprod(s[got:n], axis=1)
        block = cache["feat"][got:n]
        block[:, 0] = c[got:n, 0]
        if d > 2:
            block[:, 1:d - 1] = prods[:, : d - 2] * c[got:n, 1:]
        block[:, d - 1] = prods[:, d - 2]
        cache["feat_n"] = n
    return cache["feat"][:n], cache["radii"][:n]


def _query_features(q: np.ndarray, tier_id=None, tiers: TierTable | None = None):
    sq = codec.to_spherical(q)
    if sq.radius == 0.0:
        raise ValueError("query must be nonzero")
    angles = sq.angles
    if tier_id is not None and tier_id != DROP_TIER_ID:
        t = tiers.spec_for(tier_id)
        angles = codec.dequantize_angles(codec.quantize_angles(angles, t.angle_bits),
                                         t.angle_bits)
    return sq.radius, codec.angular_features(angles[None, :])[0]


def angle_logits(q: np.ndarray, store: PagedStore, layer: int, head: int,
                 query_tier=None) -> np.ndarray:
    """Compressed-domain logits r_q * r~ * cos_from_codes / sqrt(d).

    Meters exactly the streamed header, code, and value bytes; touches no
    dense_k_* category and performs no reconstruction.
    """
    r_q, qfeat = _query_features(q, query_tier, store.tiers)
    scale = math.sqrt(store.d)
    segs = []
    for _, page in store.stream_pages(layer, head):
        if page.count == 0:
            continue
        feat, radii = _page_angular_features(page, store.d)
        segs.append((r_q / scale) * radii * (feat @ qfeat))
    if not segs:
        return np.empty(0)
    return np.concatenate(segs)


def recon_logits(q: np.ndarray, store: PagedStore, layer: int, head: int) -> np.ndarray:
    """Reconstruct-then-dot negative control: same numbers, more traffic.

    Each streamed page is decoded to a dense key block (counted by the
    codec's reconstruction witness), staged through a real buffer write,
    and re-read by the dot product; the staging write + read are metered
    as the densification tax on top of the code-stream reads.
    """
    q = np.asarray(q, dtype=np.float64)
    scale = math.sqrt(store.d)
    segs = []
    tax = store.d * 2  # dense stage bytes per item, each direction
    for _, page in store.stream_pages(layer, head):
        if page.count == 0:
            continue
        dense_block, stage = _page_dense_block(page, store.d)
        np.copyto(stage, dense_block)
        store.meter.add_write("dense_k_write", page.count * tax)
        store.meter.add_read("dense_k_read", page.count * tax)
        segs.append(stage @ q / scale)
    if not segs:
        return np.empty(0)
    return np.concatenate(segs)


# ---------------------------------------------------------------------------
# Rollout
# ---------------------------------------------------------------------------


@dataclass
class DecodeTrace:
    """Everything one rollout measured, plus per-step diagnostics."""

    path: str
    tokens: list
    margins: list
    outputs: list
    retained_counts: list
    step_read_bytes: list
    step_write_bytes: list
    drift: list | None
    gate_log: list
    s: float | None
    b_hbm: float | None
    meter_snapshot: dict
    decode_wall: float
    stop_reason: str
    b_kv: float
    t_active: int

    @property
    def length(self) -> int:
        return len(self.tokens)

    def summary(self) -> dict:
        out = {"path": self.path, "tokens": self.length, "s": self.s,
               "b_hbm": self.b_hbm, "b_kv": self.b_kv,
               "stop_reason": self.stop_reason, "t_active": self.t_active}
        out.update({f"bytes_{k}": v for k, v in self.meter_snapshot.items()})
        return out

    def to_csv(self, path: str):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "token", "margin", "max_drift", "l1_softmax",
                        "read_bytes", "write_bytes"])
            for i in range(self.length):
                dr = self.drift[i] if self.drift else None
                w.writerow([
                    i, self.tokens[i], f"{self.margins[i]:.9g}",
                    f"{dr.max_abs_drift:.9g}" if dr else "",
                    f"{dr.l1_softmax:.9g}" if dr else "",
                    self.step_read_bytes[i], self.step_write_bytes[i],
                ])


def _page_dense_block(page, d: int):
    """Reconstructed dense keys of a page (recon path only), extended
    incrementally as appends land. Reconstruction is performed once per
    new item; the per-step densification cost is the staging traffic,
    which _head_attend realizes as an actual buffer write plus re-read."""
    cache = _page_cache(page)
    n = page.count
    got = cache.get("dense_n", 0)
    if got < n:
        if "dense" not in cache:
            cache["dense"] = np.empty((page.capacity, d))
            cache["stage"] = np.empty((page.capacity, d))
        c, s, radii = _page_trig(page, d)
        cache["dense"][got:n] = codec.reconstruct_from_trig(
            radii[got:n], c[got:n], s[got:n])
        cache["dense_n"] = n
    return cache["dense"][:n], cache["stage"][:n]


def _head_attend(path, store, layer, head, q, raw_keys=None, qfeat_pair=None):
    """Logits + blockwise value mix for one head on the chosen path.

    Returns (logits, output, n_items, dense_ref_logits or None). Values
    are mixed block by block so no concatenated value matrix is built.
    The rollout precomputes the query-side recurrence factors for all
    heads of a step in one batch and passes them via `qfeat_pair`; page
    meter counts are batched into one accumulator call per head-step
    (totals are identical to per-page metering).
    """
    blocks = []
    if path == "dense":
        keys, vals = store.stream_dense(layer, head)
        logits = dense_logits(q, keys) if keys.shape[0] else np.empty(0)
        blocks = [vals] if keys.shape[0] else []
        segs = [logits] if keys.shape[0] else []
        ref = None
    else:
        scale = math.sqrt(store.d)
        segs = []
        ref_segs = [] if raw_keys is not None else None
        hdr_bytes = code_bytes = val_bytes = tax_bytes = 0
        recon = path == "recon"
        tax = store.d * 2
        if not recon:
            r_q, qfeat = qfeat_pair if qfeat_pair is not None else _query_features(q)
        for idx in store.pointer[(layer, head)]:
            page = store.pages[idx]
            hdr_bytes += PAGE_HEADER_BYTES
            code_bytes += (page.angle_stream_bytes(store.d)
                           + page.radius_stream_bytes())
            val_bytes += page.value_block_bytes(store.d_v)
            if page.count == 0:
                continue
            if recon:
                dense_block, stage = _page_dense_block(page, store.d)
                np.copyto(stage, dense_block)  # the metered dense-K write
                tax_bytes += page.count * tax
                segs.append(stage @ q / scale)  # and its re-read
            else:
                feat, radii = _page_angular_features(page, store.d)
                segs.append((r_q / scale) * radii * (feat @ qfeat))
            blocks.append(page.values[: page.count])
            if ref_segs is not None:
                ref_segs.append(raw_keys[page.token_ids[: page.count]] @ q / scale)
        reads = [("header", hdr_bytes), ("k_codes", code_bytes),
                 ("values", val_bytes)]
        writes = ()
        if tax_bytes:
            reads.append(("dense_k_read", tax_bytes))
            writes = (("dense_k_write", tax_bytes),)
        store.meter.add_batch(reads, writes)
        ref = np.concatenate(ref_segs) if ref_segs else None

    if not segs:
        return np.empty(0), np.zeros(store.d_v), 0, ref
    logits = np.concatenate(segs)
    w = stable_softmax(logits)
    out = np.zeros(store.d_v)
    pos = 0
    for b in blocks:
        n = b.shape[0]
        out += w[pos:pos + n] @ b
        pos += n
    return logits, out, logits.shape[0], ref


def decode_rollout(workload: SyntheticWorkload, store, *, path: str,
                   steps: int, warmup: int = 0, refresh_cadence: int = 0,
                   feat: ControllerFeatures | None = None,
                   tiers: TierTable | None = None, lam: float = 0.0,
                   append_tier="score", gate_cfg: GateConfig | None = None,
                   track_drift: bool = False) -> DecodeTrace:
    """Run the decode loop on one path; see the module docstring.

    `append_tier` is either "score" (per-head best tier via the controller
    recipe) or a fixed tier id. A positive `refresh_cadence` re-estimates
    the query-norm scalar from the current window every C steps and
    rescores only newly appended items; old pages are never rewritten.
    """
    if path not in PATHS:
        raise ValueError(f"unknown path {path!r}")
    cfg = workload.config
    L, H = cfg.layers, cfg.heads
    d, d_v = cfg.d, workload.d_v
    coded = path != "dense"
    if coded and (tiers is None):
        raise ValueError("coded paths need the tier table")
    if coded and append_tier == "score" and feat is None:
        raise ValueError("score-based appends need controller features")

    recon_before = codec.dense_reconstruction_count()
    meter = store.meter
    steps_target = min(steps, cfg.max_gen)

    # raw keys by token id, per (layer, head): prefill block plus appends
    raw = None
    if track_drift:
        raw = {}
        for l in range(L):
            for h in range(H):
                buf = np.zeros((cfg.prefill + steps_target, d))
                buf[: cfg.prefill] = workload.keys[l, h]
                raw[(l, h)] = buf

    gate_states = {(l, h): GateState() for l in range(L) for h in range(H)}
    head_append_tier = {(l, h): None for l in range(L) for h in range(H)}
    feat_now = feat
    recent_qnorms = []

    tokens, margins, outputs_log = [], [], []
    retained_log, reads_log, writes_log = [], [], []
    drift_log = [] if track_drift else None
    gate_log = []
    stop_reason = "max_steps"
    measured = 0
    wall_start = None
    prev_token = 0

    for t in range(steps_target):
        if t == warmup:
            meter.reset()
            wall_start = time.perf_counter()
        snap0 = (meter.read_bytes, meter.write_bytes)

        q_all = workload.decode_query(t, prev_token)
        qfeats = None
        if path == "angle":
            # one batched query-side recurrence for all heads of the step
            qnorms = np.linalg.norm(q_all, axis=-1)
            units = (q_all / (qnorms[..., None] + 1e-12)).reshape(-1, d)
            qfeats = codec.angular_features(angles_from_unit(units)).reshape(L, H, d)
        step_out = np.empty((L, H, d_v))
        step_items = 0
        step_drift_max, step_l1_max = 0.0, 0.0
        head_margins = {}
        for l in range(L):
            for h in range(H):
                q = q_all[l, h]
                rk = raw[(l, h)][: cfg.prefill + t] if raw is not None else None
                pair = (float(qnorms[l, h]), qfeats[l, h]) if qfeats is not None else None
                logits, out, n, ref = _head_attend(path, store, l, h, q, rk,
                                                   qfeat_pair=pair)
                step_out[l, h] = out
                step_items += n
                head_margins[(l, h)] = gate_mod.margin(logits)
                if track_drift and ref is not None and n:
                    rec = softmax_drift_check(ref, logits)
                    step_drift_max = max(step_drift_max, rec.max_abs_drift)
                    step_l1_max = max(step_l1_max, rec.l1_softmax)

        concat = step_out.reshape(-1)
        token = toy_lm_step(concat, workload.lm, cfg.seed, t)
        lm_logits = workload.lm.logits(concat, t)
        margins.append(gate_mod.margin(lm_logits))
        tokens.append(token)
        outputs_log.append(concat.copy())
        retained_log.append(step_items)
        if drift_log is not None:
            drift_log.append(DriftRecord(step_drift_max, step_l1_max,
                                         2.0 * step_drift_max))

        # gate: danger from predicted drift at the would-be append tier
        k_new, v_new = workload.decode_kv(t, token)
        recent_qnorms.append(float(np.mean(np.linalg.norm(q_all, axis=-1))))
        if coded:
            norms = np.linalg.norm(k_new.reshape(-1, d), axis=1)
            units = k_new.reshape(-1, d) / (norms[:, None] + 1e-12)
            new_angles = angles_from_unit(units).reshape(L, H, d - 1)
        for l in range(L):
            for h in range(H):
                if not coded:
                    store.append_item(l, h, k_new[l, h], v_new[l, h])
                    continue
                sid = StateId(l, h, cfg.prefill + t)
                key = SphericalKey(float(np.linalg.norm(k_new[l, h])),
                                   new_angles[l, h])
                protected = False
                if append_tier == "score":
                    tid, _, _ = score_and_best_tier(sid, key, feat_now, tiers, lam)
                else:
                    tid = int(append_tier)
                if gate_cfg is not None:
                    probe = tid if tid != DROP_TIER_ID else tiers.max_tier.id
                    # calibrated RMS constants; eps_r is scale-relative
                    eps_t, eps_r_rel = tiers.distortion_constants(probe)
                    r_max = max((store.pages[i].radius_scale
                                 for i in store.pointer[(l, h)]), default=0.0)
                    bound = gate_cfg.alpha * logit_drift_bound(
                        float(np.linalg.norm(q_all[l, h])), r_max,
                        eps_r_rel * r_max, eps_t, d)
                    danger = gate_mod.danger_score(bound, head_margins[(l, h)])
                    st = gate_states[(l, h)]
                    action, new_st = gate_mod.gate_step(danger, st, gate_cfg)
                    gate_log.append({"step": t, "layer": l, "head": h,
                                     "danger": danger,
                                     "inv_margin": 1.0 / (head_margins[(l, h)] + 1e-9),
                                     "q_norm": float(np.linalg.norm(q_all[l, h])),
                                     "mode_before": st.mode,
                                     "mode_after": new_st.mode, "action": action})
                    gate_states[(l, h)] = new_st
                    if new_st.mode == "protected":
                        tid, protected = tiers.max_tier.id, True
                if tid != DROP_TIER_ID:
                    store.append_item(l, h, key, v_new[l, h], tid,
                                      protected=protected, token_id=cfg.prefill + t)
                if raw is not None:
                    raw[(l, h)][cfg.prefill + t] = k_new[l, h]
        if not coded and raw is not None:
            for l in range(L):
                for h in range(H):
                    raw[(l, h)][cfg.prefill + t] = k_new[l, h]

        if t >= warmup:
            meter.tick()
            measured += 1
        reads_log.append(meter.read_bytes - snap0[0] if t >= warmup else 0)
        writes_log.append(meter.write_bytes - snap0[1] if t >= warmup else 0)

        if refresh_cadence > 0 and (t + 1) % refresh_cadence == 0 and feat_now is not None:
            window = recent_qnorms[-refresh_cadence:]
            feat_now = replace(feat_now, r_q=float(np.mean(window)))

        prev_token = token
        if token == cfg.eos_id and len(tokens) >= cfg.min_gen:
            stop_reason = "eos"
            break

    decode_wall = (time.perf_counter() - wall_start) if wall_start is not None else 0.0
    s = measured / decode_wall if measured > 0 and decode_wall > 0 else None
    if path == "angle":
        assert codec.dense_reconstruction_count() == recon_before, \
            "angle path performed a dense reconstruction"

    t_active = cfg.prefill + len(tokens)
    return DecodeTrace(
        path=path, tokens=tokens, margins=margins, outputs=outputs_log,
        retained_counts=retained_log, step_read_bytes=reads_log,
        step_write_bytes=writes_log, drift=drift_log, gate_log=gate_log,
        s=s, b_hbm=meter.b_hbm(), meter_snapshot=meter.snapshot(),
        decode_wall=decode_wall, stop_reason=stop_reason,
        b_kv=store.b_kv(t_active), t_active=t_active,
    )
