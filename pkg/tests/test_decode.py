import math

import numpy as np
import pytest

from sphkv import codec
from sphkv.codec import TierSpec, TierTable, to_spherical
from sphkv.controller import (ControllerConfig, TierAssignment, compute_features,
                              protected_mask, score_states)
from sphkv.decode import (angle_logits, decode_rollout, dense_logits,
                          logit_drift_bound, recon_logits, softmax_drift_check,
                          softmax_mix, stable_softmax)
from sphkv.store import DenseStore, TrafficMeter, pack_pages_arrays
from sphkv.workload import WorkloadConfig, generate

LOSSLESS = TierTable((TierSpec(0, 0, 0, 0), TierSpec(1, 53, 53, 0)))
LOSSY = TierTable((TierSpec(0, 0, 0, 0), TierSpec(1, 4, 6, 0), TierSpec(2, 8, 8, 0)))
for table in (LOSSLESS, LOSSY):
    for t in table.non_drop:
        table.eps_theta[t.id] = 1e-12 if t.angle_bits >= 53 else 0.01
        table.eps_r[t.id] = 1e-12 if t.radius_bits >= 53 else 0.005


def keep_all(L, H, T, tier_id=1):
    z = np.ones((L, H, T), dtype=np.int8)
    tier = np.full((L, H, T), tier_id, dtype=np.int16)
    return TierAssignment(z, tier, np.zeros((L, H, T), dtype=bool))


def packed_store(tiers=LOSSLESS, T=12, d=6, tier_id=1, seed=0, page_size=5):
    rng = np.random.default_rng(seed)
    keys = rng.standard_normal((1, 1, T, d))
    radii = np.linalg.norm(keys, axis=-1)
    angles = np.stack([to_spherical(keys[0, 0, i]).angles for i in range(T)])
    values = rng.standard_normal((1, 1, T, d))
    store = pack_pages_arrays(keep_all(1, 1, T, tier_id), radii,
                              angles.reshape(1, 1, T, d - 1), values, tiers,
                              page_size, TrafficMeter())
    return store, keys[0, 0], values[0, 0]


# ---------------------------------------------------------------------------
# logits paths
# ---------------------------------------------------------------------------


def test_dense_logits_unit_vectors():
    e1 = np.array([1.0, 0.0, 0.0, 0.0])
    assert dense_logits(e1, e1[None, :])[0] == pytest.approx(0.5)
    e2 = np.array([0.0, 1.0, 0.0, 0.0])
    assert dense_logits(e1, e2[None, :])[0] == pytest.approx(0.0)
    with pytest.raises(ValueError):
        dense_logits(e1, np.zeros((3, 3)))


def test_dense_logits_factorization_oracle():
    rng = np.random.default_rng(0)
    d = 16
    for _ in range(100):
        q, k = rng.standard_normal((2, d))
        sq, sk = to_spherical(q), to_spherical(k)
        cos = codec.cos_from_angles(sq.angles, sk.angles)
        want = sq.radius * sk.radius * cos / math.sqrt(d)
        assert dense_logits(q, k[None, :])[0] == pytest.approx(want, abs=1e-12)


def test_angle_logits_match_dense_at_lossless():
    store, keys, _ = packed_store()
    rng = np.random.default_rng(1)
    q = rng.standard_normal(6)
    got = angle_logits(q, store, 0, 0)
    want = dense_logits(q, keys)
    assert np.allclose(got, want, atol=1e-9)


def test_angle_logits_single_key_formula():
    store, keys, _ = packed_store(T=1)
    q = np.array([0.3, -1.2, 0.5, 0.7, 0.1, -0.4])
    sq, sk = to_spherical(q), to_spherical(keys[0])
    want = sq.radius * sk.radius * codec.cos_from_angles(sq.angles, sk.angles) / math.sqrt(6)
    assert angle_logits(q, store, 0, 0)[0] == pytest.approx(want, abs=1e-9)


def test_empty_store_yields_empty_logits():
    rng = np.random.default_rng(2)
    keys = rng.standard_normal((1, 1, 4, 6))
    radii = np.linalg.norm(keys, axis=-1)
    angles = np.stack([to_spherical(keys[0, 0, i]).angles for i in range(4)])
    values = rng.standard_normal((1, 1, 4, 6))
    drop = TierAssignment(np.zeros((1, 1, 4), dtype=np.int8),
                          np.zeros((1, 1, 4), dtype=np.int16),
                          np.zeros((1, 1, 4), dtype=bool))
    store = pack_pages_arrays(drop, radii, angles.reshape(1, 1, 4, 5), values,
                              LOSSLESS, 4, TrafficMeter())
    assert angle_logits(np.ones(6), store, 0, 0).size == 0
    assert recon_logits(np.ones(6), store, 0, 0).size == 0
    assert store.meter.total_bytes == 0


def test_recon_matches_angle_with_extra_traffic():
    # identical stores, identical quantization: logits agree to 1e-9 while
    # the recon meter is strictly larger with the exact densification tax
    q = np.random.default_rng(3).standard_normal(6)
    store_a, _, _ = packed_store(LOSSY, T=9, tier_id=2, seed=5)
    store_r, _, _ = packed_store(LOSSY, T=9, tier_id=2, seed=5)
    store_a.meter.reset(), store_r.meter.reset()
    la = angle_logits(q, store_a, 0, 0)
    lr = recon_logits(q, store_r, 0, 0)
    assert np.allclose(la, lr, atol=1e-9)
    base = store_a.meter.total_bytes
    assert store_r.meter.total_bytes == base + 9 * 6 * 2 * 2
    snap = store_r.meter.snapshot()
    assert snap["dense_k_write"] == snap["dense_k_read"] == 9 * 6 * 2


def test_angle_path_never_reconstructs():
    store, _, _ = packed_store(LOSSY, T=7, tier_id=1)
    before = codec.dense_reconstruction_count()
    angle_logits(np.ones(6), store, 0, 0)
    assert codec.dense_reconstruction_count() == before
    recon_logits(np.ones(6), store, 0, 0)
    assert codec.dense_reconstruction_count() > before  # one call per staged page


# ---------------------------------------------------------------------------
# softmax and drift
# ---------------------------------------------------------------------------


def test_softmax_mix_single_item():
    out = softmax_mix(np.array([3.0]), np.array([[1.0, 2.0]]))
    assert out.weights == pytest.approx([1.0])
    assert out.output == pytest.approx([1.0, 2.0])


def test_softmax_mix_symmetry_and_normalization():
    out = softmax_mix(np.array([0.7, 0.7]), np.eye(2))
    assert out.weights == pytest.approx([0.5, 0.5])
    assert abs(out.weights.sum() - 1.0) <= 1e-12


def test_softmax_shift_invariance():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal(20)
    for c in (-50.0, 3.1, 1e3):
        assert np.allclose(stable_softmax(logits), stable_softmax(logits + c),
                           atol=1e-12)


def test_softmax_mix_rejects_empty_and_misaligned():
    with pytest.raises(ValueError):
        softmax_mix(np.empty(0), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        softmax_mix(np.array([1.0]), np.zeros((2, 2)))


def test_drift_bound_closed_forms():
    assert logit_drift_bound(1.0, 1.0, 0.0, 0.0, 4) == 0.0
    assert logit_drift_bound(math.sqrt(9), 1.0, 0.0, 0.1, 9) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        logit_drift_bound(-1.0, 1.0, 0.0, 0.0, 4)


def test_drift_bound_dominates_empirical():
    rng = np.random.default_rng(6)
    d = 8
    t = TierSpec(1, 5, 6, 0)
    eps_theta, eps_r_rel = codec.worst_case_eps(t, d)
    for _ in range(1000):
        k = rng.standard_normal(d) * rng.uniform(0.2, 3.0)
        q = rng.standard_normal(d) * rng.uniform(0.2, 3.0)
        sk, sq = to_spherical(k), to_spherical(q)
        scale = sk.radius * rng.uniform(1.0, 1.5)
        a, r = codec.encode_key(sk, t, scale)
        dec = codec.decode_key(a, r, t, scale)
        exact = float(dense_logits(q, k[None, :])[0])
        approx = (sq.radius * dec.radius
                  * codec.cos_from_angles(sq.angles, dec.angles) / math.sqrt(d))
        bound = logit_drift_bound(sq.radius, sk.radius, eps_r_rel * scale,
                                  eps_theta, d)
        assert abs(approx - exact) <= bound + 1e-12


def test_softmax_drift_check_examples():
    r = softmax_drift_check(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
    assert r.l1_softmax == 0.0 and r.bound == 0.0
    r = softmax_drift_check(np.array([5.0]), np.array([-3.0]))
    assert r.l1_softmax == 0.0  # degenerate softmax
    with pytest.raises(ValueError):
        softmax_drift_check(np.zeros(2), np.zeros(3))


def test_softmax_lipschitz_monte_carlo():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        logits = rng.standard_normal(n) * 3
        approx = logits + rng.uniform(-0.5, 0.5, n)
        softmax_drift_check(logits, approx)  # asserts internally


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------


def rollout_setup(tiers, seed=0, **cfg_kw):
    base = dict(d=8, layers=2, heads=2, prefill=64, decode_steps=24, page_size=16,
                prefix_end=24, retrieved_end=48, seed=seed, max_gen=1000, min_gen=1000)
    base.update(cfg_kw)
    cfg = WorkloadConfig(**base)
    wl = generate(cfg)
    feat = compute_features(wl, ControllerConfig())
    prot = protected_mask(wl, ControllerConfig())
    scores = score_states(wl.radii, feat, tiers, 0.0, prot, cfg.d)
    return cfg, wl, feat, prot, scores


def fresh_store(wl, tiers, assignment):
    return pack_pages_arrays(assignment, wl.radii, wl.angles, wl.values, tiers,
                             wl.config.page_size, TrafficMeter())


def dense_rollout(wl, steps=None, warmup=0):
    cfg = wl.config
    store = DenseStore(cfg.layers, cfg.heads, cfg.d, wl.d_v, cfg.page_size,
                       TrafficMeter())
    store.bulk_load(wl.keys, wl.values)
    return decode_rollout(wl, store, path="dense",
                          steps=steps or cfg.decode_steps, warmup=warmup)


def test_rollout_all_warmup_reports_absent_throughput():
    cfg, wl, feat, prot, scores = rollout_setup(LOSSLESS, decode_steps=4)
    store = fresh_store(wl, LOSSLESS, keep_all(2, 2, 64))
    trace = decode_rollout(wl, store, path="angle", steps=4, warmup=4,
                           feat=feat, tiers=LOSSLESS, lam=0.0)
    assert trace.s is None
    assert trace.b_hbm is None


def test_lossless_angle_rollout_matches_dense_tokens():
    cfg, wl, feat, prot, scores = rollout_setup(LOSSLESS)
    dense = dense_rollout(wl)
    store = fresh_store(wl, LOSSLESS, keep_all(2, 2, 64))
    angle = decode_rollout(wl, store, path="angle", steps=cfg.decode_steps,
                           feat=feat, tiers=LOSSLESS, lam=0.0)
    assert angle.tokens == dense.tokens
    assert angle.length == cfg.decode_steps


def test_angle_rollout_dense_categories_zero():
    cfg, wl, feat, prot, scores = rollout_setup(LOSSY)
    store = fresh_store(wl, LOSSY, keep_all(2, 2, 64, tier_id=2))
    trace = decode_rollout(wl, store, path="angle", steps=cfg.decode_steps,
                           feat=feat, tiers=LOSSY, lam=0.0)
    assert trace.meter_snapshot["dense_k_write"] == 0
    assert trace.meter_snapshot["dense_k_read"] == 0


def test_recon_rollout_pays_exact_tax():
    cfg, wl, feat, prot, scores = rollout_setup(LOSSY, seed=2)
    sa = fresh_store(wl, LOSSY, keep_all(2, 2, 64, tier_id=2))
    sr = fresh_store(wl, LOSSY, keep_all(2, 2, 64, tier_id=2))
    kw = dict(steps=cfg.decode_steps, feat=feat, tiers=LOSSY, lam=0.0,
              append_tier=2)
    angle = decode_rollout(wl, sa, path="angle", **kw)
    recon = decode_rollout(wl, sr, path="recon", **kw)
    assert recon.tokens == angle.tokens  # same numbers, different traffic
    expected_tax = sum(n * cfg.d * 2 * 2 for n in recon.retained_counts)
    assert (recon.meter_snapshot["dense_k_write"]
            + recon.meter_snapshot["dense_k_read"]) == expected_tax
    assert recon.b_hbm > angle.b_hbm


def test_rollout_step_reads_match_closed_form():
    cfg, wl, feat, prot, scores = rollout_setup(LOSSY, seed=3)
    store = fresh_store(wl, LOSSY, keep_all(2, 2, 64, tier_id=1))
    probe = decode_rollout(wl, store, path="angle", steps=1, feat=feat,
                           tiers=LOSSY, lam=0.0, append_tier=1)
    # closed form for the first step: stream every (layer, head) once
    fresh = fresh_store(wl, LOSSY, keep_all(2, 2, 64, tier_id=1))
    expected = sum(fresh.expected_stream_bytes(l, h)
                   for l in range(2) for h in range(2))
    assert probe.step_read_bytes[0] == expected


def test_traffic_affine_in_retained_items():
    # per-token read bytes regress affinely on retained item count
    cfg, wl, feat, prot, scores = rollout_setup(LOSSY, seed=4, decode_steps=48)
    store = fresh_store(wl, LOSSY, keep_all(2, 2, 64, tier_id=2))
    tr = decode_rollout(wl, store, path="angle", steps=48, feat=feat,
                        tiers=LOSSY, lam=0.0, append_tier=2)
    x = np.array(tr.retained_counts, dtype=float)
    y = np.array(tr.step_read_bytes, dtype=float)
    coeffs = np.polyfit(x, y, 1)
    resid = y - np.polyval(coeffs, x)
    r2 = 1 - resid.var() / y.var()
    assert r2 > 0.999


def test_drift_tracking_bounds_hold_in_rollout():
    cfg, wl, feat, prot, scores = rollout_setup(LOSSY, seed=5, decode_steps=12)
    store = fresh_store(wl, LOSSY, keep_all(2, 2, 64, tier_id=2))
    trace = decode_rollout(wl, store, path="angle", steps=12, feat=feat,
                           tiers=LOSSY, lam=0.0, append_tier=2, track_drift=True)
    assert trace.drift is not None and len(trace.drift) == trace.length
    for rec in trace.drift:
        assert rec.l1_softmax <= rec.bound + 1e-9


def test_rollout_trace_csv(tmp_path):
    cfg, wl, feat, prot, scores = rollout_setup(LOSSY, seed=6, decode_steps=6)
    store = fresh_store(wl, LOSSY, keep_all(2, 2, 64, tier_id=1))
    trace = decode_rollout(wl, store, path="angle", steps=6, feat=feat,
                           tiers=LOSSY, lam=0.0, append_tier=1, track_drift=True)
    path = tmp_path / "trace.csv"
    trace.to_csv(str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "step,token,margin,max_drift,l1_softmax,read_bytes,write_bytes"
    assert len(lines) == trace.length + 1
    summary = trace.summary()
    assert summary["path"] == "angle"
    assert summary["bytes_dense_k_write"] == 0


def test_eos_stops_after_min_gen():
    tiers = LOSSLESS
    cfg, wl, feat, prot, scores = rollout_setup(tiers, seed=7, decode_steps=40,
                                                min_gen=2, max_gen=40)
    dense = dense_rollout(wl, steps=40)
    if dense.stop_reason == "eos":
        assert dense.length >= 2
        assert dense.tokens[-1] == wl.config.eos_id
    assert dense.length <= 40


def test_unknown_path_rejected():
    cfg, wl, feat, prot, scores = rollout_setup(LOSSLESS)
    store = fresh_store(wl, LOSSLESS, keep_all(2, 2, 64))
    with pytest.raises(ValueError):
        decode_rollout(wl, store, path="warp", steps=2)
