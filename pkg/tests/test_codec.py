import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sphkv import codec
from sphkv.codec import (AngleCode, RadiusCode, SphericalKey, TierSpec, TierTable,
                         cos_from_angles, cos_from_codes, decode_key,
                         dense_reconstruction_count, encode_key, from_spherical,
                         rate_bits, to_spherical)


def random_keys(rng, n, d):
    return rng.standard_normal((n, d))


# ---------------------------------------------------------------------------
# coordinate maps
# ---------------------------------------------------------------------------


def test_axis_aligned_unit_vector():
    s = to_spherical(np.array([1.0, 0.0]))
    assert s.radius == pytest.approx(1.0)
    assert s.angles == pytest.approx([0.0])


def test_second_axis_vector():
    s = to_spherical(np.array([0.0, 2.0]))
    assert s.radius == pytest.approx(2.0)
    assert s.angles == pytest.approx([math.pi / 2])


def test_zero_vector_convention():
    s = to_spherical(np.zeros(4))
    assert s.radius == 0.0
    assert np.all(s.angles == 0.0)


@pytest.mark.parametrize("d", [2, 4, 64])
def test_roundtrip_dense_to_spherical(d):
    rng = np.random.default_rng(42 + d)
    for k in random_keys(rng, 100, d):
        s = to_spherical(k)
        back = from_spherical(s)
        assert np.linalg.norm(back - k) <= 1e-9 * np.linalg.norm(k)


def test_from_spherical_examples():
    assert from_spherical(SphericalKey(1.0, np.array([0.0]))) == pytest.approx([1.0, 0.0])
    out = from_spherical(SphericalKey(3.0, np.array([math.pi / 2, 0.0])))
    assert out == pytest.approx([0.0, 3.0, 0.0], abs=1e-12)


def test_from_spherical_norm_equals_radius():
    rng = np.random.default_rng(7)
    for _ in range(50):
        d = rng.integers(2, 17)
        angles = np.concatenate([rng.uniform(0, math.pi, d - 2),
                                 rng.uniform(0, 2 * math.pi, 1)])
        r = float(rng.uniform(0.1, 5.0))
        out = from_spherical(SphericalKey(r, angles))
        assert abs(np.linalg.norm(out) - r) <= 1e-12 * max(r, 1.0)


def test_spherical_roundtrip_on_valid_keys():
    # to_spherical(from_spherical(s)) == s away from degenerate angles
    rng = np.random.default_rng(11)
    for _ in range(50):
        d = int(rng.integers(2, 12))
        angles = np.concatenate([rng.uniform(0.01, math.pi - 0.01, max(d - 2, 0)),
                                 rng.uniform(0.0, 2 * math.pi, 1)])
        s = SphericalKey(float(rng.uniform(0.5, 2.0)), angles)
        s2 = to_spherical(from_spherical(s))
        assert s2.radius == pytest.approx(s.radius, rel=1e-12)
        assert np.allclose(s2.angles, s.angles, atol=1e-9)


# ---------------------------------------------------------------------------
# rate model
# ---------------------------------------------------------------------------


def test_rate_bits_formula():
    assert rate_bits(TierSpec(1, 4, 8, 8), 64) == 63 * 4 + 8 + 8 == 268
    assert rate_bits(TierSpec(0, 0, 0, 0), 64) == 0
    assert rate_bits(TierSpec(1, 1, 1, 0), 2) == 2


def test_tier_table_validation():
    with pytest.raises(ValueError):
        TierSpec(0, 1, 0, 0)  # drop tier with bits
    with pytest.raises(ValueError):
        TierSpec(1, 0, 4, 0)  # non-drop needs angle bits
    table = TierTable((TierSpec(0, 0, 0, 0), TierSpec(1, 4, 4, 0), TierSpec(2, 4, 4, 0)))
    with pytest.raises(ValueError):
        table.validate_rates(8)  # equal rates not strictly increasing


# ---------------------------------------------------------------------------
# quantizers
# ---------------------------------------------------------------------------


def test_zero_angle_is_grid_point():
    t = TierSpec(1, 8, 8, 0)
    a, r = encode_key(SphericalKey(1.0, np.zeros(3)), t, radius_scale=2.0)
    assert np.all(a.codes == 0)
    back = decode_key(a, r, t, radius_scale=2.0)
    assert np.all(back.angles == 0.0)


def test_radius_top_of_range():
    t = TierSpec(1, 8, 8, 0)
    a, r = encode_key(SphericalKey(2.0, np.zeros(1)), t, radius_scale=2.0)
    assert r.code == 255
    back = decode_key(a, r, t, radius_scale=2.0)
    assert back.radius == pytest.approx(2.0, abs=1e-9)


def test_encode_rejects_small_scale():
    t = TierSpec(1, 4, 4, 0)
    with pytest.raises(ValueError):
        encode_key(SphericalKey(3.0, np.zeros(2)), t, radius_scale=2.0)


def test_decode_rejects_bad_codes():
    t = TierSpec(1, 2, 2, 0)
    with pytest.raises(ValueError):
        decode_key(AngleCode(np.array([4], dtype=np.uint64)), RadiusCode(0), t, 1.0)
    with pytest.raises(ValueError):
        decode_key(AngleCode(np.array([0], dtype=np.uint64)), RadiusCode(9), t, 1.0)
    with pytest.raises(ValueError):
        decode_key(AngleCode(np.array([0], dtype=np.uint64)), RadiusCode(0),
                   TierSpec(0, 0, 0, 0), 1.0)


def circular_distance(a, b):
    d = abs(a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


@pytest.mark.parametrize("bits", [1, 2, 4, 8, 12])
def test_quantizer_half_step_bounds(bits):
    # per-angle decode error <= half the grid step; radius error <= half step
    rng = np.random.default_rng(bits)
    d = 6
    t = TierSpec(1, bits, bits, 0)
    polar_half = (math.pi / ((1 << bits) - 1)) / 2 if bits >= 1 else math.inf
    circ_half = (2 * math.pi / (1 << bits)) / 2
    for _ in range(1000):
        k = rng.standard_normal(d)
        s = to_spherical(k)
        scale = s.radius * float(rng.uniform(1.0, 2.0))
        a, r = encode_key(s, t, scale)
        back = decode_key(a, r, t, scale)
        polar_err = np.abs(back.angles[:-1] - s.angles[:-1])
        assert np.all(polar_err <= polar_half + 1e-12)
        assert circular_distance(back.angles[-1], s.angles[-1]) <= circ_half + 1e-12
        radius_half = scale / (2 * ((1 << bits) - 1))
        assert abs(back.radius - s.radius) <= radius_half + 1e-9 * scale


# ---------------------------------------------------------------------------
# angular recurrence
# ---------------------------------------------------------------------------


def test_cos_orthogonal_d2():
    t = TierSpec(1, 2, 2, 0)
    # circular grid with 4 levels: code 1 decodes to pi/2
    code = AngleCode(np.array([1], dtype=np.uint64))
    assert cos_from_codes(np.array([0.0]), code, t) == pytest.approx(0.0, abs=1e-15)


def test_cos_self_similarity():
    rng = np.random.default_rng(3)
    for d in (2, 4, 16):
        s = to_spherical(rng.standard_normal(d))
        assert cos_from_angles(s.angles, s.angles) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("d", [2, 4, 64])
def test_recurrence_matches_dense_dot(d):
    # oracle: explicit dot of reconstructed unit directions
    rng = np.random.default_rng(100 + d)
    for _ in range(500):
        q = to_spherical(rng.standard_normal(d))
        k = to_spherical(rng.standard_normal(d))
        got = cos_from_angles(q.angles, k.angles)
        want = float(np.dot(from_spherical(SphericalKey(1.0, q.angles)),
                            from_spherical(SphericalKey(1.0, k.angles))))
        assert got == pytest.approx(want, abs=1e-12)
        assert -1 - 1e-12 <= got <= 1 + 1e-12


def test_batch_recurrence_matches_scalar():
    rng = np.random.default_rng(5)
    d = 9
    q = to_spherical(rng.standard_normal(d))
    ks = np.stack([to_spherical(v).angles for v in rng.standard_normal((32, d))])
    batch = codec.cos_from_angles_batch(q.angles, ks)
    for j in range(32):
        assert batch[j] == pytest.approx(cos_from_angles(q.angles, ks[j]), abs=1e-13)


def test_angular_features_reproduce_recurrence():
    rng = np.random.default_rng(6)
    d = 12
    q = to_spherical(rng.standard_normal(d))
    k = to_spherical(rng.standard_normal(d))
    fq = codec.angular_features(q.angles[None])[0]
    fk = codec.angular_features(k.angles[None])[0]
    assert float(fq @ fk) == pytest.approx(cos_from_angles(q.angles, k.angles), abs=1e-13)


@settings(max_examples=50, deadline=None, derandomize=True)
@given(st.integers(2, 16), st.integers(0, 2 ** 31 - 1))
def test_recurrence_range_property(d, seed):
    rng = np.random.default_rng(seed)
    q = to_spherical(rng.standard_normal(d))
    k = to_spherical(rng.standard_normal(d))
    c = cos_from_angles(q.angles, k.angles)
    assert -1 - 4 * d * np.finfo(float).eps <= c <= 1 + 4 * d * np.finfo(float).eps


def test_reconstruction_counter_is_witness():
    before = dense_reconstruction_count()
    from_spherical(SphericalKey(1.0, np.array([0.5])))
    assert dense_reconstruction_count() == before + 1
    cos_from_angles(np.array([0.1]), np.array([0.2]))  # recurrence never densifies
    assert dense_reconstruction_count() == before + 1


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


def _sample_keys(n=64, d=8, seed=0):
    rng = np.random.default_rng(seed)
    return [to_spherical(v) for v in rng.standard_normal((n, d))]


def test_lossless_tier_calibrates_to_zero():
    sample = _sample_keys()
    eps_t, eps_r = codec.calibrate_distortion(TierSpec(1, 53, 53, 0), sample, seed=1)
    assert eps_t <= 1e-9
    assert eps_r <= 1e-9


def test_calibration_monotone_in_bits():
    sample = _sample_keys()
    lo_t, lo_r = codec.calibrate_distortion(TierSpec(1, 2, 2, 0), sample, seed=9)
    hi_t, hi_r = codec.calibrate_distortion(TierSpec(1, 8, 8, 0), sample, seed=9)
    assert lo_t > hi_t
    assert lo_r > hi_r


def test_calibration_deterministic():
    sample = _sample_keys()
    a = codec.calibrate_distortion(TierSpec(1, 4, 4, 0), sample, seed=3)
    b = codec.calibrate_distortion(TierSpec(1, 4, 4, 0), sample, seed=3)
    assert a == b


def test_calibration_rejects_empty_or_drop():
    with pytest.raises(ValueError):
        codec.calibrate_distortion(TierSpec(1, 4, 4, 0), [], seed=0)
    with pytest.raises(ValueError):
        codec.calibrate_distortion(TierSpec(0, 0, 0, 0), _sample_keys(), seed=0)


def test_tier_table_serialize_roundtrip():
    table = TierTable((TierSpec(0, 0, 0, 0), TierSpec(1, 2, 4, 8), TierSpec(2, 8, 8, 8)))
    text = table.serialize()
    assert text.splitlines()[1] == "tier 1 2 4 8"
    assert TierTable.parse(text) == TierTable(table.tiers)
