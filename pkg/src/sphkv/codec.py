"""Spherical key codec: coordinate maps, tiered quantizers, and the
angular similarity recurrence.

A key is stored as a radius plus (d-1) hyperspherical angles. Precision
tiers assign bit widths to the packed angle codes, the radius code, and
per-item metadata; tier 0 is reserved for "drop" and carries zero rate.
Cosine similarity between a query direction and a coded key direction is
evaluated by a single left-to-right pass over the angles that maintains
running sine products, so no d-dimensional dense vector is ever formed
on that path.

Quantizer grids:
    - polar angles (coordinates 0..d-3, range [0, pi]) use an
      endpoint-inclusive uniform grid with 2^b levels and round-to-nearest,
      so 0 and pi are exact grid points and the decode error is at most
      half the grid step pi/(2^b - 1);
    - the final circular angle (range [0, 2pi)) uses a wraparound grid of
      2^b levels with step 2pi/2^b; the circular decode error is at most
      half that step;
    - the radius is quantized against a caller-supplied scale (page-level
      max) as round(r/scale * (2^b - 1)), so codes span [0, scale]
      inclusive and the decode error is at most scale/(2*(2^b - 1)).

All operations are pure; TierTable calibration is write-once-then-read.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

DROP_TIER_ID = 0

# Widest representable code: codes live in uint64 and must round-trip
# through float64 quantization, so 53 bits is the usable ceiling.
MAX_CODE_BITS = 53


class _ReconCounter(threading.local):
    # Thread-local so concurrent rollouts each witness only their own
    # reconstructions; a rollout runs entirely on one thread.
    value = 0


_RECONSTRUCTIONS = _ReconCounter()


def dense_reconstruction_count() -> int:
    """Reconstruction calls seen by this thread (path-purity witness)."""
    return _RECONSTRUCTIONS.value


@dataclass(frozen=True)
class SphericalKey:
    """Radius plus (d-1) hyperspherical angles of one key vector."""

    radius: float
    angles: np.ndarray

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"radius must be nonnegative, got {self.radius}")
        object.__setattr__(self, "angles", np.asarray(self.angles, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.angles.shape[0] + 1


@dataclass(frozen=True)
class TierSpec:
    """Bit widths of one precision tier; id 0 is the zero-rate drop tier."""

    id: int
    angle_bits: int
    radius_bits: int
    meta_bits: int

    def __post_init__(self):
        if self.id == DROP_TIER_ID:
            if self.angle_bits or self.radius_bits or self.meta_bits:
                raise ValueError("drop tier must have zero bit widths")
        else:
            if self.angle_bits < 1 or self.radius_bits < 1:
                raise ValueError(
                    f"tier {self.id}: angle_bits and radius_bits must be >= 1"
                )
        for name in ("angle_bits", "radius_bits", "meta_bits"):
            b = getattr(self, name)
            if b < 0 or b > MAX_CODE_BITS:
                raise ValueError(f"tier {self.id}: {name}={b} outside [0, {MAX_CODE_BITS}]")

    @property
    def is_drop(self) -> bool:
        return self.id == DROP_TIER_ID


def rate_bits(tier: TierSpec, d: int) -> int:
    """Per-item rate R(t) = (d-1)*b_angle + b_radius + b_meta; 0 for drop."""
    if d < 2:
        raise ValueError(f"head dimension must be >= 2, got {d}")
    if tier.is_drop:
        return 0
    return (d - 1) * tier.angle_bits + tier.radius_bits + tier.meta_bits


@dataclass
class TierTable:
    """Ordered tier set, drop first, with calibrated distortion constants.

    eps_theta/eps_r start unset and are filled once by calibrate(); the
    drop tier conventionally carries (1.0, 1.0), the maximal distortion.
    """

    tiers: tuple[TierSpec, ...]
    eps_theta: dict[int, float] = field(default_factory=dict)
    eps_r: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        self.tiers = tuple(self.tiers)
        if not self.tiers or not self.tiers[0].is_drop:
            raise ValueError("tier table must start with the drop tier (id 0)")
        ids = [t.id for t in self.tiers]
        if ids != sorted(ids) or len(set(ids)) != len(ids):
            raise ValueError(f"tier ids must be unique and ascending, got {ids}")

    def __iter__(self):
        return iter(self.tiers)

    @property
    def non_drop(self) -> tuple[TierSpec, ...]:
        return self.tiers[1:]

    @property
    def max_tier(self) -> TierSpec:
        if len(self.tiers) < 2:
            raise ValueError("tier table has no non-drop tiers")
        return self.tiers[-1]

    def spec_for(self, tier_id: int) -> TierSpec:
        for t in self.tiers:
            if t.id == tier_id:
                return t
        raise KeyError(f"unknown tier id {tier_id}")

    def rate_bits(self, tier_id: int, d: int) -> int:
        return rate_bits(self.spec_for(tier_id), d)

    def validate_rates(self, d: int) -> None:
        """Rates must be strictly increasing across non-drop tiers."""
        rates = [rate_bits(t, d) for t in self.non_drop]
        for lo, hi in zip(rates, rates[1:]):
            if hi <= lo:
                raise ValueError(
                    f"tier rates not strictly increasing at d={d}: {rates}"
                )

    @property
    def calibrated(self) -> bool:
        return all(t.id in self.eps_theta for t in self.non_drop)

    def distortion_constants(self, tier_id: int) -> tuple[float, float]:
        if tier_id == DROP_TIER_ID:
            return 1.0, 1.0
        if tier_id not in self.eps_theta:
            raise KeyError(f"tier {tier_id} is not calibrated")
        return self.eps_theta[tier_id], self.eps_r[tier_id]

    def calibrate(self, sample: list[SphericalKey], seed: int, queries_per_key: int = 1) -> None:
        for t in self.non_drop:
            eps_t, eps_r = calibrate_distortion(t, sample, seed, queries_per_key)
            self.eps_theta[t.id] = eps_t
            self.eps_r[t.id] = eps_r

    def serialize(self) -> str:
        """One line per tier: `tier <id> <b_theta> <b_r> <b_meta>`."""
        return "\n".join(
            f"tier {t.id} {t.angle_bits} {t.radius_bits} {t.meta_bits}" for t in self.tiers
        )

    @classmethod
    def parse(cls, text: str) -> "TierTable":
        tiers = []
        for line in text.strip().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] != "tier" or len(parts) != 5:
                raise ValueError(f"bad tier line: {line!r}")
            tid, bt, br, bm = (int(p) for p in parts[1:])
            tiers.append(TierSpec(tid, bt, br, bm))
        return cls(tuple(tiers))


@dataclass(frozen=True)
class AngleCode:
    """Packed per-coordinate angle codes, each below 2^angle_bits."""

    codes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "codes", np.asarray(self.codes, dtype=np.uint64))


@dataclass(frozen=True)
class RadiusCode:
    code: int


# ---------------------------------------------------------------------------
# Coordinate maps
# ---------------------------------------------------------------------------

_NORM_EPS = 1e-12
TWO_PI = 2.0 * math.pi


def to_spherical(k: np.ndarray) -> SphericalKey:
    """Map a dense vector to its radius and hyperspherical angles.

    The zero vector maps to radius 0 with all-zero angles by convention.
    """
    k = np.asarray(k, dtype=np.float64)
    d = k.shape[0]
    if d < 2:
        raise ValueError(f"need d >= 2, got {d}")
    radius = float(np.linalg.norm(k))
    u = k / (radius + _NORM_EPS)
    angles = angles_from_unit(u[None, :])[0]
    if radius == 0.0:
        angles = np.zeros(d - 1)
    return SphericalKey(radius, angles)


def angles_from_unit(u: np.ndarray) -> np.ndarray:
    """Hyperspherical angles of unit rows u (n, d) -> (n, d-1).

    Polar angles land in [0, pi]; the final angle is wrapped into [0, 2pi).
    """
    n, d = u.shape
    angles = np.empty((n, d - 1))
    # tail[:, j] = norm of u[:, j:] ; built right-to-left
    sq = u * u
    tail = np.sqrt(np.cumsum(sq[:, ::-1], axis=1)[:, ::-1])
    for j in range(d - 2):
        angles[:, j] = np.arctan2(tail[:, j + 1], u[:, j])
    last = np.arctan2(u[:, d - 1], u[:, d - 2])
    angles[:, d - 2] = np.where(last < 0, last + TWO_PI, last)
    # arctan2 of a zero tail yields 0 for positive leads and pi for negative,
    # both already in range; clip guards roundoff only.
    np.clip(angles[:, : d - 2] if d > 2 else angles[:, :0], 0.0, math.pi,
            out=angles[:, : d - 2] if d > 2 else angles[:, :0])
    return angles


def from_spherical(s: SphericalKey) -> np.ndarray:
    """Reconstruct the dense vector of a spherical key.

    This is the densification primitive: every call is counted so decode
    paths can prove they never reconstructed.
    """
    _RECONSTRUCTIONS.value += 1
    return s.radius * _unit_from_angles(s.angles[None, :])[0]


def batch_reconstruct(radii: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Vectorized from_spherical over rows; counted like the scalar form."""
    _RECONSTRUCTIONS.value += 1
    return radii[:, None] * _unit_from_angles(angles)


def _unit_from_angles(angles: np.ndarray) -> np.ndarray:
    """Unit vectors (n, d) from angle rows (n, d-1) via the sine chain."""
    n, dm1 = angles.shape
    c = np.cos(angles)
    s = np.sin(angles)
    out = np.empty((n, dm1 + 1))
    prod = np.ones(n)
    for j in range(dm1):
        out[:, j] = prod * c[:, j]
        prod = prod * s[:, j]
    out[:, dm1] = prod
    return out


def reconstruct_from_trig(radii, cosines, sines, out=None, prods=None):
    """Dense keys from precomputed cos/sin of decoded angles (n, d-1).

    The staging step of the reconstruct-then-dot path: same arithmetic as
    batch_reconstruct but without re-evaluating trig. Counted as a
    reconstruction. Callers on the hot path may pass preallocated `out`
    (n, d) and `prods` (n, d-1) scratch buffers.
    """
    _RECONSTRUCTIONS.value += 1
    n, dm1 = cosines.shape
    if out is None:
        out = np.empty((n, dm1 + 1))
    if prods is None:
        prods = np.empty((n, dm1))
    # cumulative sine products: prods[:, j] = prod_{l<=j} sin
    np.cumprod(sines, axis=1, out=prods)
    out[:, 0] = cosines[:, 0]
    np.multiply(prods[:, : dm1 - 1], cosines[:, 1:], out=out[:, 1:dm1])
    out[:, dm1] = prods[:, dm1 - 1]
    out *= radii[:, None]
    return out


# ---------------------------------------------------------------------------
# Quantizers
# ---------------------------------------------------------------------------


def _polar_step(bits: int) -> float:
    return math.pi / float((1 << bits) - 1) if bits >= 1 else math.pi


def _circular_step(bits: int) -> float:
    return TWO_PI / float(1 << bits)


def quantize_angles(angles: np.ndarray, bits: int) -> np.ndarray:
    """Quantize angle rows (..., d-1) to integer codes below 2^bits."""
    angles = np.asarray(angles, dtype=np.float64)
    levels = np.uint64(1) << np.uint64(bits)
    codes = np.empty(angles.shape, dtype=np.uint64)
    dm1 = angles.shape[-1]
    if dm1 > 1:
        step = _polar_step(bits)
        polar = np.rint(angles[..., : dm1 - 1] / step)
        codes[..., : dm1 - 1] = np.clip(polar, 0, float((1 << bits) - 1)).astype(np.uint64)
    cstep = _circular_step(bits)
    circ = np.rint(angles[..., dm1 - 1] / cstep).astype(np.int64)
    codes[..., dm1 - 1] = np.mod(circ, np.int64(1 << bits)).astype(np.uint64)
    assert codes.max(initial=0) < levels
    return codes


def dequantize_angles(codes: np.ndarray, bits: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint64)
    dm1 = codes.shape[-1]
    out = np.empty(codes.shape, dtype=np.float64)
    if dm1 > 1:
        out[..., : dm1 - 1] = codes[..., : dm1 - 1].astype(np.float64) * _polar_step(bits)
    out[..., dm1 - 1] = codes[..., dm1 - 1].astype(np.float64) * _circular_step(bits)
    return out


def quantize_radius(r: float, scale: float, bits: int) -> int:
    levels = (1 << bits) - 1
    return int(round(min(max(r / scale, 0.0), 1.0) * levels))


def dequantize_radius(code: int, scale: float, bits: int) -> float:
    levels = (1 << bits) - 1
    if not 0 <= code <= levels:
        raise ValueError(f"radius code {code} out of range for {bits} bits")
    return code / levels * scale


def encode_key(s: SphericalKey, t: TierSpec, radius_scale: float) -> tuple[AngleCode, RadiusCode]:
    """Quantize one key at tier t against a page-level radius scale."""
    if t.is_drop:
        raise ValueError("cannot encode at the drop tier")
    if radius_scale <= 0:
        raise ValueError("radius_scale must be positive")
    if s.radius > radius_scale * (1 + 1e-12):
        raise ValueError(
            f"radius {s.radius} exceeds page scale {radius_scale} (page-packing bug)"
        )
    a = quantize_angles(s.angles, t.angle_bits)
    r = quantize_radius(s.radius, radius_scale, t.radius_bits)
    return AngleCode(a), RadiusCode(r)


def decode_key(a: AngleCode, r: RadiusCode, t: TierSpec, radius_scale: float) -> SphericalKey:
    """Invert the tier-t quantizer grids. Deterministic."""
    if t.is_drop:
        raise ValueError("cannot decode the drop tier")
    codes = a.codes
    if codes.max(initial=0) >= (1 << t.angle_bits):
        raise ValueError("angle code out of range (corrupt stream)")
    angles = dequantize_angles(codes, t.angle_bits)
    radius = dequantize_radius(r.code, radius_scale, t.radius_bits)
    return SphericalKey(radius, angles)


def angle_half_steps(bits: int, d: int) -> tuple[float, float]:
    """Half-step bounds (polar, circular) for d-dimensional keys at b bits."""
    return _polar_step(bits) / 2.0, _circular_step(bits) / 2.0


def worst_case_eps(t: TierSpec, d: int) -> tuple[float, float]:
    """Analytic worst-case (eps_theta, eps_r_relative) for tier t.

    The cosine error is bounded by the sum of per-angle half steps because
    each partial derivative of the unit-vector dot product with respect to
    one angle has magnitude at most 1. eps_r is relative to the page scale.
    """
    if t.is_drop:
        return 1.0, 1.0
    half_polar, half_circ = angle_half_steps(t.angle_bits, d)
    eps_theta = (d - 2) * half_polar + half_circ
    eps_r = 0.5 / float((1 << t.radius_bits) - 1)
    return eps_theta, eps_r


# ---------------------------------------------------------------------------
# Angular similarity recurrence
# ---------------------------------------------------------------------------


def cos_from_angles(q_angles: np.ndarray, k_angles: np.ndarray) -> float:
    """cos(theta) between two directions given their angles, one pass.

    Accumulates sum_j (prod_{l<j} sin aq_l sin ak_l) cos aq_j cos ak_j plus
    the final all-sines term, maintaining the running product; no dense
    d-vector is materialized.
    """
    q_angles = np.asarray(q_angles, dtype=np.float64)
    k_angles = np.asarray(k_angles, dtype=np.float64)
    if q_angles.shape != k_angles.shape:
        raise ValueError("angle vectors must have equal length")
    acc = 0.0
    prod = 1.0
    for aq, ak in zip(q_angles, k_angles):
        acc += prod * math.cos(aq) * math.cos(ak)
        prod *= math.sin(aq) * math.sin(ak)
    return acc + prod


def cos_from_angles_batch(q_angles: np.ndarray, k_angles: np.ndarray) -> np.ndarray:
    """Vectorized recurrence: one query against key angle rows (n, d-1)."""
    q_angles = np.asarray(q_angles, dtype=np.float64)
    k_angles = np.atleast_2d(np.asarray(k_angles, dtype=np.float64))
    cq, sq = np.cos(q_angles), np.sin(q_angles)
    ck, sk = np.cos(k_angles), np.sin(k_angles)
    ss = sk * sq
    # prods[:, j] = prod_{l<j} sin aq_l sin ak_l
    prods = np.cumprod(ss, axis=1)
    acc = cq[0] * ck[:, 0]
    if q_angles.shape[0] > 1:
        acc = acc + np.sum(prods[:, :-1] * (cq[1:] * ck[:, 1:]), axis=1)
    return acc + prods[:, -1]


def cos_from_codes(q_angles: np.ndarray, k_code: AngleCode, t: TierSpec) -> float:
    """Angular similarity between exact query angles and a coded key."""
    if t.is_drop:
        raise ValueError("drop tier carries no angle code")
    k_angles = dequantize_angles(k_code.codes, t.angle_bits)
    return cos_from_angles(q_angles, k_angles)


def angular_features(angles: np.ndarray) -> np.ndarray:
    """Per-item running-product terms of the recurrence, rows (n, d-1) -> (n, d).

    Column j holds (prod_{l<j} sin a_l) cos a_j and the last column the full
    sine product, so the recurrence against a query reduces to a dot of the
    two feature rows. These are the recurrence's own intermediates; no
    inverse coordinate map is involved.
    """
    angles = np.atleast_2d(np.asarray(angles, dtype=np.float64))
    n, dm1 = angles.shape
    c = np.cos(angles)
    s = np.sin(angles)
    out = np.empty((n, dm1 + 1))
    prods = np.cumprod(s, axis=1)
    out[:, 0] = c[:, 0]
    if dm1 > 1:
        out[:, 1:dm1] = prods[:, : dm1 - 1] * c[:, 1:]
    out[:, dm1] = prods[:, dm1 - 1]
    return out


# ---------------------------------------------------------------------------
# Distortion calibration
# ---------------------------------------------------------------------------


def calibrate_distortion(
    t: TierSpec,
    sample: list[SphericalKey],
    seed: int,
    queries_per_key: int = 1,
) -> tuple[float, float]:
    """Empirical RMS distortion constants of tier t on a key sample.

    eps_theta is the RMS difference between the recurrence on exact and on
    quantized key angles against seeded random query directions; eps_r is
    the RMS radius decode error normalized by the sample's max-radius scale.
    """
    if not sample:
        raise ValueError("calibration sample must be nonempty")
    if t.is_drop:
        raise ValueError("drop tier is not calibrated")
    rng = np.random.default_rng(seed)
    d = sample[0].dim
    k_angles = np.stack([s.angles for s in sample])
    k_dec = dequantize_angles(quantize_angles(k_angles, t.angle_bits), t.angle_bits)

    sq_acc = 0.0
    n_terms = 0
    for _ in range(queries_per_key):
        q = rng.standard_normal((len(sample), d))
        q /= np.linalg.norm(q, axis=1, keepdims=True) + _NORM_EPS
        qa = angles_from_unit(q)
        exact = _paired_cos(qa, k_angles)
        coded = _paired_cos(qa, k_dec)
        sq_acc += float(np.sum((exact - coded) ** 2))
        n_terms += len(sample)
    eps_theta = math.sqrt(sq_acc / n_terms)

    radii = np.array([s.radius for s in sample])
    scale = float(radii.max()) + _NORM_EPS
    codes = np.array([quantize_radius(r, scale, t.radius_bits) for r in radii])
    decoded = codes / float((1 << t.radius_bits) - 1) * scale
    eps_r = math.sqrt(float(np.mean(((decoded - radii) / scale) ** 2)))
    return eps_theta, eps_r


def _paired_cos(qa: np.ndarray, ka: np.ndarray) -> np.ndarray:
    """Row-paired recurrence over equal-shape angle matrices."""
    cq, sq = np.cos(qa), np.sin(qa)
    ck, sk = np.cos(ka), np.sin(ka)
    prods = np.cumprod(sq * sk, axis=1)
    acc = cq[:, 0] * ck[:, 0]
    if qa.shape[1] > 1:
        acc = acc + np.sum(prods[:, :-1] * cq[:, 1:] * ck[:, 1:], axis=1)
    return acc + prods[:, -1]
