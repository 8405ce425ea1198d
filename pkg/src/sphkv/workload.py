"""Deterministic synthetic attention workloads and a toy autoregressive LM.

The generator plants the structure the retention controller is supposed
to exploit:

    - a per-head unit "topic" direction; queries cluster around it;
    - `prefix` tokens are bulk clutter: large-radius keys pointing away
      from the topic, so they draw essentially zero softmax mass and are
      safe to drop;
    - `retrieved` and `recent` tokens are aligned with the topic and
      carry the attention mass that actually shapes outputs;
    - a small outlier fraction gets its radius multiplied, stressing the
      page-level max-scale radius quantizer.

The toy LM projects the concatenated per-head attention outputs to a
vocabulary and decodes greedily (optionally sampled). Decode-step
queries and appended key/value states are derived from (seed, step,
previous token), so trajectories that disagree on one token diverge
afterwards, which is what the stability metrics measure.

Everything is a pure function of (config, seed): two runs are
bit-identical.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

from .codec import angles_from_unit

SEGMENTS = ("prefix", "retrieved", "recent")
SEG_PREFIX, SEG_RETRIEVED, SEG_RECENT = 0, 1, 2

# geometry of the planted structure
_PREFIX_RADIUS = (1.6, 0.15)
_ALIGNED_RADIUS = (1.0, 0.2)
_PREFIX_DIR_NOISE = 0.35
_ALIGNED_DIR_NOISE = 0.6
_QUERY_DIR_NOISE = 0.5
_QUERY_NORM_JITTER = 0.05


def _tag(*parts) -> list[int]:
    """Stable integer seed-sequence key from mixed parts."""
    out = []
    for p in parts:
        if isinstance(p, str):
            out.append(zlib.crc32(p.encode()))
        else:
            out.append(int(p) & 0xFFFFFFFF)
    return out


@dataclass(frozen=True)
class WorkloadConfig:
    d: int = 16
    layers: int = 2
    heads: int = 4
    prefill: int = 256
    decode_steps: int = 64
    page_size: int = 32
    prefix_end: int = 128
    retrieved_end: int = 224
    outlier_frac: float = 0.01
    outlier_mult: float = 4.0
    vocab: int = 32
    eos_id: int = 1
    min_gen: int = 4
    max_gen: int = 64
    seed: int = 0
    query_gain: float = 4.0
    critical_step: int | None = None
    critical_window: int = 8
    critical_gain: float = 2.0

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("d must be >= 2")
        if not (0 <= self.prefix_end <= self.retrieved_end <= self.prefill):
            raise ValueError(
                "segment spans must satisfy 0 <= prefix_end <= retrieved_end <= prefill"
            )
        if not (0.0 <= self.outlier_frac < 1.0):
            raise ValueError("outlier fraction must be in [0, 1)")
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if self.min_gen > self.max_gen:
            raise ValueError("min_gen must not exceed max_gen")

    def segment_labels(self) -> np.ndarray:
        seg = np.full(self.prefill, SEG_RECENT, dtype=np.int8)
        seg[: self.prefix_end] = SEG_PREFIX
        seg[self.prefix_end: self.retrieved_end] = SEG_RETRIEVED
        return seg


@dataclass
class ToyLM:
    """Projection from concatenated head outputs to vocab logits.

    Attention outputs are direction-normalized before projection and a
    deterministic per-step context offset is added to the bias, so the
    emitted token varies across steps and near-ties occur naturally: a
    perturbed attention output flips the token exactly when the
    perturbation crosses the local decision margin.
    """

    weight: np.ndarray
    bias: np.ndarray
    seed: int
    kappa: float = 2.0
    greedy: bool = True

    @classmethod
    def build(cls, config: WorkloadConfig, d_v: int, greedy: bool = True) -> "ToyLM":
        rng = np.random.default_rng(_tag(config.seed, "toy-lm"))
        fan_in = config.layers * config.heads * d_v
        w = rng.standard_normal((config.vocab, fan_in))
        b = 0.1 * rng.standard_normal(config.vocab)
        return cls(w, b, config.seed, greedy=greedy)

    def step_bias(self, step: int) -> np.ndarray:
        """Effective bias at a step: fixed bias plus the context offset."""
        rng = np.random.default_rng(_tag(self.seed, "lm-step", step))
        return self.bias + rng.standard_normal(self.bias.shape[0])

    def logits(self, outputs_concat: np.ndarray, step: int = 0) -> np.ndarray:
        fan_in = self.weight.shape[1]
        unit = outputs_concat / (np.linalg.norm(outputs_concat) + 1e-12)
        return self.kappa * (self.weight @ unit) / np.sqrt(fan_in) + self.step_bias(step)


def toy_lm_step(outputs_concat: np.ndarray, lm: ToyLM, seed: int, step: int) -> int:
    """Emit one token from concatenated attention outputs."""
    if outputs_concat.shape[0] != lm.weight.shape[1]:
        raise ValueError("missing or misshapen head outputs")
    logits = lm.logits(outputs_concat, step)
    if lm.greedy:
        return int(np.argmax(logits))
    rng = np.random.default_rng(_tag(seed, "sample", step))
    z = logits - logits.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


@dataclass
class SyntheticWorkload:
    """One generated workload: prefill tensors plus chained decode draws."""

    config: WorkloadConfig
    keys: np.ndarray        # (L, H, T_p, d)
    values: np.ndarray      # (L, H, T_p, d_v)
    queries: np.ndarray     # (L, H, T_p, d) prefill-side queries
    radii: np.ndarray       # (L, H, T_p)
    angles: np.ndarray      # (L, H, T_p, d-1)
    segments: np.ndarray    # (T_p,) int8
    outliers: np.ndarray    # (L, H, T_p) bool
    topic: np.ndarray       # (L, H, d) unit directions
    lm: ToyLM

    @property
    def d_v(self) -> int:
        return self.values.shape[-1]

    @property
    def seed(self) -> int:
        return self.config.seed

    def decode_query(self, step: int, prev_token: int) -> np.ndarray:
        """Step-t queries (L, H, d); chained to the emitted trajectory."""
        cfg = self.config
        rng = np.random.default_rng(_tag(cfg.seed, "decode-q", step, prev_token))
        L, H, d = self.topic.shape
        g = rng.standard_normal((L, H, d)) / np.sqrt(d)
        dirs = self.topic + _QUERY_DIR_NOISE * g
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        gain = cfg.query_gain
        if cfg.critical_step is not None:
            lo = cfg.critical_step - cfg.critical_window
            if lo <= step <= cfg.critical_step:
                gain = gain * cfg.critical_gain
        norms = gain * np.sqrt(d) * np.abs(
            rng.normal(1.0, _QUERY_NORM_JITTER, size=(L, H, 1)))
        return dirs * norms

    def decode_kv(self, step: int, prev_token: int) -> tuple[np.ndarray, np.ndarray]:
        """New (recent-style) key and value states appended at step t."""
        cfg = self.config
        rng = np.random.default_rng(_tag(cfg.seed, "decode-kv", step, prev_token))
        L, H, d = self.topic.shape
        g = rng.standard_normal((L, H, d)) / np.sqrt(d)
        dirs = self.topic + _ALIGNED_DIR_NOISE * g
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        radii = np.abs(rng.normal(*_ALIGNED_RADIUS, size=(L, H, 1)))
        keys = dirs * radii
        vals = rng.standard_normal((L, H, self.d_v))
        return keys, vals


def generate(config: WorkloadConfig, seed: int | None = None) -> SyntheticWorkload:
    """Build a workload; bit-identical for identical (config, seed)."""
    if seed is not None and seed != config.seed:
        config = replace(config, seed=seed)
    cfg = config
    L, H, T, d = cfg.layers, cfg.heads, cfg.prefill, cfg.d
    d_v = d

    rng = np.random.default_rng(_tag(cfg.seed, "prefill"))
    topic = rng.standard_normal((L, H, d))
    topic /= np.linalg.norm(topic, axis=-1, keepdims=True)

    seg = cfg.segment_labels()
    is_prefix = (seg == SEG_PREFIX)[None, None, :, None]

    g = rng.standard_normal((L, H, T, d)) / np.sqrt(d)
    base = np.where(is_prefix, -topic[:, :, None, :] + _PREFIX_DIR_NOISE * g,
                    topic[:, :, None, :] + _ALIGNED_DIR_NOISE * g)
    base /= np.linalg.norm(base, axis=-1, keepdims=True)

    radii = np.where(is_prefix[..., 0],
                     np.abs(rng.normal(*_PREFIX_RADIUS, size=(L, H, T))),
                     np.abs(rng.normal(*_ALIGNED_RADIUS, size=(L, H, T))))
    outliers = np.zeros((L, H, T), dtype=bool)
    if cfg.outlier_frac > 0:
        outliers = rng.random((L, H, T)) < cfg.outlier_frac
        radii = np.where(outliers, radii * cfg.outlier_mult, radii)

    keys = base * radii[..., None]
    values = rng.standard_normal((L, H, T, d_v))

    gq = rng.standard_normal((L, H, T, d)) / np.sqrt(d)
    qdirs = topic[:, :, None, :] + _QUERY_DIR_NOISE * gq
    qdirs /= np.linalg.norm(qdirs, axis=-1, keepdims=True)
    qnorms = cfg.query_gain * np.sqrt(d) * np.abs(
        rng.normal(1.0, _QUERY_NORM_JITTER, size=(L, H, T, 1)))
    queries = qdirs * qnorms

    angles = angles_from_unit(base.reshape(-1, d)).reshape(L, H, T, d - 1)

    return SyntheticWorkload(
        config=cfg, keys=keys, values=values, queries=queries,
        radii=radii, angles=angles, segments=seg, outliers=outliers,
        topic=topic, lm=ToyLM.build(cfg, d_v),
    )


def quality_score(trace, dense_trace) -> float:
    """Dense-anchored fidelity score in [0, 100].

    Half the score is token agreement against the dense reference (length
    mismatch counts as disagreement), half is one minus the clamped mean
    relative L2 error of the per-step attention outputs over the
    overlapping steps. Dense against itself scores exactly 100.
    """
    toks_m, toks_d = trace.tokens, dense_trace.tokens
    n_m, n_d = len(toks_m), len(toks_d)
    if n_m == 0 or n_d == 0:
        return 0.0
    overlap = min(n_m, n_d)
    matches = int(np.sum(np.asarray(toks_m[:overlap]) == np.asarray(toks_d[:overlap])))
    agreement = matches / max(n_m, n_d)

    errs = []
    for om, od in zip(trace.outputs[:overlap], dense_trace.outputs[:overlap]):
        denom = float(np.linalg.norm(od)) + 1e-12
        errs.append(min(float(np.linalg.norm(om - od)) / denom, 1.0))
    mean_err = float(np.mean(errs)) if errs else 1.0
    return 100.0 * (0.5 * agreement + 0.5 * (1.0 - mean_err))
