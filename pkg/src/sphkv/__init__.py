"""Spherical KV: angle-domain paged KV cache with rate-distortion
retention and an iso-quality frontier evaluation harness."""

from .codec import (AngleCode, RadiusCode, SphericalKey, TierSpec, TierTable,
                    cos_from_angles, cos_from_codes, decode_key, encode_key,
                    from_spherical, rate_bits, to_spherical)
from .controller import (ControllerConfig, ControllerFeatures, StateId,
                         TierAssignment, allocate_greedy, compute_features,
                         downtier_before_drop, score_and_best_tier)
from .decode import (DecodeTrace, angle_logits, decode_rollout, dense_logits,
                     logit_drift_bound, recon_logits, softmax_drift_check,
                     softmax_mix)
from .frontier import (OperatingPoint, SweepConfig, gamma_summaries,
                       iso_quality_filter, pareto_envelope, representative_point,
                       run_sweep, synergy_gap)
from .gate import GateConfig, GateState, danger_score, gate_step, margin
from .store import (DenseStore, PagedStore, ResidentBreakdown, TrafficMeter,
                    dense_mem_estimate, pack_pages_arrays)
from .workload import SyntheticWorkload, ToyLM, WorkloadConfig, generate, quality_score

__version__ = "0.1.0"
