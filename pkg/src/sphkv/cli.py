"""Command-line entry point: calibrate, rollout, sweep, verify.

All data goes to files under --out; stdout carries progress lines only.
Exit codes: 0 success (including an empty retained set, which warns),
1 verification mismatch or bad usage, 3 invariant failure during a sweep.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np

from . import config as config_mod
from .codec import SphericalKey
from .controller import (InfeasibleProtectionError, compute_features,
                         export_assignment_csv, protected_mask, score_states)
from .decode import decode_rollout
from .frontier import (VARIANTS, iso_quality_filter, pareto_envelope,
                       read_frontier_csv, representative_point, run_sweep,
                       variant_assignment, _append_policy, _CODED_PATH,
                       dense_key_bits, write_frontier_csv, write_summary_csv)
from .store import DenseStore, TrafficMeter, pack_pages_arrays
from .workload import generate


def _outdir(args, cfg) -> str:
    out = args.out or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    return out


def _load_config(args) -> config_mod.RunConfig:
    if args.config:
        cfg = config_mod.load(args.config)
    else:
        cfg = config_mod.RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, workload=replace(cfg.workload, seed=args.seed))
    if getattr(args, "workers", None):
        cfg = replace(cfg, sweep=replace(cfg.sweep, workers=args.workers))
    return cfg


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    out = _outdir(args, cfg)
    wl = generate(cfg.workload)
    rng = np.random.default_rng(cfg.workload.seed)
    L, H, T, d = wl.keys.shape
    n = min(cfg.calibration_sample, L * H * T)
    idx = rng.choice(L * H * T, size=n, replace=False)
    flat_r = wl.radii.reshape(-1)
    flat_a = wl.angles.reshape(-1, d - 1)
    sample = [SphericalKey(float(flat_r[i]), flat_a[i]) for i in idx]
    cfg.tiers.calibrate(sample, cfg.workload.seed)
    path = os.path.join(out, "calibration.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tier", "eps_theta", "eps_r"])
        for t in cfg.tiers.non_drop:
            w.writerow([t.id, f"{cfg.tiers.eps_theta[t.id]:.12g}",
                        f"{cfg.tiers.eps_r[t.id]:.12g}"])
    print(f"calibration written to {path}")
    return 0


def _calibrated_tiers(cfg):
    wl = generate(cfg.workload)
    rng = np.random.default_rng(cfg.workload.seed)
    L, H, T, d = wl.keys.shape
    n = min(cfg.calibration_sample, L * H * T)
    idx = rng.choice(L * H * T, size=n, replace=False)
    sample = [SphericalKey(float(wl.radii.reshape(-1)[i]),
                           wl.angles.reshape(-1, d - 1)[i]) for i in idx]
    cfg.tiers.calibrate(sample, cfg.workload.seed)
    return cfg.tiers


def cmd_rollout(args) -> int:
    cfg = _load_config(args)
    if args.variant not in VARIANTS:
        print(f"error: unknown variant {args.variant!r}; choose from {VARIANTS}",
              file=sys.stderr)
        return 1
    out = _outdir(args, cfg)
    wl_cfg = cfg.workload
    wl = generate(wl_cfg)
    tiers = _calibrated_tiers(cfg)
    gate_cfg = cfg.gate.build()

    if args.variant == "Dense":
        store = DenseStore(wl_cfg.layers, wl_cfg.heads, wl_cfg.d, wl.d_v,
                           wl_cfg.page_size, TrafficMeter())
        store.bulk_load(wl.keys, wl.values)
        trace = decode_rollout(wl, store, path="dense", steps=wl_cfg.decode_steps,
                               warmup=cfg.sweep.warmup, track_drift=False)
    else:
        feat = compute_features(wl, cfg.controller)
        prot = protected_mask(wl, cfg.controller)
        scores = score_states(wl.radii, feat, tiers, cfg.controller.lam, prot, wl_cfg.d)
        budget = int(cfg.rollout_budget_frac * dense_key_bits(wl_cfg))
        try:
            assignment = variant_assignment(args.variant, scores, prot, budget,
                                            tiers, wl_cfg.d,
                                            allocator=cfg.controller.allocator)
        except InfeasibleProtectionError as exc:
            print(f"error: infeasible protection set: {exc}", file=sys.stderr)
            return 1
        store = pack_pages_arrays(assignment, wl.radii, wl.angles, wl.values,
                                  tiers, wl_cfg.page_size, TrafficMeter())
        export_assignment_csv(assignment, scores, os.path.join(out, "assignment.csv"))
        trace = decode_rollout(
            wl, store, path=_CODED_PATH[args.variant], steps=wl_cfg.decode_steps,
            warmup=cfg.sweep.warmup, refresh_cadence=cfg.sweep.refresh_cadence,
            feat=feat, tiers=tiers, lam=cfg.controller.lam,
            append_tier=_append_policy(args.variant, assignment, tiers),
            gate_cfg=gate_cfg, track_drift=True)

    trace.to_csv(os.path.join(out, "trace.csv"))
    with open(os.path.join(out, "byte_breakdown.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["key", "value"])
        for k, v in trace.summary().items():
            w.writerow([k, v])
        br = store.resident_breakdown()
        for name in ("payload_bytes", "header_bytes", "ptr_bytes", "tag_bytes",
                     "prot_bytes", "frag_bytes"):
            w.writerow([name, getattr(br, name)])
        w.writerow(["eta_meta", f"{br.eta_meta:.9g}"])
    if trace.gate_log:
        with open(os.path.join(out, "gate_log.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "state", "danger", "mode_before", "mode_after",
                        "action", "inv_margin", "q_norm"])
            for row in trace.gate_log:
                w.writerow([row["step"], f"{row['layer']}:{row['head']}",
                            f"{row['danger']:.9g}", row["mode_before"],
                            row["mode_after"], row["action"],
                            f"{row['inv_margin']:.9g}", f"{row['q_norm']:.9g}"])
    print(f"rollout {args.variant}: {trace.length} tokens, "
          f"s={trace.s if trace.s else 'n/a'}, b_kv={trace.b_kv:.1f}, "
          f"b_hbm={trace.b_hbm if trace.b_hbm else 'n/a'}; files in {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = _outdir(args, cfg)
    tiers = _calibrated_tiers(cfg)
    try:
        result = run_sweep(cfg.workload, tiers, cfg.controller, cfg.sweep,
                           gate_cfg=cfg.gate.build(),
                           progress=lambda msg: print(msg, flush=True))
    except AssertionError as exc:
        print(f"invariant failure during sweep: {exc}", file=sys.stderr)
        return 3
    write_frontier_csv(result, os.path.join(out, "frontier.csv"),
                       context=cfg.workload.prefill)
    write_summary_csv(result, os.path.join(out, "summary.csv"), cfg.sweep.beta)
    retained = [p for p in result.points if p.retained and p.variant != "Dense"]
    if not retained:
        print("warning: no retained non-dense points; gamma values absent")
    print(f"sweep complete: {len(result.points)} points, "
          f"Q*_dense={result.q_star:.3f}; files in {out}")
    return 0


def cmd_verify(args) -> int:
    cfg = _load_config(args)
    out = _outdir(args, cfg)
    path = args.frontier or os.path.join(out, "frontier.csv")
    points = read_frontier_csv(path)
    dense = [p for p in points if p.variant == "Dense" and p.q is not None]
    if not dense:
        print("error: frontier has no dense reference rows", file=sys.stderr)
        return 1
    q_star = max(p.q for p in dense)
    measurable = [p for p in points if p.q is not None]
    recomputed_retained = set(id(p) for p in
                              iso_quality_filter(measurable, q_star, cfg.sweep.delta))
    mismatches = 0
    for p in points:
        if p.q is None:
            continue
        if (id(p) in recomputed_retained) != p.retained:
            mismatches += 1
    variants = sorted({p.variant for p in points})
    for v in variants:
        retained = [p for p in points if p.variant == v and p.retained]
        env = set(id(p) for p in pareto_envelope(retained))
        for p in points:
            if p.variant == v and (id(p) in env) != p.on_envelope:
                mismatches += 1
    joint_env = [p for p in points if p.variant == "SphKV-Joint" and p.on_envelope]
    if joint_env:
        star = representative_point(joint_env)
        for p in joint_env:
            if (p is star) != p.is_star:
                mismatches += 1
    if mismatches:
        print(f"verify FAILED: {mismatches} flag mismatches in {path}")
        return 1
    print(f"verify OK: {path} reproduces its own retained/envelope/star flags")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sphkv",
        description="Spherical KV pipeline: calibration, rollouts, frontier sweeps.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file")
    common.add_argument("--seed", type=int, default=None, help="workload seed override")
    common.add_argument("--out", default=None, help="output directory")

    sub.add_parser("calibrate", parents=[common],
                   help="write per-tier distortion constants")
    p_roll = sub.add_parser("rollout", parents=[common], help="single decode rollout")
    p_roll.add_argument("--variant", required=True,
                        help=f"one of {', '.join(VARIANTS)}")
    p_sweep = sub.add_parser("sweep", parents=[common],
                             help="variant x budget frontier sweep")
    p_sweep.add_argument("--workers", type=int, default=None)
    p_ver = sub.add_parser("verify", parents=[common],
                           help="recheck frontier CSV envelope flags")
    p_ver.add_argument("--frontier", default=None, help="frontier CSV path")

    args = parser.parse_args(argv)
    handlers = {"calibrate": cmd_calibrate, "rollout": cmd_rollout,
                "sweep": cmd_sweep, "verify": cmd_verify}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
