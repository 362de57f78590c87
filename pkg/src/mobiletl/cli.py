"""Command-line front door: profile, compare, train, gradcheck, audit,
verify-bound.

Exit codes: 0 success, 1 validation error, 2 assertion/audit failure.
When --out is given, figures are rendered next to the delimited output
(same stem, .png) unless --no-plot is passed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import plots, report as rpt
from .gradcheck import run_suite
from .layers import ActBackwardMode
from .model import FormatError, SpecError, bundled_spec_path, load_spec
from .policy import PRESETS, PolicyError, TrainPolicy, load_policy
from .profiler import audit_against_tape, compare_strategies, profile_model
from .theory import twin_divergence
from .trainer import (
    OptimizerCfg,
    load_dataset,
    synthetic_blobs,
    train,
)
from .model import build_model
from .policy import apply_policy


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mobiletl",
        description="IRB training-cost profiler, trainer and bound verifier")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, policy_many=False):
        sp.add_argument("--spec", help="model spec JSON (or bundled name)")
        sp.add_argument("--policy", action="append" if policy_many else None,
                        default=None, help="policy JSON path or preset name")
        sp.add_argument("--out", help="output file path")
        sp.add_argument("--format", choices=("csv", "json", "table"),
                        default="table")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--no-plot", action="store_true",
                        help="skip figure rendering next to --out")
        return sp

    common(sub.add_parser("profile", help="per-layer FLOPs/memory report"))
    common(sub.add_parser("compare", help="one summary row per policy"),
           policy_many=True)
    sp = common(sub.add_parser("train", help="desk-scale training run"))
    sp.add_argument("--dataset", help="TLDS dataset file")
    sp.add_argument("--synthetic", help="n,classes,seed synthetic blob set")
    sp.add_argument("--steps", type=int, default=200)
    sp.add_argument("--epochs", type=int, default=0,
                    help="overrides --steps when > 0")
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--batch", type=int, default=8)
    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--instances", type=int, default=20)
    common(sub.add_parser("audit", help="tape-vs-profiler byte audit"))
    sp = common(sub.add_parser("verify-bound",
                               help="twin-training divergence vs bound"))
    sp.add_argument("--synthetic", default="64,2,7")
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--lr", type=float, default=1e-3)
    return p


def _resolve_spec(arg):
    if not arg:
        raise SpecError("--spec is required")
    if not os.path.exists(arg):
        bundled = bundled_spec_path(arg)
        if os.path.exists(bundled):
            return load_spec(bundled)
        raise SpecError(f"spec file {arg!r} not found")
    return load_spec(arg)


def _resolve_policy(arg) -> TrainPolicy:
    if arg is None:
        return TrainPolicy()
    if os.path.exists(arg):
        return load_policy(arg)
    if arg in PRESETS:
        return TrainPolicy(preset=arg)
    if arg.startswith("mobiletl_") or arg.startswith("ft_"):
        # allow e.g. mobiletl_kblks:3
        name, _, k = arg.partition(":")
        if name in PRESETS:
            return TrainPolicy(preset=name, k_blocks=int(k or 0))
    raise PolicyError(f"policy {arg!r} is neither a file nor a preset")


def _emit(text: str, out, fmt: str, plot_fn=None, no_plot=False) -> None:
    if out:
        rpt.atomic_write(out, text)
        if plot_fn is not None and not no_plot:
            stem, _ = os.path.splitext(out)
            plot_fn(stem + ".png")
    else:
        sys.stdout.write(text)


def _synthetic_from_flag(flag: str):
    try:
        n, classes, seed = (int(v) for v in flag.split(","))
    except ValueError:
        raise ValueError("--synthetic expects n,classes,seed")
    return synthetic_blobs(n, classes, seed)


def cmd_profile(args) -> int:
    spec = _resolve_spec(args.spec)
    policy = _resolve_policy(args.policy)
    rep = profile_model(spec, policy)
    text = {"csv": rpt.profile_csv, "json": rpt.profile_json,
            "table": rpt.profile_table}[args.format](rep)
    _emit(text, args.out, args.format,
          plot_fn=lambda p: plots.plot_profile(rep, p), no_plot=args.no_plot)
    return 0


def cmd_compare(args) -> int:
    spec = _resolve_spec(args.spec)
    pol_args = args.policy or ["ft_all"]
    policies = [_resolve_policy(a) for a in pol_args]
    rows = compare_strategies(spec, policies, names=pol_args)
    text = {"csv": rpt.compare_csv, "json": rpt.compare_json,
            "table": rpt.compare_table}[args.format](rows)
    _emit(text, args.out, args.format,
          plot_fn=lambda p: plots.plot_compare(rows, p), no_plot=args.no_plot)
    return 0


def cmd_audit(args) -> int:
    spec = _resolve_spec(args.spec)
    policy = _resolve_policy(args.policy)
    res = audit_against_tape(spec, policy, seed=args.seed)
    doc = {"ok": res.ok, "predicted_total": res.predicted_total,
           "tape_total": res.tape_total,
           "mismatches": [{"layer_id": m[0], "predicted": m[1], "actual": m[2]}
                          for m in res.mismatches]}
    text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    _emit(text, args.out, args.format)
    if not res.ok:
        for layer_id, pred, act in res.mismatches:
            print(f"audit mismatch {layer_id}: predicted {pred} != tape {act}",
                  file=sys.stderr)
        return 2
    return 0


def cmd_train(args) -> int:
    spec = _resolve_spec(args.spec)
    policy = _resolve_policy(args.policy)
    if args.dataset:
        ds = load_dataset(args.dataset)
    elif args.synthetic:
        ds = _synthetic_from_flag(args.synthetic)
    else:
        raise ValueError("train needs --dataset or --synthetic")
    model = apply_policy(build_model(spec, args.seed), policy)
    steps = args.steps
    if args.epochs:
        steps = args.epochs * max(ds.count // args.batch, 1)
    cfg = OptimizerCfg(kind="adam", lr=args.lr, total_steps=steps)
    reportobj = train(model, ds, cfg, policy, seed=args.seed, steps=steps,
                      batch_size=args.batch)
    doc = {"final_accuracy": round(reportobj.final_accuracy, 6),
           "steps": reportobj.steps,
           "final_loss": float(f"{reportobj.step_losses[-1]:.6g}"),
           "peak_tape_bytes": reportobj.peak_tape_bytes,
           "predicted_tape_bytes": reportobj.predicted_tape_bytes,
           "wall_time_s": round(reportobj.wall_time_s, 3)}
    text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    _emit(text, args.out, args.format,
          plot_fn=lambda p: plots.plot_training(reportobj, p),
          no_plot=args.no_plot)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed, args.instances)
    ok = True
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name:<16} max_rel_err={r.max_rel_err:.3e} "
              f"({r.instances} instances) {status}")
        ok = ok and r.passed
    return 0 if ok else 2


def cmd_verify_bound(args) -> int:
    spec = _resolve_spec(args.spec)
    ds = _synthetic_from_flag(args.synthetic)
    k = len(spec.blocks)
    exact = TrainPolicy(preset="ft_kblks", k_blocks=k)
    approx = TrainPolicy(preset="ft_kblks", k_blocks=k,
                         act_backward=ActBackwardMode.ApproxSigned)
    rep = twin_divergence(spec, exact, approx, ds, steps=args.steps,
                          seed=args.seed, lr=args.lr)
    doc = {"per_step_distance": [float(f"{d:.6g}")
                                 for d in rep.per_step_distance],
           "final_output_distance": float(f"{rep.final_output_distance:.6g}"),
           "measured_G": float(f"{rep.measured_G:.6g}"),
           "estimated_M": float(f"{rep.estimated_M:.6g}"),
           "N": rep.N, "L": rep.L,
           "bound": float(f"{rep.bound:.6g}"),
           "pass": bool(rep.passed)}
    text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    _emit(text, args.out, args.format,
          plot_fn=lambda p: plots.plot_divergence(rep, p), no_plot=args.no_plot)
    return 0 if rep.passed else 2


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handlers = {"profile": cmd_profile, "compare": cmd_compare,
                "train": cmd_train, "gradcheck": cmd_gradcheck,
                "audit": cmd_audit, "verify-bound": cmd_verify_bound}
    try:
        return handlers[args.verb](args)
    except (SpecError, PolicyError, FormatError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
