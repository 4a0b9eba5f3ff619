"""
Main Application - kvsage
Command-line harness: simulate a policy, run the needle check, sweep budgets,
analyze traces and print budget accounting
"""

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import List, Optional

from accounting import cost_report, recommended_ranges
from config import (
    ANALYSIS_TOP_K,
    ANALYSIS_TOP_P,
    DEFAULT_BLOCK_SIZE,
    DEFAULT_BUDGET,
    DEFAULT_HEAD_DIM,
    DEFAULT_KV_HEADS,
    DEFAULT_LAYERS,
    DEFAULT_POOLING,
    DEFAULT_Q_HEADS,
    DEFAULT_SEED,
    DEFAULT_SEQ_LEN,
    DEFAULT_STEPS,
    LOG_LEVEL,
    NEEDLE_BUDGET,
    NEEDLE_POSITION,
    NEEDLE_SEQ_LEN,
    NEEDLE_STRENGTH,
    OUTPUT_DIR,
    ROPE_BASE,
    SWEEP_BUDGETS,
    SWEEP_POLICIES,
    SWEEP_SEEDS,
    SWEEP_SEQ_LEN,
    WORKERS,
    setup_logging,
)
from errors import ConfigError, KvSageError
from kv_cache import BudgetPlan, ModelConfig
from policies.base import PolicyKind
from policies.registry import get_policy_names, policy_registry
from rope import PositioningMode
from simulator import SweepSpec, run_analyze, run_needle, run_simulate, run_sweep
from trace_io import write_csv, write_json
from workload import Gaussian, Needle, SimSpec


# ---------------- Argument helpers ---------------- #

def _int_list(raw: str) -> List[int]:
    """'1,2,4' or '1-10'"""
    try:
        if "-" in raw and "," not in raw:
            lo, hi = raw.split("-", 1)
            return list(range(int(lo), int(hi) + 1))
        return [int(x) for x in raw.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected integers, got '{raw}'") from exc


def _float_list(raw: str) -> List[float]:
    try:
        return [float(x) for x in raw.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected numbers, got '{raw}'") from exc


def _policy_name(name: str, positioning: Optional[str]) -> str:
    """'streamllm' resolves through --positioning; other names must agree with it"""
    if name == "streamllm":
        mode = PositioningMode(positioning or PositioningMode.WINDOW_RELATIVE.value)
        return "streamllm_r" if mode is PositioningMode.WINDOW_RELATIVE else "streamllm_abs"
    if positioning is not None:
        kind = policy_registry.get_policy(name)["kind"]
        own = PositioningMode.WINDOW_RELATIVE if kind is PolicyKind.STREAMLLM_R else PositioningMode.ABSOLUTE
        if own is not PositioningMode(positioning):
            raise ConfigError(f"policy {name} uses {own.value} positioning, not {positioning}")
    return name


def _policy_names(raw: str, positioning: Optional[str]) -> List[str]:
    return [_policy_name(n.strip(), positioning) for n in raw.split(",") if n.strip()]


def _model(args) -> ModelConfig:
    return ModelConfig(args.layers, args.q_heads, args.kv_heads, args.head_dim, args.rope_base)


def _policy_config(name: str, args, model: ModelConfig):
    return policy_registry.build_config(
        name,
        model,
        budget=args.budget,
        sink=args.sink,
        topk=args.topk,
        recent=args.recent,
        block_size=args.block_size,
        pooling=args.pooling,
    )


def _banner(title: str, subtitle: str = "") -> None:
    print("=" * 70)
    print(title)
    if subtitle:
        print(subtitle)
    print("=" * 70)


# ---------------- Commands ---------------- #

def cmd_simulate(args) -> int:
    model = _model(args)
    name = _policy_name(args.policy, args.positioning)
    spec = SimSpec(
        model, _policy_config(name, args, model), args.seq_len, args.steps, args.seed, Gaussian()
    )
    _banner("SIMULATE", f"policy={spec.policy.label} N={spec.seq_len} T={spec.steps} seed={spec.seed}")

    report = run_simulate(spec, trace_out=args.trace_out)
    summary = report.summary()
    print(f"\n✓ evicted: {summary['evicted']}  retained entries per layer: {summary['retained_entries']}")
    print(report.per_step().to_string(index=False, float_format=lambda v: f"{v:.6g}"))
    print(f"\nmean L2 error     {summary['l2_error']:.6g}")
    print(f"mean cosine       {summary['cosine']:.6g}")
    print(f"retained mass     {summary['retained_mass']:.6g}")

    if args.out is not None:
        write_csv(report.rows, args.out / "simulate.csv")
        write_csv(report.per_step(), args.out / "simulate_steps.csv")
        write_json(report.to_dict(), args.out / "simulate.json")
        print(f"\n✓ results saved to {args.out}")
    if args.trace_out is not None:
        print(f"✓ trace saved to {args.trace_out}")
    return 0


def cmd_needle(args) -> int:
    model = _model(args)
    names = _policy_names(args.policy, args.positioning)
    configs = [_policy_config(n, args, model) for n in names]
    needle = Needle(args.needle_position, args.needle_strength)
    spec = SimSpec(model, configs[0], args.seq_len, args.steps, args.seed, needle)
    _banner("NEEDLE RETENTION", f"N={args.seq_len} needle at {needle.position + 1} strength {needle.strength}")

    table = run_needle(spec, configs)
    for row in table.to_dict(orient="records"):
        mark = "✓" if row["retained"] else "✗"
        print(f"{mark} {row['policy']:<16} B={row['budget']:<6} max L2 error {row['max_l2_error']:.3g}")

    if args.out is not None:
        write_csv(table, args.out / "needle.csv")
        print(f"\n✓ results saved to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    model = _model(args)
    names = _policy_names(args.policy, args.positioning)
    values = _int_list(args.values) if args.values else list(SWEEP_BUDGETS)
    if args.axis != "budget" and not args.values:
        raise ConfigError(f"--axis {args.axis} needs --values")
    base = SimSpec(
        model,
        policy_registry.build_config("full", model),
        args.seq_len,
        args.steps,
        DEFAULT_SEED,
        Gaussian(),
    )
    sweep = SweepSpec(
        base=base,
        values=tuple(values),
        policies=tuple(names),
        seeds=tuple(_int_list(args.seeds)),
        axis=args.axis,
        budget=args.budget,
        sink=args.sink,
        topk=args.topk,
        block_size=args.block_size,
        pooling=args.pooling,
    )
    _banner("SWEEP", f"axis={args.axis} values={values} policies={names} seeds={list(sweep.seeds)}")

    raw, table = run_sweep(sweep, workers=args.workers, progress=True)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.6g}"))

    out = args.out if args.out is not None else OUTPUT_DIR
    write_csv(table, out / f"sweep_{args.axis}.csv")
    write_csv(raw, out / f"sweep_{args.axis}_raw.csv")
    print(f"\n✓ results saved to {out}")
    return 0


def cmd_analyze(args) -> int:
    _banner("ANALYZE", str(args.trace))
    out = args.out if args.out is not None else OUTPUT_DIR / "analysis"
    report = run_analyze(args.trace, _int_list(args.k), _float_list(args.p), out, args.step)
    print(report.layer_table().to_string(index=False, float_format=lambda v: f"{v:.6g}"))
    for warning in report.warnings:
        print(f"⚠ {warning}")
    print(f"\n✓ results saved to {out}")
    return 0


def cmd_budget(args) -> int:
    model = _model(args)
    g = model.group_size
    plan = BudgetPlan.for_sage(args.budget, g, args.sink, args.topk, args.recent)
    _banner("BUDGET", f"B={plan.budget} G={g}: S={plan.sink} k={plan.topk} R={plan.recent}")

    ranges = recommended_ranges(plan.budget, g)
    for part, (lo, hi) in ranges.items():
        print(f"  recommended {part:<5} [{lo:g}, {hi:g}]")
    report = cost_report(model, args.seq_len, plan, steps=args.steps, block_size=args.block_size)
    print()
    print(report.to_table().to_string(index=False))

    if args.out is not None:
        write_json({"plan": dataclasses.asdict(plan), "ranges": ranges, "cost": report.to_dict()}, args.out / "budget.json")
        write_csv(report.to_table(), args.out / "budget.csv")
        print(f"\n✓ results saved to {args.out}")
    return 0


# ---------------- Parser ---------------- #

def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", type=int, default=DEFAULT_LAYERS)
    p.add_argument("--q-heads", type=int, default=DEFAULT_Q_HEADS)
    p.add_argument("--kv-heads", type=int, default=DEFAULT_KV_HEADS)
    p.add_argument("--head-dim", type=int, default=DEFAULT_HEAD_DIM)
    p.add_argument("--rope-base", type=float, default=ROPE_BASE)


def _add_plan_args(p: argparse.ArgumentParser, budget: Optional[int]) -> None:
    p.add_argument("--budget", type=int, default=budget, help="token budget B")
    p.add_argument("--sink", type=int, default=None, help="sink window S (default B/4)")
    p.add_argument("--topk", type=int, default=None, help="per-head top-k (default pow2 floor of B/2G)")
    p.add_argument("--recent", type=int, default=None, help="recent window R (default remainder)")
    p.add_argument("--block-size", type=int, default=DEFAULT_BLOCK_SIZE)
    p.add_argument("--pooling", choices=["minmax", "mean"], default=DEFAULT_POOLING)
    p.add_argument("--positioning", choices=[m.value for m in PositioningMode], default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvsage", description="Desk-scale KV-cache eviction engine")
    parser.add_argument("--log-level", default=LOG_LEVEL)
    sub = parser.add_subparsers(dest="command", required=True)
    policies = ", ".join(get_policy_names() + ["streamllm"])

    p = sub.add_parser("simulate", help="one policy vs full attention on a Gaussian workload")
    p.add_argument("--policy", default="sage", help=policies)
    _add_plan_args(p, DEFAULT_BUDGET)
    _add_model_args(p)
    p.add_argument("--seq-len", type=int, default=DEFAULT_SEQ_LEN)
    p.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--trace-out", type=Path, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("needle", help="needle retention check")
    p.add_argument("--policy", default=",".join(SWEEP_POLICIES), help=f"comma list of {policies}")
    _add_plan_args(p, NEEDLE_BUDGET)
    _add_model_args(p)
    p.add_argument("--seq-len", type=int, default=NEEDLE_SEQ_LEN)
    p.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--needle-position", type=int, default=NEEDLE_POSITION, help="0-based position")
    p.add_argument("--needle-strength", type=float, default=NEEDLE_STRENGTH)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_needle)

    p = sub.add_parser("sweep", help="retained mass and error over a parameter grid")
    p.add_argument("--policy", default=",".join(SWEEP_POLICIES), help=f"comma list of {policies}")
    p.add_argument("--axis", choices=["budget", "sink", "topk"], default="budget")
    p.add_argument("--values", default=None, help="comma list (default budgets 512..8192)")
    p.add_argument("--seeds", default=f"{SWEEP_SEEDS[0]}-{SWEEP_SEEDS[-1]}")
    _add_plan_args(p, None)
    _add_model_args(p)
    p.add_argument("--seq-len", type=int, default=SWEEP_SEQ_LEN)
    p.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    p.add_argument("--workers", type=int, default=WORKERS)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="sparsity metrics of a SAGT trace")
    p.add_argument("trace", type=Path)
    p.add_argument("--k", default=",".join(str(k) for k in ANALYSIS_TOP_K))
    p.add_argument("--p", default=",".join(str(v) for v in ANALYSIS_TOP_P))
    p.add_argument("--step", type=int, default=-1)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("budget", help="plan split, memory and speedup accounting")
    _add_plan_args(p, 8192)
    _add_model_args(p)
    p.add_argument("--seq-len", type=int, default=131072)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_budget)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        setup_logging(args.log_level)
        return args.func(args)
    except KvSageError as exc:
        print(f"✗ {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
