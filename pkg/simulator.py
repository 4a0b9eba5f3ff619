"""
Simulator
Runs policies against the full-attention reference on synthetic workloads:
single simulations, the needle retention check, budget / sink / top-k sweeps,
and analysis of recorded traces.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from analysis import MetricsReport, analyze_trace
from attention import AttentionStep, PrefillResult, QkvSequence, build_full_cache, prefill_full
from config import DEFAULT_BLOCK_SIZE, DEFAULT_POOLING, SWEEP_SEEDS, WORKERS
from errors import InvalidPlan
from kv_cache import ModelConfig
from policies.base import EvictionPolicy, PolicyConfig, PolicyKind, PolicyState
from policies.full import FullPolicy
from policies.registry import policy_registry
from trace_io import AttentionTrace, read_sidecar, read_trace, write_csv, write_json, write_trace
from workload import Needle, SimSpec, generate

logger = logging.getLogger(__name__)

STEP_COLUMNS = ["step", "layer", "head", "visible", "l2_error", "cosine", "retained_mass"]


# ============================================================================
# Reference
# ============================================================================

@dataclass(eq=False)
class ReferenceRun:
    """
    Full-attention decode of one sequence.

    steps[0] is the compression step (the last prompt token attending the prompt);
    steps[t] for t >= 1 is decode token N + t - 1.
    """

    model: ModelConfig
    seq: QkvSequence
    seq_len: int
    prefill: PrefillResult
    steps: List[AttentionStep]

    @property
    def decode_steps(self) -> int:
        return len(self.steps) - 1


def _decode(policy: EvictionPolicy, state: PolicyState, seq: QkvSequence, n: int, steps: int):
    """Yield (step, AttentionStep) for the compression step and every decode step"""
    model = policy.model
    yield 0, policy.attend(state, seq.queries_at(n - 1))
    for t in range(1, steps + 1):
        i = n + t - 1
        policy.push(state, seq.token_grid(i, model, pre_rope=policy.stores_pre_rope))
        yield t, policy.attend(state, seq.queries_at(i))


def build_reference(spec: SimSpec, seq: Optional[QkvSequence] = None) -> ReferenceRun:
    seq = generate(spec) if seq is None else seq
    n = spec.seq_len
    prefill = prefill_full(seq.prefix(n), spec.model)
    policy = FullPolicy(PolicyConfig(PolicyKind.FULL), spec.model)
    state = policy.compress(prefill)
    steps = [step for _, step in _decode(policy, state, seq, n, spec.steps)]
    return ReferenceRun(spec.model, seq, n, prefill, steps)


def prefill_for(policy: EvictionPolicy, ref: ReferenceRun) -> PrefillResult:
    """Reference prefill, re-stored before rotation when the policy needs it"""
    if not policy.stores_pre_rope:
        return ref.prefill
    cache = build_full_cache(ref.seq.prefix(ref.seq_len), ref.model, pre_rope=True)
    return PrefillResult(cache, ref.prefill.last_row_scores, ref.prefill.outputs)


# ============================================================================
# Evaluation
# ============================================================================

def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / denom) if denom > 0 else 1.0


def compare_step(step: int, got: AttentionStep, ref: AttentionStep) -> List[Dict[str, Any]]:
    rows = []
    for layer, p_row in enumerate(got.positions):
        for head, positions in enumerate(p_row):
            out, want = got.outputs[layer, head], ref.outputs[layer, head]
            ref_scores = ref.scores[layer][head]
            rows.append(
                {
                    "step": step,
                    "layer": layer,
                    "head": head,
                    "visible": len(positions),
                    "l2_error": float(np.linalg.norm(out - want)),
                    "cosine": _cosine(out, want),
                    "retained_mass": float(ref_scores[positions].sum()),
                }
            )
    return rows


@dataclass
class SimulationReport:
    spec: SimSpec
    rows: pd.DataFrame
    retained_entries: List[int]
    evicted: bool
    steps: List[AttentionStep] = field(default_factory=list, repr=False)
    trace: Optional[AttentionTrace] = None

    def per_step(self) -> pd.DataFrame:
        grouped = self.rows.groupby("step", sort=True)
        return pd.DataFrame(
            {
                "l2_error": grouped["l2_error"].mean(),
                "max_l2_error": grouped["l2_error"].max(),
                "cosine": grouped["cosine"].mean(),
                "retained_mass": grouped["retained_mass"].mean(),
            }
        ).reset_index()

    def summary(self) -> Dict[str, Any]:
        first = self.rows[self.rows["step"] == 0]
        return {
            "policy": self.spec.policy.label,
            "evicted": self.evicted,
            "l2_error": float(self.rows["l2_error"].mean()),
            "max_l2_error": float(self.rows["l2_error"].max()),
            "cosine": float(self.rows["cosine"].mean()),
            "retained_mass": float(self.rows["retained_mass"].mean()),
            "compression_mass": float(first["retained_mass"].mean()),
            "retained_entries": list(self.retained_entries),
        }

    def to_dict(self) -> Dict[str, Any]:
        return {"spec": self.spec.to_dict(), "summary": self.summary()}


def evaluate_policy(spec: SimSpec, ref: ReferenceRun, keep_steps: bool = False) -> SimulationReport:
    """Compress with the SimSpec's policy and decode against the shared reference"""
    policy = policy_registry.create(spec.policy, spec.model)
    state = policy.compress(prefill_for(policy, ref))
    retained = [policy.retained_entries(state, layer) for layer in range(spec.model.layers)]

    rows: List[Dict[str, Any]] = []
    kept: List[AttentionStep] = []
    for t, step in _decode(policy, state, ref.seq, ref.seq_len, ref.decode_steps):
        rows.extend(compare_step(t, step, ref.steps[t]))
        if keep_steps:
            kept.append(step)

    frame = pd.DataFrame(rows, columns=STEP_COLUMNS)
    logger.info(
        "%s: mean L2 %.3g, retained mass %.4f", spec.policy.label,
        frame["l2_error"].mean(), frame["retained_mass"].mean(),
    )
    return SimulationReport(spec, frame, retained, state.evicted, kept)


def reference_trace(ref: ReferenceRun) -> AttentionTrace:
    """Reference score rows of every step, zero-padded to N + T"""
    rows = [step.scores for step in ref.steps]
    width = ref.seq_len + ref.decode_steps
    return AttentionTrace.from_rows(rows, ref.model.layers, ref.model.q_heads, width=width)


def run_simulate(spec: SimSpec, trace_out: Optional[Path] = None, keep_steps: bool = False) -> SimulationReport:
    """
    Policy vs full attention on one seeded sequence

    Args:
        spec: model, policy, workload and sizes
        trace_out: optional SAGT path for the reference score rows (with .meta.json sidecar)
        keep_steps: also return the policy's AttentionSteps

    Returns:
        SimulationReport with per-(step, layer, head) error, cosine and retained mass
    """
    ref = build_reference(spec)
    report = evaluate_policy(spec, ref, keep_steps)
    if trace_out is not None:
        report.trace = reference_trace(ref)
        write_trace(report.trace, trace_out, metadata=spec.to_dict())
    return report


# ============================================================================
# Needle
# ============================================================================

def run_needle(spec: SimSpec, policies: Sequence[PolicyConfig]) -> pd.DataFrame:
    """
    Does each policy keep the needle, and how far does its output drift?

    Args:
        spec: SimSpec with a Needle workload (its own policy is ignored)
        policies: configs to compare on the same instance

    Returns:
        One row per policy: retained at compression / after decode, L2 error, retained mass
    """
    if not isinstance(spec.workload, Needle):
        raise InvalidPlan("run_needle needs a Needle workload")
    needle = spec.workload.position
    ref = build_reference(spec)

    rows = []
    for config in policies:
        report = evaluate_policy(spec.with_policy(config), ref, keep_steps=True)
        first, last = report.steps[0], report.steps[-1]
        rows.append(
            {
                "policy": config.label,
                "budget": config.plan.budget if config.plan else spec.seq_len,
                "retained": all(needle in p for row in first.positions for p in row),
                "retained_final": all(needle in p for row in last.positions for p in row),
                "max_l2_error": float(report.rows["l2_error"].max()),
                "mean_l2_error": float(report.rows["l2_error"].mean()),
                "retained_mass": float(report.rows["retained_mass"].mean()),
            }
        )
        logger.info("needle %s: retained=%s", config.label, rows[-1]["retained"])
    return pd.DataFrame(rows)


# ============================================================================
# Sweep
# ============================================================================

@dataclass(frozen=True)
class SweepSpec:
    """
    Grid of (axis value, policy, seed) cells sharing one reference per seed.

    axis "budget" varies B with the default split; "sink" varies S at fixed B and k;
    "topk" varies k at fixed B and S (R takes the remainder).
    """

    base: SimSpec
    values: Tuple[int, ...]
    policies: Tuple[str, ...]
    seeds: Tuple[int, ...] = tuple(SWEEP_SEEDS)
    axis: str = "budget"
    budget: Optional[int] = None
    sink: Optional[int] = None
    topk: Optional[int] = None
    block_size: int = DEFAULT_BLOCK_SIZE
    pooling: str = DEFAULT_POOLING

    def __post_init__(self):
        if self.axis not in ("budget", "sink", "topk"):
            raise InvalidPlan(f"unknown sweep axis '{self.axis}'")
        if self.axis != "budget" and self.budget is None:
            raise InvalidPlan(f"sweeping {self.axis} needs a fixed budget")
        if list(self.values) != sorted(self.values):
            raise InvalidPlan(f"sweep values must be ascending, got {list(self.values)}")

    def cell_config(self, name: str, value: int) -> PolicyConfig:
        model = self.base.model
        kind = policy_registry.get_policy(name)["kind"]
        streaming = kind in (PolicyKind.STREAMLLM_R, PolicyKind.STREAMLLM_ABS)
        params: Dict[str, Any] = dict(block_size=self.block_size, pooling=self.pooling)
        if self.axis == "budget":
            params["budget"] = value
        else:
            params["budget"] = self.budget
            params["sink"] = value if self.axis == "sink" else self.sink
            if not streaming:
                params["topk"] = value if self.axis == "topk" else self.topk
                if params["topk"] is None:
                    # hold k at its default for this budget while S moves
                    default = policy_registry.build_config("sage", model, budget=self.budget)
                    params["topk"] = default.plan.topk
        return policy_registry.build_config(name, model, **params)


def _sweep_cell(sweep: SweepSpec, ref: ReferenceRun, seed: int, name: str, value: int) -> Optional[Dict[str, Any]]:
    try:
        config = sweep.cell_config(name, value)
    except InvalidPlan as exc:
        logger.warning("skipping %s at %s=%s: %s", name, sweep.axis, value, exc)
        return None
    spec = sweep.base.with_seed(seed).with_policy(config)
    summary = evaluate_policy(spec, ref).summary()
    plan = config.plan
    if plan is None:
        # full keeps every entry; only the budget column is meaningful
        budget = value if sweep.axis == "budget" else sweep.budget
        split = {"sink": None, "topk": None, "recent": None}
    else:
        budget = plan.budget
        split = {"sink": plan.sink, "topk": plan.topk, "recent": plan.recent}
    return {
        "axis": sweep.axis,
        "value": value,
        "policy": name,
        "seed": seed,
        "budget": budget,
        **split,
        "retained_mass": summary["retained_mass"],
        "compression_mass": summary["compression_mass"],
        "l2_error": summary["l2_error"],
        "max_l2_error": summary["max_l2_error"],
        "cosine": summary["cosine"],
    }


SWEEP_KEYS = ["axis", "value", "policy", "budget", "sink", "topk", "recent"]
SWEEP_METRICS = ["retained_mass", "compression_mass", "l2_error", "max_l2_error", "cosine"]


def run_sweep(sweep: SweepSpec, workers: int = WORKERS, progress: bool = False) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Evaluate every (value, policy, seed) cell

    Returns:
        (per-seed rows, per-(value, policy) means over seeds), both sorted
    """
    workers = max(1, workers)
    seeds = list(sweep.seeds)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        refs = dict(zip(seeds, pool.map(lambda s: build_reference(sweep.base.with_seed(s)), seeds)))

        futures = [
            pool.submit(_sweep_cell, sweep, refs[seed], seed, name, value)
            for seed in seeds
            for name in sweep.policies
            for value in sweep.values
        ]
        results = []
        for future in tqdm(as_completed(futures), total=len(futures), desc="sweep", disable=not progress):
            row = future.result()
            if row is not None:
                results.append(row)

    raw = pd.DataFrame(results, columns=SWEEP_KEYS + ["seed"] + SWEEP_METRICS)
    raw = raw.sort_values(["value", "policy", "seed"], kind="mergesort").reset_index(drop=True)
    grouped = raw.groupby(SWEEP_KEYS, sort=True, dropna=False)
    table = grouped[SWEEP_METRICS].mean()
    table.insert(0, "seeds", grouped.size())
    table = table.reset_index().sort_values(["value", "policy"], kind="mergesort").reset_index(drop=True)
    logger.info("sweep done: %d cells, %d aggregated rows", len(raw), len(table))
    return raw, table


# ============================================================================
# Analysis
# ============================================================================

def run_analyze(
    trace_path: Path,
    k_list: Sequence[int],
    p_list: Sequence[float],
    out_dir: Optional[Path] = None,
    step: int = -1,
) -> MetricsReport:
    """Metrics for a SAGT trace; with out_dir, writes metrics.json and one CSV per table"""
    trace = read_trace(trace_path)
    report = analyze_trace(trace, k_list, p_list, step)
    if out_dir is not None:
        out_dir = Path(out_dir)
        payload = report.to_dict()
        meta = read_sidecar(trace_path)
        if meta is not None:
            payload["trace_metadata"] = meta
        write_json(payload, out_dir / "metrics.json")
        write_csv(report.heatmap_table(), out_dir / "heatmap.csv")
        write_csv(report.boxplot_table(), out_dir / "boxplot.csv")
        write_csv(report.pie_table(), out_dir / "pie.csv")
        write_csv(report.layer_table(), out_dir / "layers.csv")
        write_csv(report.frequency_table(), out_dir / "frequency.csv")
        write_csv(report.overlap_table(), out_dir / "overlap.csv")
    return report
