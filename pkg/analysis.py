"""
Attention Sparsity Analysis
Top-k score mass, top-p index sets, within/cross-layer Jaccard and coverage,
token index frequency and adjacent-step overlap over attention traces.

Index sets hold 0-based token positions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import PIE_EDGES, PIE_LABELS
from errors import EmptyInput, InvalidSelection, KTooLarge
from policies.selection import top_k_indices
from trace_io import AttentionTrace

logger = logging.getLogger(__name__)


class IndexKind(str, Enum):
    TOP_K = "top_k"
    TOP_P = "top_p"


@dataclass(frozen=True)
class IndexSet:
    """Token positions selected for one (layer, head) by top-k or top-p"""

    layer: int
    head: int
    kind: IndexKind
    param: float
    indices: frozenset

    def __len__(self) -> int:
        return len(self.indices)


# ============================================================================
# Per-row selections
# ============================================================================

def top_k_sum(scores, k: int) -> float:
    """Mass of the k largest scores"""
    arr = np.asarray(scores, dtype=np.float64).ravel()
    if k > arr.size or k < 0:
        raise KTooLarge(f"k={k} outside [0, {arr.size}]")
    if k == 0:
        return 0.0
    return float(np.sort(arr)[::-1][:k].sum())


def top_k_index_set(scores, k: int, layer: int = 0, head: int = 0) -> IndexSet:
    idx = top_k_indices(scores, min(k, np.asarray(scores).size))
    return IndexSet(layer, head, IndexKind.TOP_K, k, frozenset(int(i) for i in idx))


def top_p_indices(scores, p: float, layer: int = 0, head: int = 0) -> IndexSet:
    """
    Smallest descending-score prefix whose mass reaches p

    Ties in score go to the lower index. p >= 1 returns every position with nonzero score.
    """
    if not 0 < p <= 1:
        raise InvalidSelection(f"p must lie in (0, 1], got {p}")
    arr = np.asarray(scores, dtype=np.float64).ravel()
    if arr.size == 0:
        raise EmptyInput("top-p of an empty score vector")
    if p >= 1:
        chosen = np.flatnonzero(arr > 0)
    else:
        order = np.argsort(-arr, kind="stable")
        mass = np.cumsum(arr[order])
        # float slack so 0.5 + 0.3 counts as reaching 0.8
        count = int(np.searchsorted(mass, p - 1e-12)) + 1
        chosen = order[: min(count, arr.size)]
    return IndexSet(layer, head, IndexKind.TOP_P, p, frozenset(int(i) for i in chosen))


# ============================================================================
# Set metrics
# ============================================================================

def _ratio(num: int, den: int, what: str, warnings: Optional[List[str]]) -> float:
    if den == 0:
        message = f"{what}: empty denominator, reported as 0"
        logger.warning(message)
        if warnings is not None:
            warnings.append(message)
        return 0.0
    return num / den


def _check_same_kind(sets: Sequence[IndexSet]) -> None:
    kinds = {(s.kind, s.param) for s in sets}
    if len(kinds) > 1:
        raise InvalidSelection(f"index sets mix kinds {sorted((k.value, p) for k, p in kinds)}")


def within_layer_metrics(
    sets: Sequence[IndexSet], n: int, warnings: Optional[List[str]] = None
) -> Tuple[float, float]:
    """
    Jaccard and coverage of the H head sets of one layer

    Returns:
        (J^l, R_c^l) = (|intersection| / |union|, |union| / N)
    """
    if not sets:
        raise EmptyInput("no index sets")
    if len({s.layer for s in sets}) > 1:
        raise InvalidSelection("index sets come from different layers")
    _check_same_kind(sets)
    union = frozenset().union(*(s.indices for s in sets))
    inter = frozenset.intersection(*(s.indices for s in sets))
    layer = sets[0].layer
    return (
        _ratio(len(inter), len(union), f"layer {layer} Jaccard", warnings),
        _ratio(len(union), n, f"layer {layer} coverage", warnings),
    )


def layer_union(sets: Sequence[IndexSet]) -> frozenset:
    return frozenset().union(*(s.indices for s in sets))


def cross_layer_metrics(
    unions: Sequence[frozenset], n: int, warnings: Optional[List[str]] = None
) -> Tuple[float, float]:
    """(J, R_c) over the per-layer union sets"""
    if not unions:
        raise EmptyInput("no layer unions")
    union = frozenset().union(*unions)
    inter = frozenset.intersection(*map(frozenset, unions))
    return (
        _ratio(len(inter), len(union), "cross-layer Jaccard", warnings),
        _ratio(len(union), n, "cross-layer coverage", warnings),
    )


def index_frequency(sets: Sequence[IndexSet], n: int) -> np.ndarray:
    """Share of the L*H sets containing each position"""
    if not sets:
        raise EmptyInput("no index sets")
    counts = np.zeros(n, dtype=np.float64)
    for s in sets:
        idx = np.fromiter(s.indices, dtype=np.int64, count=len(s.indices))
        counts[idx[idx < n]] += 1
    return counts / len(sets)


def overlap_metrics(
    step_sets: Sequence[IndexSet], warnings: Optional[List[str]] = None
) -> Tuple[List[float], List[float]]:
    """
    Adjacent-step and first-to-later overlap for one (layer, head)

    Returns:
        (R_adj, R_f2l): R_adj[i] = |I_i & I_i+1| / |I_i+1|, R_f2l[i] = |I_0 & I_i+1| / |I_i+1|
    """
    if len(step_sets) < 2:
        raise EmptyInput("overlap needs at least two steps")
    first = step_sets[0].indices
    r_adj, r_f2l = [], []
    for prev, cur in zip(step_sets, step_sets[1:]):
        den = len(cur.indices)
        r_adj.append(_ratio(len(prev.indices & cur.indices), den, "adjacent overlap", warnings))
        r_f2l.append(_ratio(len(first & cur.indices), den, "first-to-later overlap", warnings))
    return r_adj, r_f2l


# ============================================================================
# Distributions
# ============================================================================

def pie_buckets(sums) -> np.ndarray:
    """Counts over (0,0.5], (0.5,0.8], (0.8,0.9], (0.9,1]"""
    values = np.asarray(sums, dtype=np.float64).ravel()
    bucket = np.digitize(values, PIE_EDGES, right=True)
    # float32 sums can land a hair above 1
    bucket = np.minimum(bucket, len(PIE_LABELS) - 1)
    return np.bincount(bucket, minlength=len(PIE_LABELS)).astype(np.int64)


def boxplot_summary(sums_by_layer: Sequence) -> pd.DataFrame:
    rows = []
    for layer, sums in enumerate(sums_by_layer):
        values = np.asarray(sums, dtype=np.float64).ravel()
        q1, median, q3 = np.percentile(values, [25, 50, 75])
        rows.append(
            {
                "layer": layer,
                "min": values.min(),
                "q1": q1,
                "median": median,
                "q3": q3,
                "max": values.max(),
                "mean": values.mean(),
            }
        )
    return pd.DataFrame(rows, columns=["layer", "min", "q1", "median", "q3", "max", "mean"])


def visible_length(rows: np.ndarray) -> int:
    """Index of the last nonzero score + 1, over every row given (zero padding excluded)"""
    nz = np.nonzero(np.asarray(rows).reshape(-1, np.asarray(rows).shape[-1]).any(axis=0))[0]
    return int(nz[-1]) + 1 if len(nz) else 0


# ============================================================================
# Report
# ============================================================================

@dataclass
class MetricsReport:
    """Everything analyze_trace derives from one trace"""

    layers: int
    heads: int
    steps: int
    step: int
    visible: int
    # k -> (L, H) top-k mass at the analysed step
    topk_sums: Dict[int, np.ndarray] = field(default_factory=dict)
    # k -> per layer, top-k mass over every head and step
    topk_sums_all_steps: Dict[int, List[np.ndarray]] = field(default_factory=dict)
    # (kind, param) -> per-layer (J^l, R_c^l) and global (J, R_c)
    layer_metrics: Dict[Tuple[str, float], List[Tuple[float, float]]] = field(default_factory=dict)
    global_metrics: Dict[Tuple[str, float], Tuple[float, float]] = field(default_factory=dict)
    # p -> frequency per position
    frequency: Dict[float, np.ndarray] = field(default_factory=dict)
    # p -> per-pair means over (layer, head)
    r_adj: Dict[float, List[float]] = field(default_factory=dict)
    r_f2l: Dict[float, List[float]] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    kind_note: str = (
        "Jaccard numerator and denominator are taken over the same index-set kind "
        "(top-k with top-k, top-p with top-p)"
    )

    def heatmap_table(self) -> pd.DataFrame:
        rows = []
        for k, sums in self.topk_sums.items():
            for layer in range(self.layers):
                row = {"k": k, "layer": layer}
                row.update({f"head_{h}": sums[layer, h] for h in range(self.heads)})
                rows.append(row)
        return pd.DataFrame(rows)

    def boxplot_table(self) -> pd.DataFrame:
        frames = []
        for k, per_layer in self.topk_sums_all_steps.items():
            frame = boxplot_summary(per_layer)
            frame.insert(0, "k", k)
            frames.append(frame)
        return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()

    def pie_table(self) -> pd.DataFrame:
        rows = []
        for k, sums in self.topk_sums.items():
            counts = pie_buckets(sums)
            rows.extend(
                {"k": k, "interval": label, "count": int(c)} for label, c in zip(PIE_LABELS, counts)
            )
        return pd.DataFrame(rows, columns=["k", "interval", "count"])

    def layer_table(self) -> pd.DataFrame:
        rows = []
        for (kind, param), per_layer in self.layer_metrics.items():
            for layer, (j, rc) in enumerate(per_layer):
                rows.append({"kind": kind, "param": param, "layer": layer, "jaccard": j, "coverage": rc})
        return pd.DataFrame(rows, columns=["kind", "param", "layer", "jaccard", "coverage"])

    def frequency_table(self) -> pd.DataFrame:
        rows = [
            {"p": p, "position": i, "frequency": f}
            for p, freq in self.frequency.items()
            for i, f in enumerate(freq)
        ]
        return pd.DataFrame(rows, columns=["p", "position", "frequency"])

    def overlap_table(self) -> pd.DataFrame:
        rows = []
        for p in self.r_adj:
            for i, (adj, f2l) in enumerate(zip(self.r_adj[p], self.r_f2l[p])):
                rows.append({"p": p, "step": i + 1, "r_adj": adj, "r_f2l": f2l})
        return pd.DataFrame(rows, columns=["p", "step", "r_adj", "r_f2l"])

    def to_dict(self) -> Dict:
        return {
            "shape": {"layers": self.layers, "heads": self.heads, "steps": self.steps},
            "step": self.step,
            "visible": self.visible,
            "topk_sums": {str(k): v.tolist() for k, v in self.topk_sums.items()},
            "pie": {str(k): pie_buckets(v).tolist() for k, v in self.topk_sums.items()},
            "layers": self.layer_table().to_dict(orient="records"),
            "global": [
                {"kind": kind, "param": param, "jaccard": j, "coverage": rc}
                for (kind, param), (j, rc) in self.global_metrics.items()
            ],
            "r_adj": {str(p): v for p, v in self.r_adj.items()},
            "r_f2l": {str(p): v for p, v in self.r_f2l.items()},
            "warnings": list(self.warnings),
            "note": self.kind_note,
        }


def _set_metrics(report: MetricsReport, sets_by_layer: List[List[IndexSet]], key, n: int) -> None:
    per_layer = [within_layer_metrics(sets, n, report.warnings) for sets in sets_by_layer]
    unions = [layer_union(sets) for sets in sets_by_layer]
    report.layer_metrics[key] = per_layer
    report.global_metrics[key] = cross_layer_metrics(unions, n, report.warnings)


def analyze_trace(
    trace: AttentionTrace,
    k_list: Sequence[int],
    p_list: Sequence[float],
    step: int = -1,
) -> MetricsReport:
    """
    Assemble every sparsity metric for one trace

    Args:
        trace: score rows (L, H, steps, N), zero-padded
        k_list: top-k sizes (clamped to the visible length)
        p_list: top-p thresholds
        step: step analysed for sums, Jaccard, coverage and frequency (default the last)

    Returns:
        MetricsReport; overlap metrics only when the trace has two or more steps
    """
    if trace.steps == 0:
        raise EmptyInput("trace has no steps")
    step = step % trace.steps
    scores = np.asarray(trace.scores, dtype=np.float64)
    widths = [visible_length(scores[:, :, s]) for s in range(trace.steps)]
    n = widths[step]
    report = MetricsReport(trace.layers, trace.heads, trace.steps, step, n)
    layers, heads = trace.layers, trace.heads

    for k in k_list:
        kk = min(k, n)
        if kk != k:
            report.warnings.append(f"k={k} clamped to visible length {n}")
        report.topk_sums[k] = np.array(
            [[top_k_sum(scores[l, h, step, :n], kk) for h in range(heads)] for l in range(layers)]
        )
        per_layer = []
        for l in range(layers):
            vals = [
                top_k_sum(scores[l, h, s, :ns], min(k, ns))
                for h in range(heads)
                for s, ns in enumerate(widths)
            ]
            per_layer.append(np.array(vals))
        report.topk_sums_all_steps[k] = per_layer

        sets = [
            [top_k_index_set(scores[l, h, step, :n], kk, l, h) for h in range(heads)]
            for l in range(layers)
        ]
        _set_metrics(report, sets, (IndexKind.TOP_K.value, float(k)), n)

    for p in p_list:
        sets = [
            [top_p_indices(scores[l, h, step, :n], p, l, h) for h in range(heads)]
            for l in range(layers)
        ]
        _set_metrics(report, sets, (IndexKind.TOP_P.value, float(p)), n)
        report.frequency[p] = index_frequency([s for row in sets for s in row], n)

        if trace.steps >= 2:
            adj = np.zeros((layers * heads, trace.steps - 1))
            f2l = np.zeros_like(adj)
            for i, (l, h) in enumerate((l, h) for l in range(layers) for h in range(heads)):
                step_sets = [top_p_indices(scores[l, h, s], p, l, h) for s in range(trace.steps)]
                adj[i], f2l[i] = overlap_metrics(step_sets, report.warnings)
            report.r_adj[p] = adj.mean(axis=0).tolist()
            report.r_f2l[p] = f2l.mean(axis=0).tolist()

    logger.info(
        "analyzed trace L=%d H=%d steps=%d at step %d (visible N=%d), %d warnings",
        layers, heads, trace.steps, step, n, len(report.warnings),
    )
    return report
