"""Size-weighted misclassification, gang-size breakdowns and collateral impact."""

from __future__ import annotations

import csv
import io
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .detector import DetectorModel, predict_scores
from .graph import AttributedGraph, InjectionPlan, apply_injection

DEFAULT_THRESHOLDS = (10, 1000)


@dataclass
class SetResult:
    set_id: int
    size: int
    B: int
    clean_misclassification: float
    attacked_misclassification: float | None
    non_target_clean: float | None = None
    non_target_attacked: float | None = None
    missing_plan: bool = False


@dataclass
class AttackReport:
    per_set: list[SetResult]
    weighted_clean: float
    weighted_attacked: float
    category_breakdown: dict[str, dict]
    non_target_clean: float
    non_target_attacked: float
    non_target_mean_abs_change: float
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = [f.name for f in SetResult.__dataclass_fields__.values()]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in self.per_set:
            writer.writerow(asdict(row))
        return buf.getvalue()

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        (directory / "report.json").write_text(self.to_json(), encoding="utf-8")
        (directory / "report.csv").write_text(self.to_csv(), encoding="utf-8")


def _misclassified(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return np.argmax(scores, axis=1) != labels


def misclassification_rate(detector: DetectorModel, graph: AttributedGraph, nodes, labels=None) -> float:
    """Fraction of ``nodes`` whose argmax prediction differs from the label."""
    nodes = np.asarray(list(nodes), dtype=np.int64)
    if nodes.size == 0:
        raise ValueError("misclassification rate of an empty node set")
    labels = graph.labels[nodes] if labels is None else np.asarray(labels)
    return float(_misclassified(predict_scores(detector, graph, nodes), labels).mean())


def weighted_rate(rates: Sequence[float], sizes: Sequence[int]) -> float:
    sizes = np.asarray(sizes, dtype=np.float64)
    return float(np.dot(np.asarray(rates, dtype=np.float64), sizes) / sizes.sum())


def bucket_label(B: int, thresholds=DEFAULT_THRESHOLDS) -> str:
    lo, hi = thresholds
    if B <= lo:
        return f"B<={lo}"
    if B <= hi:
        return f"{lo}<B<={hi}"
    return f"B>{hi}"


def category_breakdown(rows: Sequence[SetResult], thresholds=DEFAULT_THRESHOLDS) -> dict[str, dict]:
    """Size-weighted clean/attacked rates per gang-size bucket; empty buckets are omitted."""
    buckets: dict[str, list[SetResult]] = {}
    for r in rows:
        buckets.setdefault(bucket_label(r.B, thresholds), []).append(r)
    out = {}
    for label, members in buckets.items():
        attacked = [r for r in members if r.attacked_misclassification is not None]
        out[label] = {
            "num_sets": len(members),
            "clean": weighted_rate([r.clean_misclassification for r in members], [r.size for r in members]),
            "attacked": (
                weighted_rate([r.attacked_misclassification for r in attacked], [r.size for r in attacked])
                if attacked else None
            ),
        }
    order = [bucket_label(b, thresholds) for b in (thresholds[0], thresholds[1], thresholds[1] + 1)]
    return {k: out[k] for k in order if k in out}


def evaluate_attack(
    detector: DetectorModel,
    bundle,
    plans: Mapping[int, InjectionPlan],
    split: str = "test",
    thresholds=DEFAULT_THRESHOLDS,
    jobs: int = 1,
) -> AttackReport:
    """Score every target set of ``split`` on the clean graph and on its own perturbed graph.

    Each plan is applied to a fresh copy of the clean graph; plans are never
    combined. Non-target rates cover the other labeled nodes of the split.
    """
    graph = bundle.graph
    split_nodes = bundle.split_nodes(split)
    labels = graph.labels
    clean_wrong = _misclassified(predict_scores(detector, graph, np.arange(graph.num_nodes)), labels)
    sets = bundle.sets_in(split)

    def one(ts) -> SetResult:
        members = np.asarray(ts.members)
        others = np.setdiff1d(split_nodes, members)
        clean_rate = float(clean_wrong[members].mean())
        nt_clean = float(clean_wrong[others].mean()) if others.size else None
        plan = plans.get(ts.set_id)
        if plan is None:
            return SetResult(ts.set_id, ts.size, ts.closed_neighborhood_size, clean_rate, None,
                             nt_clean, None, missing_plan=True)
        perturbed = apply_injection(graph, plan, ts)
        scores = predict_scores(detector, perturbed, np.arange(graph.num_nodes))
        wrong = _misclassified(scores, labels)
        nt_att = float(wrong[others].mean()) if others.size else None
        return SetResult(ts.set_id, ts.size, ts.closed_neighborhood_size, clean_rate,
                         float(wrong[members].mean()), nt_clean, nt_att)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one, sets))
    else:
        rows = [one(ts) for ts in sets]

    notes = [f"no plan for target set {r.set_id}; reported clean only" for r in rows if r.missing_plan]
    for note in notes:
        warnings.warn(note)
    attacked = [r for r in rows if not r.missing_plan]
    nt = [r for r in attacked if r.non_target_clean is not None]
    return AttackReport(
        per_set=rows,
        weighted_clean=weighted_rate([r.clean_misclassification for r in rows], [r.size for r in rows]),
        weighted_attacked=(
            weighted_rate([r.attacked_misclassification for r in attacked], [r.size for r in attacked])
            if attacked else float("nan")
        ),
        category_breakdown=category_breakdown(rows, thresholds),
        non_target_clean=float(np.mean([r.non_target_clean for r in nt])) if nt else float("nan"),
        non_target_attacked=float(np.mean([r.non_target_attacked for r in nt])) if nt else float("nan"),
        non_target_mean_abs_change=(
            float(np.mean([abs(r.non_target_attacked - r.non_target_clean) for r in nt])) if nt else float("nan")
        ),
        warnings=notes,
    )


def summarize_runs(values: Sequence[float]) -> dict[str, float]:
    """Mean and (population) standard deviation over repeated runs."""
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "runs": int(arr.size)}
