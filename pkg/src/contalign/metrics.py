"""Segmentation and continual-learning metrics.

Covers mask IoU, boundary IoU over Chebyshev bands, the stage-weighted
Last/Avg/forgetting aggregates over a lower-triangular stage matrix, routing
accuracy, and total-variation / Jensen-Shannon distances between discrete
feature distributions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .router import OOD

__all__ = [
    "iou",
    "biou",
    "boundary_band",
    "default_band_width",
    "TaskEval",
    "StageMetrics",
    "AggregateResult",
    "stage_aggregate",
    "routing_accuracy",
    "tv_distance",
    "js_divergence",
    "stage_metrics_to_csv",
    "stage_metrics_from_csv",
    "routing_log_to_csv",
    "aggregate_summary",
    "feature_histogram",
    "feature_distribution_distance",
]


def _as_bool_mask(mask: np.ndarray) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {arr.shape}")
    return arr > 0.5 if arr.dtype != bool else arr


def iou(pred, true) -> float:
    """Intersection over union of two binary masks; 1.0 when both empty."""
    p, t = _as_bool_mask(pred), _as_bool_mask(true)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def default_band_width(shape: tuple[int, int]) -> int:
    """ceil(2% of the image diagonal); 2 pixels at 64x64."""
    return int(math.ceil(0.02 * math.hypot(*shape)))


def boundary_band(mask, d: int) -> np.ndarray:
    """Mask pixels within Chebyshev distance d of the background.

    Everything outside the image counts as background, so bands hug the
    image border too; implemented as mask minus its d-step erosion with a
    full 3x3 structuring element.
    """
    if d < 1:
        raise ValueError(f"band width must be >= 1, got {d}")
    m = _as_bool_mask(mask)
    eroded = ndimage.binary_erosion(
        m, structure=np.ones((3, 3), dtype=bool), iterations=d, border_value=0
    )
    return m & ~eroded


def biou(pred, true, d: int | None = None) -> float:
    """Boundary IoU: plain IoU of the two masks' own boundary bands."""
    p, t = _as_bool_mask(pred), _as_bool_mask(true)
    if d is None:
        d = default_band_width(t.shape)
    return iou(boundary_band(p, d), boundary_band(t, d))


# -- stage bookkeeping ----------------------------------------------------------


@dataclass
class TaskEval:
    iou: float
    biou: float
    n: int


@dataclass
class RouteRecord:
    stage: int
    true_task: int  # OOD for held-out-domain probes
    chosen: int


@dataclass
class StageMetrics:
    """Lower-triangular matrix of per-task scores after each stage.

    Stages are 1-based counts of trained tasks; `per_stage[t]` maps each
    task seen so far to its evaluation on that task's fixed test set.
    """

    per_stage: dict[int, dict[int, TaskEval]] = field(default_factory=dict)
    routing_log: list[RouteRecord] = field(default_factory=list)

    def record(self, stage: int, task: int, task_eval: TaskEval) -> None:
        bucket = self.per_stage.setdefault(stage, {})
        if task in bucket:
            raise ValueError(f"duplicate entry for stage {stage}, task {task}")
        if not (0.0 <= task_eval.iou <= 1.0 and 0.0 <= task_eval.biou <= 1.0):
            raise ValueError("IoU/BIoU must lie in [0, 1]")
        bucket[task] = task_eval

    def log_route(self, stage: int, true_task: int, chosen: int) -> None:
        self.routing_log.append(RouteRecord(stage, true_task, chosen))

    def n_stages(self) -> int:
        return len(self.per_stage)

    def validate(self) -> None:
        stages = sorted(self.per_stage)
        if stages != list(range(1, len(stages) + 1)):
            raise ValueError(f"stages must be 1..N, got {stages}")
        n_by_task: dict[int, int] = {}
        for t in stages:
            tasks = self.per_stage[t]
            if len(tasks) != t:
                raise ValueError(
                    f"stage {t} must evaluate exactly {t} tasks, got {len(tasks)}"
                )
            for k, te in tasks.items():
                if n_by_task.setdefault(k, te.n) != te.n:
                    raise ValueError(f"test-set size of task {k} changed across stages")


@dataclass
class AggregateResult:
    last: float
    avg: float
    forgetting: float


def _stage_mean(tasks: dict[int, TaskEval], attr: str) -> float:
    total_n = sum(te.n for te in tasks.values())
    return sum(getattr(te, attr) * te.n for te in tasks.values()) / total_n


def _aggregate(sm: StageMetrics, attr: str) -> AggregateResult:
    stages = sorted(sm.per_stage)
    n = len(stages)
    stage_means = [_stage_mean(sm.per_stage[t], attr) for t in stages]
    last = stage_means[-1]
    avg = float(np.mean(stage_means))
    if n == 1:
        return AggregateResult(last=last, avg=avg, forgetting=0.0)
    final_stage = stages[-1]
    total = 0.0
    count = 0
    for k in sorted(sm.per_stage[final_stage]):
        history = [
            getattr(sm.per_stage[t][k], attr)
            for t in stages
            if k in sm.per_stage[t]
        ]
        if len(history) < 2:
            continue  # the task introduced at the final stage has no forgetting
        # Clamped at zero: improvement on an old task is not forgetting.
        total += max(0.0, max(h - history[-1] for h in history[:-1]))
        count += 1
    return AggregateResult(last=last, avg=avg,
                           forgetting=total / count if count else 0.0)


def stage_aggregate(sm: StageMetrics) -> tuple[AggregateResult, AggregateResult]:
    """(IoU aggregate, BIoU aggregate): Last = the final stage's sample-
    weighted mean; Avg = mean of the per-stage means; forgetting = mean over
    the first N-1 tasks of the peak-minus-final drop, in absolute points."""
    sm.validate()
    return _aggregate(sm, "iou"), _aggregate(sm, "biou")


def routing_accuracy(log: list[RouteRecord]) -> dict:
    """Per-task and sample-weighted routing accuracy.

    In-distribution accuracy counts decisions equal to the true task; OOD
    accuracy counts fallback decisions on OOD-labelled records and is absent
    (None) when the log holds no OOD records.
    """
    per_task: dict[int, list[int]] = {}
    ood_hits, ood_total = 0, 0
    for rec in log:
        if rec.true_task == OOD:
            ood_total += 1
            ood_hits += rec.chosen == OOD
        else:
            per_task.setdefault(rec.true_task, []).append(int(rec.chosen == rec.true_task))
    task_acc = {k: float(np.mean(v)) for k, v in sorted(per_task.items())}
    id_total = sum(len(v) for v in per_task.values())
    id_hits = sum(sum(v) for v in per_task.values())
    return {
        "per_task": task_acc,
        "in_distribution": id_hits / id_total if id_total else None,
        "ood": ood_hits / ood_total if ood_total else None,
        "n_in_distribution": id_total,
        "n_ood": ood_total,
    }


# -- distribution distances ------------------------------------------------------


def _as_distribution(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("distributions must be 1-D")
    if (arr < 0).any():
        raise ValueError("distributions must be non-negative")
    total = arr.sum()
    if total <= 0:
        raise ValueError("distributions must have positive mass")
    return arr / total


def tv_distance(p, q) -> float:
    """Total variation: half the L1 distance between the distributions."""
    p, q = _as_distribution(p), _as_distribution(q)
    if p.shape != q.shape:
        raise ValueError("distributions must share support")
    return float(0.5 * np.abs(p - q).sum())


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence (natural log, bounded by ln 2)."""
    p, q = _as_distribution(p), _as_distribution(q)
    if p.shape != q.shape:
        raise ValueError("distributions must share support")
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def feature_histogram(features: np.ndarray, bins: int = 32,
                      ranges: np.ndarray | None = None) -> np.ndarray:
    """Average of per-dimension histograms of an (N,D) feature set.

    `ranges` is a (D,2) array of bin ranges; it defaults to each dimension's
    own min/max. Returns a normalized `bins`-long distribution.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError(f"expected (N,D) features, got {f.shape}")
    n, d = f.shape
    if ranges is None:
        ranges = np.stack([f.min(axis=0), f.max(axis=0)], axis=1)
    hist = np.zeros(bins, dtype=np.float64)
    for j in range(d):
        lo, hi = ranges[j]
        if hi <= lo:
            hi = lo + 1e-9
        h, _ = np.histogram(f[:, j], bins=bins, range=(lo, hi))
        hist += h / max(h.sum(), 1)
    return hist / d


def stage_metrics_to_csv(sm: StageMetrics) -> str:
    # shortest round-trip float formatting: rebuilt aggregates must equal the
    # originals bit for bit
    lines = ["stage,task,n,iou,biou"]
    for stage in sorted(sm.per_stage):
        for task in sorted(sm.per_stage[stage]):
            te = sm.per_stage[stage][task]
            lines.append(f"{stage},{task},{te.n},{te.iou!r},{te.biou!r}")
    return "\n".join(lines) + "\n"


def stage_metrics_from_csv(text: str) -> StageMetrics:
    sm = StageMetrics()
    rows = text.strip().splitlines()
    if rows[0] != "stage,task,n,iou,biou":
        raise ValueError(f"unexpected stage-metrics header: {rows[0]!r}")
    for row in rows[1:]:
        stage, task, n, iou_v, biou_v = row.split(",")
        sm.record(int(stage), int(task),
                  TaskEval(iou=float(iou_v), biou=float(biou_v), n=int(n)))
    return sm


def routing_log_to_csv(log: list[RouteRecord]) -> str:
    lines = ["stage,true_task,chosen"]
    for rec in log:
        lines.append(f"{rec.stage},{rec.true_task},{rec.chosen}")
    return "\n".join(lines) + "\n"


def aggregate_summary(sm: StageMetrics) -> dict:
    """Aggregates as a JSON-ready mapping (the summary document)."""
    iou_agg, biou_agg = stage_aggregate(sm)
    return {
        "last_iou": round(iou_agg.last, 6),
        "avg_iou": round(iou_agg.avg, 6),
        "ff_iou": round(iou_agg.forgetting, 6),
        "last_biou": round(biou_agg.last, 6),
        "avg_biou": round(biou_agg.avg, 6),
        "ff_biou": round(biou_agg.forgetting, 6),
        "n_stages": sm.n_stages(),
    }


def feature_distribution_distance(features_a: np.ndarray, features_b: np.ndarray,
                                  bins: int = 32) -> dict:
    """TV and JS between two feature sets' averaged histograms, binned over
    the pooled per-dimension min/max of both sets."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    stacked = np.concatenate([a, b])
    ranges = np.stack([stacked.min(axis=0), stacked.max(axis=0)], axis=1)
    pa = feature_histogram(a, bins=bins, ranges=ranges)
    pb = feature_histogram(b, bins=bins, ranges=ranges)
    return {
        "tv": tv_distance(pa, pb),
        "js": js_divergence(pb, pa),
        "bins": bins,
    }
