"""Retrieval, classification and pose metrics over a batch of queries."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..geometry import pose_error

ACC_COARSE = math.pi / 6
ACC_FINE = math.pi / 18


@dataclass(frozen=True)
class GroupMetrics:
    n: int
    top1: float
    top5: float
    cls_top1: float
    acc_pi_6: float
    acc_pi_18: float
    med_err: float  # degrees
    # pose metrics restricted to queries whose rank-1 shape is correct
    n_correct: int = 0
    acc_pi_18_correct: float = float("nan")
    med_err_correct: float = float("nan")


@dataclass
class MetricsReport:
    overall: GroupMetrics
    per_category: dict[str, GroupMetrics]
    runtimes: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "overall": asdict(self.overall),
            "per_category": {k: asdict(v) for k, v in self.per_category.items()},
            "runtimes": dict(self.runtimes),
        }


@dataclass(frozen=True)
class QueryOutcome:
    """What the metrics need from one (query, result) pair."""

    category: str
    correct_top1: bool
    correct_top5: bool
    correct_class: bool
    pose_err: float  # radians, rank-1 pose vs ground truth


def outcome(record, result, stage: str = "refined") -> QueryOutcome:
    ranked = result.ranked if stage == "refined" else result.initial
    ids = [c.shape_id for c in ranked]
    top = ranked[0]
    return QueryOutcome(
        record.gt_category,
        ids[0] == record.gt_shape_id,
        record.gt_shape_id in ids[:5],
        top.category == record.gt_category,
        pose_error(top.pose, record.gt_pose),
    )


def _group(rows: list[QueryOutcome]) -> GroupMetrics:
    errs = np.array([r.pose_err for r in rows])
    correct = np.array([r.correct_top1 for r in rows])
    ok_errs = errs[correct]
    return GroupMetrics(
        n=len(rows),
        top1=float(correct.mean()),
        top5=float(np.mean([r.correct_top5 for r in rows])),
        cls_top1=float(np.mean([r.correct_class for r in rows])),
        acc_pi_6=float(np.mean(errs < ACC_COARSE)),
        acc_pi_18=float(np.mean(errs < ACC_FINE)),
        med_err=float(np.degrees(np.median(errs))),
        n_correct=int(correct.sum()),
        acc_pi_18_correct=float(np.mean(ok_errs < ACC_FINE)) if len(ok_errs) else float("nan"),
        med_err_correct=float(np.degrees(np.median(ok_errs))) if len(ok_errs) else float("nan"),
    )


def evaluate(results, stage: str = "refined") -> MetricsReport:
    """Metrics for ``[(QueryRecord, RetrievalResult), ...]``.

    Pose errors always use the rank-1 candidate's pose, whether or not that
    shape is the right one. ``stage="initial"`` scores the grid-search ranking.
    """
    if not results:
        raise ValueError("no results to evaluate")
    rows = [outcome(rec, res, stage) for rec, res in results]
    cats = sorted({r.category for r in rows})
    return MetricsReport(_group(rows), {c: _group([r for r in rows if r.category == c]) for c in cats})
