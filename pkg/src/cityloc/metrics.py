"""Evaluation records, the 3 m / 10 degree correctness predicate, and
average precision over ranked localization results."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .geometry import Pose, rotation_angle

POSITION_LIMIT_M = 3.0
ORIENTATION_LIMIT_DEG = 10.0


@dataclass
class EvalRecord:
    query_id: int
    success: bool
    position_error_m: float  # inf on failure
    orientation_error_deg: float
    score: float  # acceptance score used for ranking (e.g. inlier ratio)
    latency_ms: float = 0.0

    @property
    def correct(self) -> bool:
        return pose_correct(self.position_error_m, self.orientation_error_deg)


def pose_errors(estimate: Pose, truth: Pose):
    """Euclidean position error and orientation disparity angle (degrees)."""
    dp = float(np.linalg.norm(estimate.t - truth.t))
    dr = np.degrees(rotation_angle(estimate.r.T @ truth.r))
    return dp, float(dr)


def pose_correct(position_error_m: float, orientation_error_deg: float,
                 pos_limit: float = POSITION_LIMIT_M,
                 ori_limit: float = ORIENTATION_LIMIT_DEG) -> bool:
    return position_error_m < pos_limit and orientation_error_deg < ori_limit


def record_for(query_id: int, estimate: Optional[Pose], truth: Pose,
               score: float, latency_ms: float = 0.0) -> EvalRecord:
    if estimate is None:
        return EvalRecord(query_id, False, np.inf, np.inf, score, latency_ms)
    dp, dr = pose_errors(estimate, truth)
    return EvalRecord(query_id, True, dp, dr, score, latency_ms)


def average_precision(records: List[EvalRecord],
                      n_positives: Optional[int] = None) -> float:
    """Discrete average precision of the ranked localization results.

    Successful records are ranked by descending score; each correct result
    at rank r contributes precision-at-r.  ``n_positives`` defaults to the
    total number of records (every query counts as one positive; failures
    are positives that were never retrieved).
    """
    if not records:
        raise ValueError("no records to evaluate")
    if n_positives is None:
        n_positives = len(records)
    ranked = sorted((r for r in records if r.success),
                    key=lambda r: (-r.score, r.query_id))
    hits = 0
    total = 0.0
    for rank, rec in enumerate(ranked, start=1):
        if rec.correct:
            hits += 1
            total += hits / rank
    return total / n_positives if n_positives else 0.0
