"""Structure summarization: choosing which landmarks a tile keeps.

Two selectors:

* ``select_obs_count`` -- heuristic: each camera keeps its most-observed
  landmarks until its share of a global descriptor budget is met.
* ``select_ilp`` -- budgeted coverage: pick exactly ``n_desired`` landmarks
  maximizing total score while softly covering every camera at least ``b``
  times (slack penalized by lambda).  Solved exactly by enumeration for
  small instances and by lazy greedy + exchange moves at production sizes.

The coverage objective is NP-complete in general; the greedy path reports a
bound on its gap to optimal.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from itertools import combinations
from typing import List, Optional

import numpy as np

EXACT_MAX_LANDMARKS = 20
EXCHANGE_CANDIDATES = 128


@dataclass
class SelectionProblem:
    """Budgeted landmark-coverage instance.

    a: (M, N) binary camera-x-landmark visibility.
    q: (N,) landmark scores, higher is better.
    b: minimum covering landmarks per camera.
    n_desired: exact number of landmarks to keep.
    lam: penalty weight per unit of uncovered slack.
    """

    a: np.ndarray
    q: np.ndarray
    b: int
    n_desired: int
    lam: float

    def __post_init__(self):
        self.a = np.asarray(self.a)
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.a.ndim != 2 or self.a.shape[1] != len(self.q):
            raise ValueError("visibility matrix / score size mismatch")
        if not np.isin(self.a, (0, 1)).all():
            raise ValueError("visibility matrix must be binary")
        if self.b < 0:
            raise ValueError("per-camera minimum must be >= 0")
        if self.n_desired > self.a.shape[1]:
            raise ValueError("cannot select more landmarks than exist")

    @property
    def num_cameras(self) -> int:
        return self.a.shape[0]

    @property
    def num_landmarks(self) -> int:
        return self.a.shape[1]


@dataclass
class SelectionResult:
    selected: np.ndarray  # sorted landmark indices, len == n_desired
    zeta: np.ndarray  # (M,) nonnegative integer slack per camera
    objective: float  # -sum(q[selected]) + lam * zeta.sum()
    method: str  # "exact" | "greedy"
    gap_bound: float  # objective - lower_bound (0 proves optimality)


def selection_objective(problem: SelectionProblem, selected: np.ndarray):
    """Objective value and implied slack of a selection."""
    cov = problem.a[:, selected].sum(axis=1)
    zeta = np.maximum(0, problem.b - cov).astype(np.int64)
    obj = -float(problem.q[selected].sum()) + problem.lam * float(zeta.sum())
    return obj, zeta


def _objective_lower_bound(problem: SelectionProblem) -> float:
    # Best imaginable: the top-n scores, with no more slack than selecting
    # everything would leave.
    top_q = np.sort(problem.q)[::-1][:problem.n_desired].sum()
    full_cov = problem.a.sum(axis=1)
    unavoidable = np.maximum(0, problem.b - full_cov).sum()
    return -float(top_q) + problem.lam * float(unavoidable)


def _select_exact(problem: SelectionProblem) -> SelectionResult:
    n = problem.num_landmarks
    idx = np.arange(n)
    best = None
    combos = np.array(list(combinations(idx, problem.n_desired)), dtype=np.int64)
    # (M, C, n_desired) -> coverage (M, C); fine for n <= EXACT_MAX_LANDMARKS
    cov = problem.a[:, combos].sum(axis=2)
    zeta = np.maximum(0, problem.b - cov)
    obj = -problem.q[combos].sum(axis=1) + problem.lam * zeta.sum(axis=0)
    j = int(np.argmin(obj))
    best = combos[j]
    o, z = selection_objective(problem, best)
    return SelectionResult(np.sort(best), z, o, "exact", 0.0)


def _select_greedy(problem: SelectionProblem) -> SelectionResult:
    a = problem.a
    m, n = a.shape
    cols = [np.flatnonzero(a[:, j]) for j in range(n)]
    cov = np.zeros(m, dtype=np.int64)
    selected: List[int] = []
    in_sel = np.zeros(n, dtype=bool)

    def gain(j: int) -> float:
        need = cov[cols[j]] < problem.b
        return float(problem.q[j]) + problem.lam * float(np.count_nonzero(need))

    # Lazy greedy: cached gains only go stale downward (submodular).
    heap = [(-gain(j), j) for j in range(n)]
    heapq.heapify(heap)
    while len(selected) < problem.n_desired and heap:
        neg, j = heapq.heappop(heap)
        g = gain(j)
        if heap and -heap[0][0] > g + 1e-12:
            heapq.heappush(heap, (-g, j))
            continue
        selected.append(j)
        in_sel[j] = True
        cov[cols[j]] += 1

    # Exchange pass: pull each weak selected landmark and re-add the best
    # candidate (possibly itself).  Candidate pools are capped so the pass
    # stays cheap at production sizes.
    def removal_loss(j: int) -> float:
        newly_uncovered = cov[cols[j]] <= problem.b
        return float(problem.q[j]) + problem.lam * float(np.count_nonzero(newly_uncovered))

    unselected = np.flatnonzero(~in_sel)
    if len(unselected):
        sel_arr = np.array(selected)
        losses = np.array([removal_loss(j) for j in sel_arr])
        weak = sel_arr[np.argsort(losses)[:EXCHANGE_CANDIDATES]]
        cand_gain = np.array([gain(j) for j in unselected])
        strong = unselected[np.argsort(-cand_gain)[:EXCHANGE_CANDIDATES]]
        for _ in range(3):
            improved = False
            for j_out in weak:
                if not in_sel[j_out]:
                    continue
                cov[cols[j_out]] -= 1
                in_sel[j_out] = False
                best_j, best_g = j_out, gain(j_out)
                for j_in in strong:
                    if in_sel[j_in]:
                        continue
                    g = gain(j_in)
                    if g > best_g + 1e-9:
                        best_g, best_j = g, j_in
                in_sel[best_j] = True
                cov[cols[best_j]] += 1
                improved |= best_j != j_out
            if not improved:
                break
        selected = np.flatnonzero(in_sel).tolist()

    sel = np.sort(np.array(selected, dtype=np.int64))
    obj, zeta = selection_objective(problem, sel)
    return SelectionResult(sel, zeta, obj, "greedy",
                           obj - _objective_lower_bound(problem))


def select_ilp(problem: SelectionProblem,
               exact_max_n: int = EXACT_MAX_LANDMARKS) -> SelectionResult:
    """Solve the budgeted coverage selection.

    Exact (enumeration) when the instance has at most ``exact_max_n``
    landmarks, lazy greedy with exchange moves otherwise.
    """
    if problem.num_landmarks <= exact_max_n:
        return _select_exact(problem)
    return _select_greedy(problem)


def problem_from_tile(tile_or_model, b: int, n_desired: int,
                      lam: float = 1.0) -> SelectionProblem:
    """Build a SelectionProblem scored by observation count."""
    landmarks = tile_or_model.landmarks
    n = len(landmarks)
    graph = tile_or_model.graph if hasattr(tile_or_model, "graph") \
        else tile_or_model.visibility()
    m = graph.num_cameras
    a = np.zeros((m, n), dtype=np.int8)
    for j in range(n):
        a[graph.landmark_cameras(j), j] = 1
    q = np.array([lm.num_descriptors for lm in landmarks], dtype=np.float64)
    return SelectionProblem(a, q, b, n_desired, lam)


def select_obs_count(tile_or_model, descriptor_budget: int,
                     per_camera_fraction: Optional[float] = None) -> np.ndarray:
    """Observation-count heuristic selection.

    Each camera walks its landmarks in descending observation count and
    keeps them until its share of the budget is met.  The default share is
    proportional to the camera's own descriptor load; pass
    ``per_camera_fraction`` for a uniform ``fraction * budget`` share.
    Returns the sorted ids of the kept landmarks (union over cameras).
    """
    if descriptor_budget <= 0:
        raise ValueError("descriptor budget must be positive")
    landmarks = tile_or_model.landmarks
    graph = tile_or_model.graph if hasattr(tile_or_model, "graph") \
        else tile_or_model.visibility()
    counts = np.array([lm.num_descriptors for lm in landmarks], dtype=np.int64)
    total = counts.sum()
    kept = set()
    for ci in range(graph.num_cameras):
        lms = graph.camera_landmarks(ci)
        if len(lms) == 0:
            continue
        if per_camera_fraction is None:
            share = descriptor_budget * counts[lms].sum() / max(total, 1)
        else:
            share = descriptor_budget * per_camera_fraction
        order = lms[np.lexsort((lms, -counts[lms]))]
        tally = 0
        for j in order:
            kept.add(int(j))
            tally += counts[j]
            if tally >= share:
                break
    ids = np.array(sorted(landmarks[j].id for j in kept), dtype=np.int64)
    return ids
