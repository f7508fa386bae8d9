"""Budgeted snap-angle search policies.

Every policy talks to a :class:`Scorer`, which owns the budget counter and a
per-angle cache, and returns a :class:`SearchResult` holding the best angle
seen so far.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import AngleGrid, SnapAngle, TWO_PI, check_mask
from .objective import ObjectiveConfig, face_scores, lateral_mean
from .geometry import render_mask_faces


class BudgetExceeded(RuntimeError):
    pass


class Scorer:
    """Disruption score of a fixed mask as a function of the snap angle.

    Repeated angles are served from the cache and do not consume budget.
    """

    def __init__(self, mask, face_size=64, cfg: ObjectiveConfig | None = None,
                 budget: int | None = None):
        self.mask = check_mask(mask)
        self.face_size = face_size
        self.cfg = cfg or ObjectiveConfig()
        self.budget = budget
        self.evaluations = 0
        self.history: list[tuple[SnapAngle, float]] = []
        self._cache: dict = {}

    @classmethod
    def from_function(cls, fn, budget=None) -> "Scorer":
        """Wrap an arbitrary ``SnapAngle -> float`` callable (tests, tables)."""
        self = cls.__new__(cls)
        self.mask = None
        self.face_size = None
        self.cfg = None
        self.budget = budget
        self.evaluations = 0
        self.history = []
        self._cache = {}
        self._fn = fn
        return self

    @staticmethod
    def _key(angle: SnapAngle):
        return ("k", angle.grid_index) if angle.grid_index is not None else ("t", angle.theta)

    def _evaluate(self, angle: SnapAngle) -> float:
        fn = getattr(self, "_fn", None)
        if fn is not None:
            return float(fn(angle))
        faces = render_mask_faces(self.mask, angle.theta, self.face_size)[:4]
        return lateral_mean(face_scores(faces, self.cfg))

    def __call__(self, angle: SnapAngle) -> float:
        key = self._key(angle)
        if key in self._cache:
            return self._cache[key]
        if self.budget is not None and self.evaluations >= self.budget:
            raise BudgetExceeded(f"budget of {self.budget} evaluations exhausted")
        score = self._evaluate(angle)
        self._cache[key] = score
        self.evaluations += 1
        self.history.append((angle, score))
        return score

    def __contains__(self, angle: SnapAngle) -> bool:
        return self._key(angle) in self._cache

    def fork(self, budget=None) -> "Scorer":
        """Fresh counter and cache over the same scoring function."""
        if getattr(self, "_fn", None) is not None:
            return Scorer.from_function(self._fn, budget)
        return Scorer(self.mask, self.face_size, self.cfg, budget)


@dataclass
class SearchResult:
    best_angle: SnapAngle
    best_score: float
    evaluated: list = field(default_factory=list)
    budget_used: int = 0

    @classmethod
    def from_history(cls, history, budget_used=None) -> "SearchResult":
        if not history:
            raise ValueError("no angles were evaluated")
        # ties go to the smaller grid index, then to the earlier evaluation
        best = min(range(len(history)), key=lambda i: (
            history[i][1],
            history[i][0].grid_index if history[i][0].grid_index is not None else math.inf,
            i))
        angle, score = history[best]
        used = len({Scorer._key(a) for a, _ in history}) if budget_used is None else budget_used
        return cls(angle, score, list(history), used)

    def to_dict(self) -> dict:
        return {
            "best_angle": {"theta": self.best_angle.theta,
                           "degrees": math.degrees(self.best_angle.theta),
                           "grid_index": self.best_angle.grid_index},
            "best_score": self.best_score,
            "evaluated": [{"theta": a.theta, "grid_index": a.grid_index, "score": s}
                          for a, s in self.evaluated],
            "budget_used": self.budget_used,
        }


def _check_budget(T, n, lo=1):
    if not (lo <= T <= n):
        raise ValueError(f"budget T={T} outside [{lo}, {n}]")


def exhaustive(scorer: Scorer, grid: AngleGrid) -> SearchResult:
    if len(grid) == 0:
        raise ValueError("empty angle grid")
    for angle in grid:
        scorer(angle)
    return SearchResult.from_history(scorer.history)


def random_policy(scorer: Scorer, grid: AngleGrid, T: int, seed=None) -> SearchResult:
    """Best of ``T`` distinct random candidates.

    The candidates are a prefix of one seeded permutation, so a larger budget
    with the same seed always evaluates a superset.
    """
    _check_budget(T, len(grid))
    order = np.random.default_rng(seed).permutation(len(grid))
    for k in order[:T]:
        scorer(grid[int(k)])
    return SearchResult.from_history(scorer.history)


def uniform_order(n: int) -> list[int]:
    """Grid indices in greedy farthest-point order on the circle, from 0.

    Every prefix contains the canonical index 0 and extends the previous
    one, so best-of-prefix never gets worse as ``T`` grows.  For ``T`` in
    1, 2, 4 (``n`` divisible by 4) and ``T = n`` the prefix equals the
    evenly spaced set ``{round(j * n / T)}``.
    """
    chosen = [0]
    dist = np.array([min(k, n - k) for k in range(n)], dtype=float)
    while len(chosen) < n:
        k = int(np.argmax(dist))  # argmax takes the lowest index on ties
        chosen.append(k)
        d = np.abs(np.arange(n) - k)
        dist = np.minimum(dist, np.minimum(d, n - d))
        dist[chosen] = -1
    return chosen


def uniform_policy(scorer: Scorer, grid: AngleGrid, T: int) -> SearchResult:
    _check_budget(T, len(grid))
    for k in uniform_order(len(grid))[:T]:
        scorer(grid[k])
    return SearchResult.from_history(scorer.history)


def coarse_to_fine(scorer: Scorer, grid: AngleGrid, T: int) -> SearchResult:
    """Compare the centers of two halves, then recurse into the better half."""
    n = len(grid)
    if T < 2:
        raise ValueError("coarse-to-fine needs a budget of at least 2")
    _check_budget(T, n, lo=2)
    lo, hi = 0, n
    while hi - lo >= 2 and scorer.evaluations < T:
        mid = lo + (hi - lo) // 2
        halves = ((lo, mid), (mid, hi))
        scores = []
        for a, b in halves:
            c = grid[a + (b - a) // 2]
            if scorer.evaluations >= T and c not in scorer:
                break
            scores.append(scorer(c))
        if len(scores) < 2:
            break
        # equal centers: the upper half, whose center sits closer to the split
        lo, hi = halves[0] if scores[0] < scores[1] else halves[1]
    return SearchResult.from_history(scorer.history)


def blur_saliency(saliency, sigma=5.0) -> np.ndarray:
    sal = np.asarray(saliency, dtype=np.float64)
    if sal.ndim == 3:
        if sal.shape[2] != 1:
            raise ValueError("saliency map must be single-channel")
        sal = sal[..., 0]
    if sal.ndim != 2:
        raise ValueError("saliency map must be a 2-D array")
    if sigma > 0:
        sal = gaussian_filter(sal, sigma, mode=("nearest", "wrap"))
    return sal


def best_window(saliency, window: int):
    """Top-left (row, col) of the max-sum ``window`` x ``window`` square.

    Columns wrap around the longitude seam; ties go to the top-left-most
    position.
    """
    h, w = saliency.shape
    if window <= 0:
        raise ValueError("window size must be positive")
    if window >= min(h, w):
        raise ValueError(f"window {window} must be smaller than the map ({h}x{w})")
    padded = np.concatenate([saliency, saliency[:, :window - 1]], axis=1)
    ii = np.zeros((h + 1, padded.shape[1] + 1))
    ii[1:, 1:] = padded.cumsum(0).cumsum(1)
    sums = (ii[window:, window:] - ii[:-window, window:]
            - ii[window:, :-window] + ii[:-window, :-window])[:, :w]
    r, c = np.unravel_index(int(np.argmax(sums)), sums.shape)
    return int(r), int(c)


def saliency_policy(saliency_map, window: int = 30, sigma: float = 5.0,
                    grid: AngleGrid | None = None) -> SnapAngle:
    """Snap angle that centers a lateral face on the most salient window."""
    grid = grid or AngleGrid()
    sal = blur_saliency(saliency_map, sigma)
    _, c = best_window(sal, window)
    w = sal.shape[1]
    center_lon = -math.pi + (c + window / 2) * TWO_PI / w
    return grid.snap(center_lon % (math.pi / 2))


def saliency_search(scorer: Scorer, saliency_map, grid: AngleGrid, window=30,
                    sigma=5.0) -> SearchResult:
    """Score the saliency angle; one unit of budget."""
    angle = saliency_policy(saliency_map, window, sigma, grid)
    scorer(angle)
    return SearchResult.from_history(scorer.history)
