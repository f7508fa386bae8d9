"""scikit-learn style wrappers.

``SnapAnglePredictor`` takes a collection of binary equirectangular
foreground masks; ``predict`` returns one snap angle (radians) per mask.
``CubemapProjector`` turns panoramas into cubemaps.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geometry import AngleGrid, check_equirect, check_mask, project_cubemap
from .harness import ImageContext, POLICIES, run_named_policy
from .network import PolicyWeights
from .objective import ObjectiveConfig


def check_mask_collection(X) -> list:
    """Validate ``X`` as a sequence of binary HxW masks (or one 3-D array)."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ValueError("expected a collection of masks; wrap a single mask in a list")
    masks = [check_mask(m, name=f"X[{i}]") for i, m in enumerate(X)]
    if not masks:
        raise ValueError("X holds no masks")
    return masks


def check_panorama_collection(X) -> list:
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ValueError("expected a collection of panoramas; wrap a single image in a list")
    return [check_equirect(img, name=f"X[{i}]") for i, img in enumerate(X)]


class SnapAnglePredictor(BaseEstimator):
    """Predict snap angles with a budgeted search policy.

    Parameters
    ----------
    policy : {"exhaustive", "random", "uniform", "coarse2fine", "saliency", "learned"}
    budget : int
        Evaluations allowed per image (ignored by exhaustive and saliency).
    weights : PolicyWeights, optional
        Starting weights for the learned policy. With ``epochs=0`` they are
        used as-is.
    """

    def __init__(self, policy="uniform", budget=4, n_grid=20, face_size=64,
                 margin_frac=0.0625, denominator_mode="band-occupancy", window=30,
                 sigma=5.0, greedy=False, epochs=20, batch_size=32, lr=0.01,
                 momentum=0.9, reward_mode="literal-min", random_state=None,
                 weights=None):
        self.policy = policy
        self.budget = budget
        self.n_grid = n_grid
        self.face_size = face_size
        self.margin_frac = margin_frac
        self.denominator_mode = denominator_mode
        self.window = window
        self.sigma = sigma
        self.greedy = greedy
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.reward_mode = reward_mode
        self.random_state = random_state
        self.weights = weights

    def _objective(self):
        return ObjectiveConfig(self.margin_frac, self.denominator_mode)

    def _seed(self):
        return 0 if self.random_state is None else int(self.random_state)

    def fit(self, X, y=None, X_val=None):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.budget < 1 or self.budget > self.n_grid:
            raise ValueError(f"budget must lie in [1, {self.n_grid}]")
        masks = check_mask_collection(X)
        self.grid_ = AngleGrid(self.n_grid)
        self.cfg_ = self._objective()
        self.weights_ = None
        self.training_log_ = []
        if self.policy == "learned":
            from .policy import TrainConfig, train
            if self.epochs > 0:
                cfg = TrainConfig(
                    epochs=self.epochs, batch_size=self.batch_size, T=self.budget, lr=self.lr,
                    momentum=self.momentum, seed=self._seed(), reward_mode=self.reward_mode,
                    face_size=self.face_size, n_grid=self.n_grid, margin_frac=self.margin_frac,
                    denominator_mode=self.denominator_mode)
                val = check_mask_collection(X_val) if X_val is not None else []
                self.weights_, self.training_log_ = train(cfg, masks, val, weights=self.weights)
            elif self.weights is not None:
                self.weights_ = self.weights.copy()
            else:
                raise ValueError("learned policy with epochs=0 needs starting weights")
        self.n_samples_fit_ = len(masks)
        return self

    def search(self, X) -> list:
        """Full :class:`SearchResult` per mask."""
        check_is_fitted(self, "grid_")
        results = []
        for i, mask in enumerate(check_mask_collection(X)):
            ctx = ImageContext.build(mask, self.grid_, self.face_size, self.cfg_)
            results.append(run_named_policy(
                self.policy, ctx, self.budget, self._seed() + i, self.weights_, self.greedy,
                self.window, self.sigma))
        return results

    def predict(self, X) -> np.ndarray:
        return np.array([r.best_angle.theta for r in self.search(X)])

    def score(self, X, y=None) -> float:
        """Negative mean disruption at the predicted angles (higher is better)."""
        return -float(np.mean([r.best_score for r in self.search(X)]))


class CubemapProjector(TransformerMixin, BaseEstimator):
    """Render panoramas to cubemaps at a fixed snap angle."""

    def __init__(self, theta=0.0, face_size=64):
        self.theta = theta
        self.face_size = face_size

    def fit(self, X, y=None):
        check_panorama_collection(X)
        if self.face_size < 8:
            raise ValueError("face_size must be at least 8")
        self.fitted_ = True
        return self

    def transform(self, X):
        check_is_fitted(self, "fitted_")
        return [project_cubemap(img, self.theta, self.face_size)
                for img in check_panorama_collection(X)]


__all__ = ["SnapAnglePredictor", "CubemapProjector", "check_mask_collection",
           "check_panorama_collection", "PolicyWeights"]
