"""scikit-learn style wrappers around the matchers and the 2D-to-3D lifting step.

A matcher sample is a :class:`~coopquery.scene.Frame` or an ``(ego, coops)``
pair; ``predict`` returns one list of :class:`MatchResult` per sample and
``score`` is the pooled association F1.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from ._validation import (check_positions, check_positive, check_sample, check_samples, check_unit_interval,
                          labels_for)
from .caa import (DEFAULT_SINKHORN_ITERS, DEFAULT_TAU, DEFAULT_TEMPERATURE, CaaParams, TrainingExample, caa_match,
                  caa_scores, train_caa)
from .evaluation import association_metrics
from .geometry import DEGENERACY_EPS, CameraModel, LiftStrategy, PixelProposal, RigidTransform, lift_proposal
from .matching import greedy_distance_match, hungarian_match


class _MatcherMixin:
    """``predict``/``score`` on top of a per-sample ``match(ego, coops)``."""

    def predict(self, X) -> list:
        return [self.match(ego, coops) for ego, coops in check_samples(X)]

    def score(self, X, y=None) -> float:
        samples = X if isinstance(X, list) else [X]
        labels = labels_for(samples, y)
        predicted = self.predict(samples)
        results = [r for per in predicted for r in per]
        gts = [g for per in labels for g in per]
        return association_metrics(results, gts).f1


class GreedyRadiusMatcher(_MatcherMixin, BaseEstimator):
    """Fixed-radius nearest-neighbour association, most confident coop query first."""

    def __init__(self, radius: float = 4.0):
        self.radius = radius

    def fit(self, X=None, y=None):
        check_positive("radius", self.radius)
        self.fitted_ = True
        return self

    def match(self, ego, coops) -> list:
        ego, coops = check_sample((ego, coops))
        r = check_positive("radius", self.radius)
        return [greedy_distance_match(c.positions, ego.positions, r, c.confidences) for c in coops]


class HungarianMatcher(_MatcherMixin, BaseEstimator):
    """Minimum-cost assignment on centre distance with a rejection threshold."""

    def __init__(self, reject_threshold: float = 4.0):
        self.reject_threshold = reject_threshold

    def fit(self, X=None, y=None):
        check_positive("reject_threshold", self.reject_threshold)
        self.fitted_ = True
        return self

    def match(self, ego, coops) -> list:
        ego, coops = check_sample((ego, coops))
        t = check_positive("reject_threshold", self.reject_threshold)
        return [hungarian_match(c.positions, ego.positions, t) for c in coops]


class ContextAwareMatcher(_MatcherMixin, BaseEstimator):
    """Attention-refined descriptors, Sinkhorn assignment, mutual-NN + ``tau`` filter.

    ``fit`` runs SGD from a fresh initialization seeded by ``random_state``;
    alternatively wrap existing parameters with :meth:`from_params`.
    """

    def __init__(self, n_layers: int = 1, dim: int = 32, heads: int = 1, tau: float = DEFAULT_TAU,
                 temperature: float = DEFAULT_TEMPERATURE, sinkhorn_iters: int = DEFAULT_SINKHORN_ITERS,
                 steps: int = 2000, learning_rate: float = 1.0, batch_size: int = 4,
                 clip_norm: Optional[float] = 1.0, bce_weight: float = 1.0, random_state: int = 0):
        self.n_layers = n_layers
        self.dim = dim
        self.heads = heads
        self.tau = tau
        self.temperature = temperature
        self.sinkhorn_iters = sinkhorn_iters
        self.steps = steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.bce_weight = bce_weight
        self.random_state = random_state

    @classmethod
    def from_params(cls, params: CaaParams, **kwargs) -> "ContextAwareMatcher":
        m = cls(n_layers=params.n_layers, dim=params.dim, heads=params.heads, **kwargs)
        m.params_ = params
        m.loss_curve_ = []
        return m

    def _check_hyper(self):
        check_unit_interval("tau", self.tau)
        check_positive("temperature", self.temperature)
        if self.sinkhorn_iters < 1:
            raise ValueError("sinkhorn_iters must be >= 1")

    def fit(self, X, y=None, callback=None):
        """Train on samples ``X`` with ground-truth pairs ``y`` (taken from the frames when omitted)."""
        self._check_hyper()
        samples = check_samples(X, self.dim)
        labels = labels_for(X, y)
        data = [TrainingExample(ego, coops, gt) for (ego, coops), gt in zip(samples, labels, strict=True)]
        init = CaaParams.init(self.n_layers, self.dim, self.heads, seed=self.random_state)
        self.params_, self.loss_curve_ = train_caa(
            init, data, self.steps, self.learning_rate, seed=self.random_state, temperature=self.temperature,
            sinkhorn_iters=self.sinkhorn_iters, bce_weight=self.bce_weight, batch_size=self.batch_size,
            clip_norm=self.clip_norm, callback=callback)
        return self

    def match(self, ego, coops) -> list:
        check_is_fitted(self, "params_")
        self._check_hyper()
        ego, coops = check_sample((ego, coops), self.params_.dim)
        return caa_match(self.params_, ego, coops, self.tau, self.temperature, self.sinkhorn_iters)

    def predict_scores(self, X) -> list:
        """Matchability-scaled assignment matrices, one list per sample."""
        check_is_fitted(self, "params_")
        return [caa_scores(self.params_, ego, coops, self.temperature, self.sinkhorn_iters)
                for ego, coops in check_samples(X, self.params_.dim)]


class QueryLifter(TransformerMixin, BaseEstimator):
    """Lift pixel proposals to 3D points in an agent frame.

    ``transform`` takes a list of :class:`PixelProposal` or an array with
    columns ``(u, v, height, depth)`` (use NaN for a missing prediction) and
    returns an ``(n, 3)`` array.
    """

    def __init__(self, camera: Optional[CameraModel] = None, strategy: str = "height_derived",
                 agent_from_glb: Optional[RigidTransform] = None, eps: float = DEGENERACY_EPS):
        self.camera = camera
        self.strategy = strategy
        self.agent_from_glb = agent_from_glb
        self.eps = eps

    def fit(self, X=None, y=None):
        if not isinstance(self.camera, CameraModel):
            raise ValueError("camera must be a CameraModel")
        self.strategy_ = LiftStrategy(self.strategy)
        self.agent_from_glb_ = self.agent_from_glb or RigidTransform.identity()
        check_positive("eps", self.eps)
        return self

    @staticmethod
    def _proposals(X) -> list:
        if isinstance(X, (list, tuple)) and all(isinstance(p, PixelProposal) for p in X):
            return list(X)
        a = np.asarray(X, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != 4:
            raise ValueError(f"expected proposals or an (n, 4) array, got shape {a.shape}")
        return [PixelProposal(u, v, 1.0, None if np.isnan(h) else h, None if np.isnan(d) else d)
                for u, v, h, d in a]

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "strategy_"):
            raise NotFittedError("call fit before transform")
        props = self._proposals(X)
        out = [lift_proposal(self.camera, p, self.strategy_, self.agent_from_glb_, self.eps) for p in props]
        return check_positions(np.array(out).reshape(len(out), 3), "lifted points")
