"""Sparse query association for cooperative multi-agent 3D perception."""

from .caa import CaaParams, caa_loss, caa_match, caa_refine, caa_scores, train_caa
from .config import SceneConfig
from .estimators import ContextAwareMatcher, GreedyRadiusMatcher, HungarianMatcher, QueryLifter
from .evaluation import association_metrics, cost_report, detection_metrics, noise_sweep, strategy_comparison
from .fusion import Detection, fuse
from .geometry import CameraModel, LiftStrategy, PixelProposal, RigidTransform, height_derived_depth, lift_proposal
from .matching import MatchResult, greedy_distance_match, hungarian_match, sinkhorn
from .scene import NoiseSpec, QuerySet, generate_scene, simulate_frame

__version__ = "0.1.0"

__all__ = [
    "CaaParams", "CameraModel", "ContextAwareMatcher", "Detection", "GreedyRadiusMatcher", "HungarianMatcher",
    "LiftStrategy", "MatchResult", "NoiseSpec", "PixelProposal", "QueryLifter", "QuerySet", "RigidTransform",
    "SceneConfig",    "association_metrics", "caa_loss", "caa_match", "caa_refine", "caa_scores", "cost_report", "detection_metrics",
    "fuse", "generate_scene", "greedy_distance_match", "height_derived_depth", "hungarian_match", "lift_proposal",
    "noise_sweep", "simulate_frame", "sinkhorn", "strategy_comparison", "train_caa",
]
