"""Merge ego and cooperative queries into one detection list."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .matching import MatchResult
from .scene import QuerySet


class IndexMismatch(ValueError):
    pass


@dataclass(eq=False)
class Detection:
    position: np.ndarray
    size: np.ndarray
    confidence: float
    sources: frozenset  # {(agent_id, query_index)}
    gt_object_id: Optional[int] = None

    def __post_init__(self):
        if not self.sources:
            raise ValueError("a detection needs at least one source")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")

    def to_record(self) -> dict:
        return {
            "position": [float(v) for v in self.position],
            "size": [float(v) for v in self.size],
            "confidence": float(self.confidence),
            "sources": sorted([int(a), int(i)] for a, i in self.sources),
            "label": self.gt_object_id,
        }


@dataclass
class _Member:
    position: np.ndarray
    size: np.ndarray
    confidence: float
    source: tuple
    gt_id: int


@dataclass
class _Cluster:
    members: list = field(default_factory=list)

    def agents(self) -> set:
        return {m.source[0] for m in self.members}

    def centroid(self) -> np.ndarray:
        return _weighted([m.position for m in self.members], [m.confidence for m in self.members])

    def to_detection(self) -> Detection:
        conf = [m.confidence for m in self.members]
        # the first member (ego query or first cooperative observation) names the label
        label = self.members[0].gt_id
        return Detection(
            _weighted([m.position for m in self.members], conf),
            _weighted([m.size for m in self.members], conf),
            noisy_or(conf),
            frozenset(m.source for m in self.members),
            None if label < 0 else int(label),
        )


def _weighted(values, weights) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.sum() <= 0:
        return values.mean(axis=0)
    return (w[:, None] * values).sum(axis=0) / w.sum()


def noisy_or(confidences) -> float:
    """``1 - prod(1 - c)``: order independent and monotone in every input."""
    return float(1.0 - np.prod(1.0 - np.asarray(confidences, dtype=np.float64)))


def _member(qs: QuerySet, i: int) -> _Member:
    return _Member(qs.positions[i], qs.sizes[i], float(qs.confidences[i]), (qs.agent_id, i), int(qs.gt_ids[i]))


def fuse(ego: QuerySet, coops: Sequence[QuerySet], match_results: Sequence[MatchResult],
         merge_radius: Optional[float] = 1.0) -> list:
    """One detection per ego query (absorbing its matched coop queries) plus the unmatched coop queries.

    Unmatched coop queries from *different* agents that lie within
    ``merge_radius`` of an existing unmatched cluster are merged into it; pass
    ``merge_radius=None`` to carry every unmatched coop query over verbatim.
    """
    if len(coops) != len(match_results):
        raise IndexMismatch("need one match result per cooperative query set")
    clusters = [_Cluster([_member(ego, x)]) for x in range(len(ego))]
    for qs, result in zip(coops, match_results):
        try:
            result.check(len(qs), len(ego))
        except ValueError as exc:
            raise IndexMismatch(f"match result inconsistent with agent {qs.agent_id}: {exc}") from exc
        for u, x, _ in result.pairs:
            clusters[x].members.append(_member(qs, u))
    loose: list = []
    for qs, result in zip(coops, match_results):
        for u in sorted(result.unmatched_coop):
            m = _member(qs, u)
            target = None
            if merge_radius is not None:
                best = merge_radius
                for c in loose:
                    if qs.agent_id in c.agents():
                        continue
                    d = float(np.linalg.norm(c.centroid() - m.position))
                    if d <= best:
                        best, target = d, c
            if target is None:
                loose.append(_Cluster([m]))
            else:
                target.members.append(m)
    return [c.to_detection() for c in clusters + loose]
