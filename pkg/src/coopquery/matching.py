"""Association results, distance-based baselines and log-domain Sinkhorn."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment


class NumericalOverflow(FloatingPointError):
    pass


class InjectivityError(ValueError):
    pass


@dataclass
class MatchResult:
    """Injective coop->ego pairing plus the leftover indices on both sides."""

    pairs: list = field(default_factory=list)  # (coop_index, ego_index, score)
    unmatched_coop: set = field(default_factory=set)
    unmatched_ego: set = field(default_factory=set)

    @classmethod
    def from_pairs(cls, pairs, n_coop: int, n_ego: int) -> "MatchResult":
        pairs = sorted((int(u), int(x), float(s)) for u, x, s in pairs)
        used_u = {u for u, _, _ in pairs}
        used_x = {x for _, x, _ in pairs}
        result = cls(pairs, set(range(n_coop)) - used_u, set(range(n_ego)) - used_x)
        result.check(n_coop, n_ego)
        return result

    def check(self, n_coop: int, n_ego: int) -> None:
        """Raise InjectivityError unless pairs and unmatched sets partition both index ranges."""
        us = [u for u, _, _ in self.pairs]
        xs = [x for _, x, _ in self.pairs]
        if len(set(us)) != len(us) or len(set(xs)) != len(xs):
            raise InjectivityError("an index appears in more than one pair")
        if set(us) & self.unmatched_coop or set(xs) & self.unmatched_ego:
            raise InjectivityError("an index is both paired and unmatched")
        if set(us) | self.unmatched_coop != set(range(n_coop)):
            raise InjectivityError("coop indices are not partitioned")
        if set(xs) | self.unmatched_ego != set(range(n_ego)):
            raise InjectivityError("ego indices are not partitioned")
        for _, _, s in self.pairs:
            if not 0.0 <= s <= 1.0:
                raise InjectivityError(f"pair score {s} outside [0, 1]")

    @property
    def pair_set(self) -> set:
        return {(u, x) for u, x, _ in self.pairs}


def _positions(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(len(a), -1) if a.size else np.zeros((len(a), 3))


def pairwise_distances(coop_positions, ego_positions) -> np.ndarray:
    c, e = _positions(coop_positions), _positions(ego_positions)
    if len(c) == 0 or len(e) == 0:
        return np.zeros((len(c), len(e)))
    return np.linalg.norm(c[:, None, :] - e[None, :, :], axis=-1)


def greedy_distance_match(coop_positions, ego_positions, radius: float, coop_confidence=None) -> MatchResult:
    """Fixed-radius association: most confident coop query first, nearest free ego query wins.

    Pair scores are ``1 - distance / radius``.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    D = pairwise_distances(coop_positions, ego_positions)
    n_coop, n_ego = D.shape
    conf = np.ones(n_coop) if coop_confidence is None else np.asarray(coop_confidence, dtype=np.float64)
    # stable sort on -confidence keeps lower indices first among ties
    order = np.argsort(-conf, kind="stable")
    free = np.ones(n_ego, dtype=bool)
    pairs = []
    for u in order:
        if not free.any():
            break
        d = np.where(free, D[u], np.inf)
        x = int(np.argmin(d))
        if d[x] <= radius:
            free[x] = False
            pairs.append((int(u), x, 1.0 - d[x] / radius))
    return MatchResult.from_pairs(pairs, n_coop, n_ego)


def hungarian_match(coop_positions, ego_positions, reject_threshold: float) -> MatchResult:
    """Minimum total Euclidean distance assignment, then drop pairs farther than ``reject_threshold``."""
    if reject_threshold <= 0:
        raise ValueError("reject_threshold must be positive")
    D = pairwise_distances(coop_positions, ego_positions)
    n_coop, n_ego = D.shape
    if n_coop == 0 or n_ego == 0:
        return MatchResult.from_pairs([], n_coop, n_ego)
    rows, cols = linear_sum_assignment(D)
    pairs = [(int(u), int(x), 1.0 - D[u, x] / reject_threshold)
             for u, x in zip(rows, cols) if D[u, x] <= reject_threshold]
    return MatchResult.from_pairs(pairs, n_coop, n_ego)


def log_sinkhorn(log_k: torch.Tensor, iters: int) -> torch.Tensor:
    """Alternating log-domain row/column normalization.

    The shorter side is normalized to sums of exactly one; the longer side is
    only scaled down where its sums exceed one, so rectangular inputs end up
    as partial assignments. Square inputs get the classic doubly stochastic
    iteration.
    """
    n, m = log_k.shape
    if n == 0 or m == 0:
        return log_k
    zero = log_k.new_zeros(())
    for _ in range(iters):
        row = torch.logsumexp(log_k, dim=1, keepdim=True)
        log_k = log_k - (row if n <= m else torch.maximum(row, zero))
        col = torch.logsumexp(log_k, dim=0, keepdim=True)
        log_k = log_k - (col if m <= n else torch.maximum(col, zero))
    return log_k


def sinkhorn(affinity, temperature: float = 0.1, iters: int = 20) -> np.ndarray:
    """Assignment matrix from an affinity matrix via ``iters`` Sinkhorn rounds on ``exp(S / T)``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    S = torch.as_tensor(np.asarray(affinity, dtype=np.float64))
    if S.ndim != 2 or not torch.isfinite(S).all():
        raise ValueError("affinity must be a finite 2D matrix")
    P = torch.exp(log_sinkhorn(S / temperature, iters)).numpy()
    if not np.all(np.isfinite(P)):
        raise NumericalOverflow("non-finite entries after Sinkhorn")
    return P
