"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import math
from numbers import Real

import numpy as np

from .scene import Frame, QuerySet


def check_positive(name: str, value) -> float:
    if not isinstance(value, Real) or not math.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return float(value)


def check_unit_interval(name: str, value, closed_low: bool = False) -> float:
    if not isinstance(value, Real):
        raise ValueError(f"{name} must be a number, got {value!r}")
    ok = (0.0 <= value <= 1.0) if closed_low else (0.0 < value <= 1.0)
    if not ok:
        raise ValueError(f"{name} must lie in {'[0' if closed_low else '(0'}, 1], got {value!r}")
    return float(value)


def check_positions(a, name: str = "positions") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_query_set(qs, dim=None) -> QuerySet:
    if not isinstance(qs, QuerySet):
        raise TypeError(f"expected a QuerySet, got {type(qs).__name__}")
    check_positions(qs.positions)
    if len(qs) and not np.all(np.isfinite(qs.descriptors)):
        raise ValueError(f"agent {qs.agent_id}: descriptors contain non-finite values")
    if dim is not None and len(qs) and qs.dim != dim:
        raise ValueError(f"agent {qs.agent_id}: descriptor dim {qs.dim} != {dim}")
    return qs


def check_sample(sample, dim=None):
    """Normalize one matcher input to ``(ego, coops)``.

    Accepts a :class:`Frame`, anything with ``ego``/``coops`` attributes, or an
    ``(ego, coops)`` pair.
    """
    if hasattr(sample, "ego") and hasattr(sample, "coops"):
        ego, coops = sample.ego, sample.coops
    else:
        try:
            ego, coops = sample
        except (TypeError, ValueError) as exc:
            raise TypeError("a sample is a Frame or an (ego, coops) pair") from exc
    coops = list(coops)
    if not coops:
        raise ValueError("at least one cooperative query set is required")
    return check_query_set(ego, dim), [check_query_set(c, dim) for c in coops]


def check_samples(X, dim=None) -> list:
    if isinstance(X, Frame) or (isinstance(X, tuple) and len(X) == 2 and isinstance(X[0], QuerySet)):
        X = [X]
    samples = [check_sample(s, dim) for s in X]
    if not samples:
        raise ValueError("need at least one sample")
    return samples


def labels_for(X, y) -> list:
    """Ground-truth pair lists per sample, from ``y`` or from the samples themselves."""
    if y is not None:
        return [list(map(list, per)) for per in y]
    try:
        return [list(s.gt_pairs) for s in X]
    except AttributeError as exc:
        raise ValueError("y is required when samples carry no gt_pairs") from exc
