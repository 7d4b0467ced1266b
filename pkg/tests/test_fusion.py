import numpy as np
import pytest

from coopquery.fusion import Detection, IndexMismatch, fuse, noisy_or
from coopquery.matching import MatchResult
from coopquery.scene import QuerySet


def qset(agent_id, positions, conf, gt=None):
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    n = len(positions)
    return QuerySet(agent_id, positions, np.ones((n, 4)) / 2, np.asarray(conf, dtype=float).reshape(n),
                    np.tile([4.0, 2.0, 1.6], (n, 1)), gt)


def test_no_coops_is_identity():
    ego = qset(0, [[0, 0, 0], [5, 5, 0]], [0.7, 0.4], [3, 8])
    dets = fuse(ego, [], [])
    assert len(dets) == 2
    np.testing.assert_array_equal(dets[1].position, [5, 5, 0])
    assert dets[0].confidence == 0.7 and dets[0].sources == frozenset({(0, 0)}) and dets[1].gt_object_id == 8


def test_equal_points_noisy_or():
    ego, coop = qset(0, [[1, 2, 0]], [0.8]), qset(1, [[1, 2, 0]], [0.8])
    (d,) = fuse(ego, [coop], [MatchResult.from_pairs([(0, 0, 0.9)], 1, 1)])
    assert d.confidence == pytest.approx(0.96, abs=1e-15)
    np.testing.assert_array_equal(d.position, [1, 2, 0])
    assert d.sources == {(0, 0), (1, 0)}


def test_weighted_mean():
    ego, coop = qset(0, [[0, 0, 0]], [0.5]), qset(1, [[1, 0, 0]], [1.0])
    (d,) = fuse(ego, [coop], [MatchResult.from_pairs([(0, 0, 0.9)], 1, 1)])
    np.testing.assert_allclose(d.position, [2 / 3, 0, 0], atol=1e-15)
    assert d.confidence == 1.0


def test_unmatched_coop_carried_verbatim():
    ego, coop = qset(0, [[0, 0, 0]], [0.5]), qset(1, [[50, 0, 0], [0.1, 0, 0]], [0.6, 0.9], [4, 1])
    dets = fuse(ego, [coop], [MatchResult.from_pairs([(1, 0, 0.9)], 2, 1)])
    assert len(dets) == 2
    np.testing.assert_array_equal(dets[1].position, [50, 0, 0])
    assert dets[1].confidence == 0.6 and dets[1].gt_object_id == 4


def test_cross_agent_merge_and_opt_out():
    ego = qset(0, [[0, 0, 0]], [0.5])
    a, b = qset(1, [[30, 0, 0]], [0.5]), qset(2, [[30.5, 0, 0]], [0.5])
    empty = [MatchResult.from_pairs([], 1, 1), MatchResult.from_pairs([], 1, 1)]
    merged = fuse(ego, [a, b], empty)
    assert len(merged) == 2 and merged[1].sources == {(1, 0), (2, 0)}
    np.testing.assert_allclose(merged[1].position, [30.25, 0, 0])
    assert len(fuse(ego, [a, b], empty, merge_radius=None)) == 3
    far = qset(2, [[32, 0, 0]], [0.5])
    assert len(fuse(ego, [a, far], empty)) == 3


def test_same_agent_never_merged():
    ego = qset(0, [[0, 0, 0]], [0.5])
    a = qset(1, [[30, 0, 0], [30.2, 0, 0]], [0.5, 0.5])
    assert len(fuse(ego, [a], [MatchResult.from_pairs([], 2, 1)])) == 3


def test_index_mismatch():
    ego, coop = qset(0, [[0, 0, 0]], [0.5]), qset(1, [[0, 0, 0]], [0.5])
    with pytest.raises(IndexMismatch):
        fuse(ego, [coop], [])
    with pytest.raises(IndexMismatch):
        fuse(ego, [coop], [MatchResult([(0, 3, 0.5)], set(), set())])


def test_noisy_or_properties():
    assert noisy_or([]) == 0.0
    assert noisy_or([0.3, 0.6]) == pytest.approx(noisy_or([0.6, 0.3]))
    assert noisy_or([0.3, 0.6]) >= 0.6


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection(np.zeros(3), np.ones(3), 0.5, frozenset())
    with pytest.raises(ValueError):
        Detection(np.zeros(3), np.ones(3), 1.5, frozenset({(0, 0)}))
    rec = Detection(np.zeros(3), np.ones(3), 0.5, frozenset({(1, 2), (0, 0)}), 7).to_record()
    assert rec["sources"] == [[0, 0], [1, 2]] and rec["label"] == 7
