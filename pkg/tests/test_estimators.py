import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from coopquery.caa import CaaParams, caa_match
from coopquery.config import SceneConfig
from coopquery.estimators import ContextAwareMatcher, GreedyRadiusMatcher, HungarianMatcher, QueryLifter
from coopquery.geometry import CameraModel, PixelProposal, RigidTransform, project_point
from coopquery.matching import hungarian_match
from coopquery.scene import NoiseSpec


@pytest.fixture(scope="module")
def frames():
    cfg = SceneConfig()
    return [cfg.frame(s, NoiseSpec(0.5, 0.0)) for s in range(6)]


def test_get_params_and_clone():
    m = HungarianMatcher(reject_threshold=3.0)
    assert m.get_params() == {"reject_threshold": 3.0}
    c = clone(ContextAwareMatcher(tau=0.8, steps=5))
    assert c.get_params()["tau"] == 0.8 and c.get_params()["steps"] == 5
    assert GreedyRadiusMatcher().set_params(radius=1.5).radius == 1.5


def test_baseline_predict_matches_functions(frames):
    m = HungarianMatcher(4.0).fit()
    preds = m.predict(frames)
    for fr, per in zip(frames, preds):
        ref = hungarian_match(fr.coops[0].positions, fr.ego.positions, 4.0)
        assert per[0].pairs == ref.pairs
    assert 0.0 <= m.score(frames) <= 1.0


def test_single_sample_and_tuple_input(frames):
    m = GreedyRadiusMatcher(4.0)
    fr = frames[0]
    assert m.predict(fr)[0][0].pairs == m.predict((fr.ego, fr.coops))[0][0].pairs


def test_invalid_hyperparameters(frames):
    with pytest.raises(ValueError):
        GreedyRadiusMatcher(radius=-1).fit()
    with pytest.raises(ValueError):
        HungarianMatcher(reject_threshold=0).predict(frames)
    with pytest.raises(TypeError):
        GreedyRadiusMatcher().predict([("not", "a sample", "x")])


def test_context_matcher_requires_fit(frames):
    with pytest.raises(NotFittedError):
        ContextAwareMatcher().predict(frames)


def test_context_matcher_fit_and_predict(frames):
    m = ContextAwareMatcher(n_layers=1, steps=3, learning_rate=0.5, batch_size=2).fit(frames)
    assert len(m.loss_curve_) == 3 and m.params_.n_layers == 1
    ref = caa_match(m.params_, frames[0].ego, frames[0].coops, m.tau)
    assert m.predict(frames[:1])[0][0].pairs == ref[0].pairs
    scores = m.predict_scores(frames[:1])[0][0]
    assert scores.shape == (len(frames[0].coops[0]), len(frames[0].ego))


def test_from_params(frames):
    p = CaaParams.init(0, 32)
    m = ContextAwareMatcher.from_params(p, tau=0.2)
    assert m.get_params()["n_layers"] == 0
    m.predict(frames[:2])
    with pytest.raises(ValueError):
        ContextAwareMatcher.from_params(p, tau=1.5).predict(frames[:1])


def test_query_lifter():
    cam = CameraModel.looking([0, 0, 20], 0.0, math.radians(45))
    pts = np.array([[30, 2, 0.8], [45, -6, 0.7], [60, 10, 0.9]])
    rows = []
    for p in pts:
        u, v, d = project_point(cam, p)
        rows.append([u, v, p[2], d])
    rows = np.array(rows)
    for strategy in ("height_derived", "direct_depth"):
        out = QueryLifter(cam, strategy).fit_transform(rows)
        np.testing.assert_allclose(out, pts, atol=1e-9)
    props = [PixelProposal(r[0], r[1], predicted_global_height=r[2]) for r in rows]
    shifted = QueryLifter(cam, agent_from_glb=RigidTransform(np.eye(3), [1, 0, 0])).fit(None).transform(props)
    np.testing.assert_allclose(shifted, pts + [1, 0, 0], atol=1e-9)
    with pytest.raises(NotFittedError):
        QueryLifter(cam).transform(rows)
    with pytest.raises(ValueError):
        QueryLifter(None).fit()
    with pytest.raises(ValueError):
        QueryLifter(cam).fit().transform(np.zeros((2, 3)))
