import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from rstn.estimator import RSTNSegmenter, StagewiseSegmenter, check_masks, check_volumes
from rstn.volume import Volume

from helpers import blob_case

SMALL = dict(phase1_steps=6, phase2_steps=3, margin=2, arch="tiny", max_iter=2)


@pytest.fixture(scope="module")
def data():
    cases = [blob_case(s) for s in range(2)]
    return [c[0].data for c in cases], [c[1].data for c in cases]


def test_get_params_and_clone():
    est = RSTNSegmenter(T=2, thr=0.95)
    p = est.get_params()
    assert p["T"] == 2 and p["thr"] == 0.95 and p["margin"] == 20
    c = clone(est)
    assert c.get_params() == p and c is not est
    est.set_params(seed=4)
    assert est.seed == 4


@pytest.mark.parametrize("cls", [RSTNSegmenter, StagewiseSegmenter])
def test_fit_predict_score(cls, data):
    X, y = data
    est = cls(**SMALL).fit(X, y)
    pred = est.predict(X)
    assert len(pred) == 2 and pred[0].shape == X[0].shape and pred[0].dtype == np.uint8
    assert 0.0 <= est.score(X, y) <= 1.0
    assert len(est.train_log_.records) == 3 * 9


def test_stagewise_has_no_saliency(data):
    est = StagewiseSegmenter(**SMALL).fit(*data)
    assert all(b.saliency is None for b in est.bundles_.values())


def test_same_seed_same_prediction(data):
    a = RSTNSegmenter(**SMALL, seed=1).fit(*data).predict(data[0])
    b = RSTNSegmenter(**SMALL, seed=1).fit(*data).predict(data[0])
    assert all(np.array_equal(x, z) for x, z in zip(a, b))


def test_not_fitted(data):
    with pytest.raises(NotFittedError):
        RSTNSegmenter().predict(data[0])


def test_bad_arch(data):
    with pytest.raises(ValueError, match="arch"):
        RSTNSegmenter(arch="huge").fit(*data)


class TestValidation:
    def test_single_array_wrapped(self):
        v = check_volumes(np.zeros((4, 4, 4)))
        assert len(v) == 1 and isinstance(v[0], Volume)

    def test_wrong_rank(self):
        with pytest.raises(ValueError, match="dimensions"):
            check_volumes([np.zeros((4, 4))])

    def test_nan(self):
        with pytest.raises(ValueError, match="non-finite"):
            check_volumes([np.full((4, 4, 4), np.nan)])

    def test_empty(self):
        with pytest.raises(ValueError):
            check_volumes([])

    def test_mask_shape(self):
        vols = check_volumes([np.zeros((4, 4, 4))])
        with pytest.raises(ValueError, match="shape"):
            check_masks([np.ones((4, 4, 5))], vols)

    def test_mask_count(self):
        vols = check_volumes([np.zeros((4, 4, 4))] * 2)
        with pytest.raises(ValueError):
            check_masks([np.ones((4, 4, 4))], vols)

    def test_no_foreground(self):
        vols = check_volumes([np.zeros((4, 4, 4))])
        with pytest.raises(ValueError, match="foreground"):
            check_masks([np.zeros((4, 4, 4))], vols)
