import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from neuflow.data import generate_synthetic
from neuflow.estimator import NeuFlowEstimator, check_flow_targets, check_image_pairs


def to_arrays(samples):
    X = np.stack([np.stack([s.img1.permute(1, 2, 0).numpy(), s.img2.permute(1, 2, 0).numpy()])
                  for s in samples])
    y = np.stack([s.flow.permute(1, 2, 0).numpy() for s in samples])
    for i, s in enumerate(samples):
        y[i][~s.valid.numpy()] = np.nan
    return X, y


@pytest.fixture(scope="module")
def problem():
    return to_arrays(generate_synthetic(3, 4, 32, "translation"))


class TestValidation:
    def test_uint8_rescaled(self):
        X = np.zeros((1, 2, 4, 5, 3), np.uint8)
        X[..., 0] = 255
        out = check_image_pairs(X)
        assert out.shape == (1, 2, 3, 4, 5)
        assert out[0, 0, 0].eq(1).all() and out[0, 0, 1].eq(-1).all()

    def test_single_pair_promoted(self):
        assert check_image_pairs(np.zeros((2, 4, 4, 3), np.float32)).shape == (1, 2, 3, 4, 4)

    @pytest.mark.parametrize(
        "X",
        [
            np.zeros((1, 3, 4, 4, 3)),
            np.zeros((1, 2, 4, 4, 1)),
            np.zeros((0, 2, 4, 4, 3)),
            np.full((1, 2, 4, 4, 3), 2.0),
            np.full((1, 2, 4, 4, 3), np.nan),
            np.zeros((1, 2, 4, 4, 3), np.int64),
        ],
    )
    def test_bad_images(self, X):
        with pytest.raises(ValueError):
            check_image_pairs(X)

    def test_nan_marks_invalid(self):
        y = np.zeros((1, 2, 3, 2), np.float32)
        y[0, 1, 2, 0] = np.nan
        flow, valid = check_flow_targets(y, 1, (2, 3))
        assert flow.shape == (1, 2, 2, 3) and not valid[0, 1, 2] and valid.sum() == 5

    def test_bad_targets(self):
        with pytest.raises(ValueError):
            check_flow_targets(np.zeros((1, 2, 3, 2)), 1, (3, 3))
        with pytest.raises(ValueError):
            check_flow_targets(np.full((1, 2, 3, 2), np.inf), 1, (2, 3))


class TestEstimator:
    def test_params_and_clone(self):
        est = NeuFlowEstimator(steps=5, lr=1e-3, config_overrides={"mask_width": 12})
        params = est.get_params()
        assert params["steps"] == 5 and params["config_overrides"] == {"mask_width": 12}
        twin = clone(est)
        assert twin.get_params() == params and twin is not est

    def test_predict_before_fit(self, problem):
        with pytest.raises(NotFittedError):
            NeuFlowEstimator().predict(problem[0])

    def test_fit_predict_score(self, problem):
        X, y = problem
        est = NeuFlowEstimator(steps=3, batch_size=2, device="cpu").fit(X, y)
        assert est.n_pairs_fit_ == 4 and len(est.history_) == 3
        pred = est.predict(X)
        assert pred.shape == (4, 32, 32, 2) and np.isfinite(pred).all()
        score = est.score(X, y)
        assert score < 0
        est.set_params(resolution="eighth")
        assert est.predict(X).shape == (4, 4, 4, 2)
        assert np.isfinite(est.score(X, y))

    def test_bad_preset(self, problem):
        with pytest.raises(ValueError):
            NeuFlowEstimator(preset="huge", steps=1).fit(*problem)

    def test_bad_resolution(self, problem):
        est = NeuFlowEstimator(steps=1, batch_size=2, device="cpu").fit(*problem)
        est.set_params(resolution="half")
        with pytest.raises(ValueError):
            est.predict(problem[0])
