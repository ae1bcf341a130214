import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cpsinet.estimator import QSMReconstructor, SWIPhaseSimulator
from cpsinet.physics import random_phantom_spec, render_phantom


@pytest.fixture(scope="module")
def chi():
    return np.stack([render_phantom(random_phantom_spec((16, 16, 16), seed=s)).data for s in range(3)])


def test_simulator_transform(chi):
    sim = SWIPhaseSimulator(noise_sigma=0.0)
    phase = sim.fit_transform(chi)
    assert phase.shape == chi.shape and phase.dtype == np.float32
    assert np.abs(phase.mean(axis=(2, 3))).max() < 1e-5
    noisy = SWIPhaseSimulator(noise_sigma=0.01, random_state=1).fit_transform(chi)
    again = SWIPhaseSimulator(noise_sigma=0.01, random_state=1).fit_transform(chi)
    assert np.array_equal(noisy, again) and not np.array_equal(noisy, phase)


def test_params_and_clone():
    est = QSMReconstructor(variant="no_mff", steps=3)
    assert est.get_params()["variant"] == "no_mff"
    c = clone(est).set_params(lr=1e-2)
    assert c.lr == 1e-2 and est.lr == 1e-3


def test_fit_predict_score(chi):
    X = SWIPhaseSimulator().fit_transform(chi)
    est = QSMReconstructor(widths=(3, 6, 9), steps=3, batch_size=1, patch=16, stride=16)
    with pytest.raises(NotFittedError):
        est.predict(X)
    est.fit(X, chi)
    assert len(est.loss_curve_) == 3 and est.n_features_in_ == 16 ** 3
    pred = est.predict(X[:1])
    assert pred.shape == (1, 16, 16, 16)
    assert np.isfinite(est.score(X[:1], chi[:1]))


def test_input_validation(chi):
    est = QSMReconstructor(steps=1)
    with pytest.raises(ValueError, match="n_samples, D, H, W"):
        est.fit(chi[0], chi[0])
    with pytest.raises(ValueError, match="differ in shape"):
        est.fit(chi, chi[:2])
    with pytest.raises(ValueError):
        SWIPhaseSimulator().transform(np.full((1, 16, 16, 16), np.nan))
