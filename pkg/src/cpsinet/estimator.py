"""scikit-learn style wrappers around phantom simulation and network training."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .metrics import psnr
from .network import ModelConfig
from .physics import simulate_swi_phase
from .training import Trainer, TrainRunConfig, reconstruct
from .volume import Volume

__all__ = ["SWIPhaseSimulator", "QSMReconstructor"]


def _check_volumes(X, name: str = "X") -> np.ndarray:
    """Validate a stack of 3D volumes shaped (n_samples, D, H, W)."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    if X.ndim != 4:
        raise ValueError(f"{name} must be shaped (n_samples, D, H, W), got {X.shape}")
    return X


class SWIPhaseSimulator(TransformerMixin, BaseEstimator):
    """Maps susceptibility volumes (ppm) to high-pass filtered phase (radians)."""

    def __init__(self, noise_sigma=0.0, filter_width=0.25, b0_axis=0, voxel_size=(1.0, 1.0, 1.0),
                 random_state=0):
        self.noise_sigma = noise_sigma
        self.filter_width = filter_width
        self.b0_axis = b0_axis
        self.voxel_size = voxel_size
        self.random_state = random_state

    def fit(self, X, y=None):
        _check_volumes(X)
        return self

    def transform(self, X):
        X = _check_volumes(X)
        out = []
        for i, chi in enumerate(X):
            seed = int(np.random.SeedSequence([self.random_state, i]).generate_state(1)[0])
            v = simulate_swi_phase(Volume(chi, self.voxel_size, "ppm"), self.noise_sigma, seed,
                                   self.filter_width, self.b0_axis)
            out.append(v.data)
        return np.stack(out)


class QSMReconstructor(BaseEstimator):
    """Trains the network on (phase, susceptibility) volume pairs and reconstructs new ones.

    ``X`` holds HP-filtered phase volumes in radians, ``y`` the matching
    susceptibility maps in ppm, both shaped ``(n_samples, D, H, W)``.
    """

    def __init__(self, variant="full", widths=(6, 12, 24), slope=0.1, lr=1e-3, steps=100,
                 batch_size=4, patch=16, stride=8, per_voxel_loss=True, random_state=0):
        self.variant = variant
        self.widths = widths
        self.slope = slope
        self.lr = lr
        self.steps = steps
        self.batch_size = batch_size
        self.patch = patch
        self.stride = stride
        self.per_voxel_loss = per_voxel_loss
        self.random_state = random_state

    def _run_config(self) -> TrainRunConfig:
        model = ModelConfig(self.variant, tuple(self.widths), self.slope, self.random_state)
        return TrainRunConfig(model=model, lr=self.lr, batch_size=self.batch_size,
                              steps=self.steps, patch=self.patch, stride=self.stride,
                              seed=self.random_state, per_voxel_loss=self.per_voxel_loss)

    def fit(self, X, y):
        X, y = _check_volumes(X), _check_volumes(y, "y")
        if X.shape != y.shape:
            raise ValueError(f"X {X.shape} and y {y.shape} differ in shape")
        run = self._run_config()
        pairs = [(Volume(a, unit="radians"), Volume(b, unit="ppm")) for a, b in zip(X, y)]
        trainer = Trainer(run, pairs)
        trainer.fit()
        self.run_ = run
        self.params_ = trainer.params
        self.loss_curve_ = list(trainer.losses)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = _check_volumes(X)
        return np.stack([reconstruct(self.params_, self.run_, Volume(x, unit="radians")).data
                         for x in X])

    def score(self, X, y):
        """Mean PSNR (dB) of the reconstructions against ``y``."""
        y = _check_volumes(y, "y")
        return float(np.mean([psnr(r, t) for r, t in zip(self.predict(X), y)]))
