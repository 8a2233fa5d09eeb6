"""Scikit-learn style front door for the potential.

``FramePotentialRegressor`` wraps model construction, training, and
prediction behind the familiar ``fit`` / ``predict`` / ``get_params``
surface so the potential drops into sklearn tooling (clone, grid search,
pipelines operating on lists of frames).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .network import ModelConfig, init_state, predict
from .training import DynamicWeights, TrainConfig, loss, train
from .validation import ensure_frames, ensure_systems, fitted_species


class FramePotentialRegressor(BaseEstimator):
    """Energy/forces/stress regressor over atomic systems.

    Samples are ``LabeledFrame`` objects (for ``fit``) or bare
    ``AtomicSystem`` objects (for ``predict``); the targets ride inside
    the frames, so ``y`` is accepted only for sklearn API compatibility
    and must be None.
    """

    def __init__(self, num_layers=3, hidden_channels=128, num_heads=16,
                 num_basis=32, cutoff=5.0, rope_enabled=True,
                 temporal_enabled=True, lse_enabled=True,
                 lr=5e-4, grad_clip=0.5, epochs=1, batch_size=8,
                 lambda_e=4.0, lambda_f=100.0, dynamic_weights=False,
                 seed=0):
        self.num_layers = num_layers
        self.hidden_channels = hidden_channels
        self.num_heads = num_heads
        self.num_basis = num_basis
        self.cutoff = cutoff
        self.rope_enabled = rope_enabled
        self.temporal_enabled = temporal_enabled
        self.lse_enabled = lse_enabled
        self.lr = lr
        self.grad_clip = grad_clip
        self.epochs = epochs
        self.batch_size = batch_size
        self.lambda_e = lambda_e
        self.lambda_f = lambda_f
        self.dynamic_weights = dynamic_weights
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            num_layers=self.num_layers, hidden_channels=self.hidden_channels,
            num_heads=self.num_heads, num_basis=self.num_basis,
            cutoff=self.cutoff, rope_enabled=self.rope_enabled,
            temporal_enabled=self.temporal_enabled, lse_enabled=self.lse_enabled)

    def _train_config(self) -> TrainConfig:
        dynamic = self.dynamic_weights
        if dynamic is True:
            dynamic = DynamicWeights()
        elif dynamic is False:
            dynamic = None
        elif isinstance(dynamic, dict):
            dynamic = DynamicWeights(**dynamic)
        return TrainConfig(
            lr=self.lr, grad_clip=self.grad_clip, epochs=self.epochs,
            batch_size=self.batch_size, lambda_e=self.lambda_e,
            lambda_f=self.lambda_f, dynamic_weights=dynamic, seed=self.seed)

    def fit(self, X, y=None, val_frames=None, out_dir=None):
        """Train on labeled frames; returns self."""
        if y is not None:
            raise ValueError("targets live inside the frames; pass y=None")
        frames = ensure_frames(X)
        result = train(self._model_config(), self._train_config(), frames,
                       val_frames=val_frames, out_dir=out_dir)
        self.config_ = self._model_config()
        self.state_ = result.state
        self.log_ = result.log
        self.species_seen_ = fitted_species(frames)
        return self

    def warm_start_from(self, config: ModelConfig, state) -> "FramePotentialRegressor":
        """Adopt an existing checkpointed model without training."""
        self.config_ = config
        self.state_ = state
        self.species_seen_ = np.arange(1, 119)
        return self

    def predict(self, X) -> np.ndarray:
        """Total energies (eV), one per system."""
        return np.array([p.energy for p in self.predict_full(X, stress=False)])

    def predict_forces(self, X) -> list:
        """Per-system force arrays (eV/A)."""
        return [p.forces for p in self.predict_full(X, stress=False)]

    def predict_full(self, X, stress=None) -> list:
        """Per-system Prediction objects (energy, forces, stress)."""
        check_is_fitted(self, "state_")
        out = []
        for system in ensure_systems(X):
            wants = stress if stress is not None else system.cell is not None
            out.append(predict(system, self.config_, self.state_,
                               compute_stress=wants))
        return out

    def score(self, X, y=None) -> float:
        """Negative weighted-MAE loss (higher is better, 0 is perfect)."""
        if y is not None:
            raise ValueError("targets live inside the frames; pass y=None")
        frames = ensure_frames(X)
        preds = self.predict_full(frames, stress=False)
        return -loss(preds, frames, self.lambda_e, self.lambda_f)

    def init_only(self) -> "FramePotentialRegressor":
        """Random untrained parameters (for symmetry checks and benches)."""
        self.config_ = self._model_config()
        self.state_ = init_state(self.config_, seed=self.seed)
        self.species_seen_ = np.arange(1, 119)
        return self
