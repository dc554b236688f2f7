from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .. import metrics
from ..core import PlateauConfig, RunConfig
from ..validation import check_images, check_masks
from .models import build_model
from .training import evaluate_segmenter, predict_proba_maps, train_segmenter


class ArtifactSegmenter(BaseEstimator):
    """Binary artifact segmenter with a scikit-learn interface.

    ``fit(X, y)`` takes images (N, H, W, 3) in [0, 1] and binary masks (N, H, W).
    Validation data for the plateau/early-stop schedules is either passed as
    ``validation_data`` or carved from ``X`` using ``validation_fraction``.

    Attributes set by ``fit``: ``model_`` (a :class:`SegModel`), ``history_``.
    """

    def __init__(
        self,
        architecture="double_unet",
        width_scale=1.0,
        optimizer="rmsprop",
        loss="dice_coef_loss",
        learning_rate=1e-4,
        batch_size=8,
        epochs=200,
        plateau_factor=0.1,
        plateau_patience=4,
        early_stop_patience=10,
        validation_fraction=0.1,
        threshold=0.5,
        seed=0,
    ):
        self.architecture = architecture
        self.width_scale = width_scale
        self.optimizer = optimizer
        self.loss = loss
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.plateau_factor = plateau_factor
        self.plateau_patience = plateau_patience
        self.early_stop_patience = early_stop_patience
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.seed = seed

    def run_config(self) -> RunConfig:
        return RunConfig(
            seed=self.seed,
            batch_size=self.batch_size,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            loss=self.loss,
            plateau=PlateauConfig(self.plateau_factor, self.plateau_patience),
            early_stop_patience=self.early_stop_patience,
            model=self.architecture,
            width_scale=self.width_scale,
        )

    @classmethod
    def from_config(cls, config: RunConfig, **kwargs) -> "ArtifactSegmenter":
        return cls(
            architecture=config.model,
            width_scale=config.width_scale,
            optimizer=config.optimizer,
            loss=config.loss,
            learning_rate=config.learning_rate,
            batch_size=config.batch_size,
            epochs=config.epochs,
            plateau_factor=config.plateau.factor,
            plateau_patience=config.plateau.patience,
            early_stop_patience=config.early_stop_patience,
            seed=config.seed,
            **kwargs,
        )

    def fit(self, X, y, validation_data=None):
        X = check_images(X)
        y = check_masks(y, X)
        if validation_data is None:
            n_valid = int(round(len(X) * self.validation_fraction))
            if n_valid == 0:
                Xv, yv = X, y
            else:
                order = np.random.default_rng(self.seed).permutation(len(X))
                Xv, yv = X[order[:n_valid]], y[order[:n_valid]]
                X, y = X[order[n_valid:]], y[order[n_valid:]]
        else:
            Xv = check_images(validation_data[0], "validation images")
            yv = check_masks(validation_data[1], Xv, "validation masks")
        model = build_model(self.architecture, X.shape[1:], self.width_scale, seed=self.seed)
        self.model_, self.history_ = train_segmenter(model, (X, y), (Xv, yv), self.run_config())
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_proba_maps(self.model_, X, self.batch_size)

    def predict(self, X) -> np.ndarray:
        return metrics.binarize(self.predict_proba(X), self.threshold)

    def score(self, X, y) -> float:
        """Average per-image soft IOU."""
        check_is_fitted(self, "model_")
        return evaluate_segmenter(self.model_, (X, y)).avg_test_iou

    def evaluate(self, X, y, iou_thresholds=(0.9, 0.85)) -> metrics.SegMetricsReport:
        check_is_fitted(self, "model_")
        report = evaluate_segmenter(self.model_, (X, y), iou_thresholds, self.batch_size)
        report.optimizer = str(getattr(self.optimizer, "value", self.optimizer))
        return report
