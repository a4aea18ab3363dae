"""Scikit-learn style estimator wrapping the model builders and trainer."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .errors import ConfigError, ShapeError
from .gradcam import explain as _explain
from .metrics import score_batch
from .model import build_densenet_mini, build_resnet_mini
from .train import TrainConfig, train

_BUILDERS = {"resnet-mini": build_resnet_mini,
             "densenet-mini": build_densenet_mini}


def _as_image_stack(X):
    """Accept (n,c,h,w) or (n,h,w); return float32 (n,c,h,w)."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ShapeError("X must be (n,c,h,w) or (n,h,w) image data",
                         got=X.shape)
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    return X


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """Small CNN image classifier with fit/predict and Grad-CAM explain.

    Expects raw [0,255] pixel arrays shaped (n,c,h,w) (or (n,h,w) for
    grayscale). Training follows the built-in recipe: Adam, LR reduction
    on validation-loss plateaus, early stopping, best-weight restore. A
    validation split is carved from the fit data per class with the
    configured seed.
    """

    def __init__(self, arch="resnet-mini", epochs=50, batch_size=32,
                 lr=1e-4, seed=0, augment=True, val_fraction=0.15):
        self.arch = arch
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.augment = augment
        self.val_fraction = val_fraction

    def fit(self, X, y):
        if self.arch not in _BUILDERS:
            raise ConfigError(
                f"arch must be one of {sorted(_BUILDERS)}, got {self.arch!r}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(
                f"val_fraction must be in (0,1), got {self.val_fraction}")
        X = _as_image_stack(X)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ShapeError("y must be one label per sample",
                             got=y.shape, expected=(len(X),))
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit")
        codes = np.searchsorted(self.classes_, y)

        rng_seed = self.seed & 0xFFFFFFFFFFFFFFFF
        val_idx = []
        for label in range(len(self.classes_)):
            members = np.flatnonzero(codes == label)
            order = np.random.default_rng(
                (rng_seed, label)).permutation(len(members))
            n_val = int(self.val_fraction * len(members))
            val_idx.extend(members[order[:n_val]])
        if not val_idx:  # tiny datasets: hold out one sample anyway
            val_idx = [int(np.random.default_rng(rng_seed).integers(len(X)))]
        val_mask = np.zeros(len(X), dtype=bool)
        val_mask[val_idx] = True
        if val_mask.all():
            raise ConfigError("validation split consumed every sample")

        model = _BUILDERS[self.arch](num_classes=len(self.classes_),
                                     input_shape=X.shape[1:],
                                     seed=self.seed)
        config = TrainConfig(lr0=self.lr, batch_size=self.batch_size,
                             max_epochs=self.epochs, seed=self.seed,
                             augment=self.augment)
        self.model_, self.log_ = train(
            model, (X[~val_mask], codes[~val_mask]),
            (X[val_mask], codes[val_mask]), config)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this CNNClassifier has not been fitted")

    def predict_proba(self, X):
        self._check_fitted()
        X = _as_image_stack(X) * np.float32(1 / 255)
        return score_batch(self.model_, X, self.batch_size)

    def predict(self, X):
        self._check_fitted()
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def explain(self, image, class_index=None, alpha=0.4):
        """Grad-CAM (Heatmap, OverlayImage) for one raw [0,255] image."""
        self._check_fitted()
        return _explain(self.model_, image, class_index=class_index,
                        alpha=alpha)
