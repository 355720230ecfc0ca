"""scikit-learn style classifier wrapping the EATFormer builder and training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted

from .data import pixels_to_float
from .errors import DataError
from .model import build_variant, get_variant
from .tensor import no_grad, softmax
from .training import fit


def check_images(X) -> np.ndarray:
    """Validate an (N, 3, H, W) image batch; uint8 pixels are mapped to [-1, 1]."""
    raw = np.asarray(X)
    if raw.dtype == np.uint8:
        raw = pixels_to_float(raw)
    X = check_array(raw, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 4 or X.shape[1] != 3:
        raise DataError(f"expected images of shape (N, 3, H, W), got {X.shape}")
    return X


class EATFormerClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier over an EATFormer variant.

    ``variant`` names a built-in recipe; the remaining architecture keywords
    override its fields when not None. The class count is taken from ``y``.
    """

    def __init__(self, variant="desk", epochs=20, batch_size=50, lr=2e-3, weight_decay=5e-2, seed=0,
                 target_accuracy=None, norm=None, split_ratio=None, ffn_activation=None, use_trh=False,
                 window=None):
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed
        self.target_accuracy = target_accuracy
        self.norm = norm
        self.split_ratio = split_ratio
        self.ffn_activation = ffn_activation
        self.use_trh = use_trh
        self.window = window

    def _spec(self, num_classes: int):
        overrides = {"num_classes": num_classes, "use_trh": bool(self.use_trh), "task_dims": ()}
        for key in ("norm", "split_ratio", "ffn_activation", "window"):
            value = getattr(self, key)
            if value is not None:
                overrides[key] = value
        return get_variant(self.variant).replace(**overrides).validate()

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise DataError(f"{X.shape[0]} images but y has shape {y.shape}")
        encoder = LabelEncoder()
        labels = encoder.fit_transform(y)
        self.classes_ = encoder.classes_
        self.model_ = build_variant(self._spec(len(self.classes_)), self.seed)
        self.history_ = fit(self.model_, X, labels, self.epochs, self.batch_size, self.lr, self.weight_decay,
                            self.seed, self.target_accuracy)
        self.model_.eval()
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X)
        self.model_.eval()
        with no_grad():
            return softmax(self.model_(X), axis=1).data

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
