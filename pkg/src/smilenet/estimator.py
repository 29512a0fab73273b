"""scikit-learn compatible wrappers around the network and the mouth crop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import dataio
from .network import ArchitectureConfig, build
from .train import INIT_STREAM, DataSplits, Split, TrainConfig, train


def _as_images(X, height=None, width=None):
    """Accept (n, H, W), (n, 1, H, W) or flat (n, H*W) input; return (n, 1, H, W)."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim == 2:
        if height is None or width is None or X.shape[1] != height * width:
            raise ValueError(
                f"flat input of width {X.shape[1]} needs image_shape with H*W == {X.shape[1]}")
        X = X.reshape(-1, height, width)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != 1:
        raise ValueError(f"expected grayscale images, got array of shape {X.shape}")
    return X


class SmileNetClassifier(ClassifierMixin, BaseEstimator):
    """Binary CNN classifier trained with momentum SGD.

    ``X`` holds grayscale images in [0, 1] as ``(n, H, W)``, ``(n, 1, H, W)``
    or, with ``image_shape`` set, flattened ``(n, H*W)`` rows. The two
    classes in ``y`` may be any labels; the larger one (after sorting) maps
    to network output 1.

    If ``X_val``/``y_val`` are passed to :meth:`fit`, validation accuracy
    is tracked in ``report_``; the returned model is always the last epoch.
    """

    def __init__(self, num_convolutions=1, num_hidden_layers=1, units_per_hidden_layer=100,
                 dropout_rate=0.5, learning_rate=0.01, momentum=0.9, batch_size=500, epochs=50,
                 eval_every=1, image_shape=None, random_state=0):
        self.num_convolutions = num_convolutions
        self.num_hidden_layers = num_hidden_layers
        self.units_per_hidden_layer = units_per_hidden_layer
        self.dropout_rate = dropout_rate
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.eval_every = eval_every
        self.image_shape = image_shape
        self.random_state = random_state

    def _shape(self):
        return (None, None) if self.image_shape is None else tuple(self.image_shape)

    def fit(self, X, y, X_val=None, y_val=None):
        X_flat = X if np.ndim(X) == 2 else np.reshape(X, (len(X), -1))
        check_X_y(X_flat, y, dtype=np.float64)
        images = _as_images(X, *self._shape())
        self.classes_ = unique_labels(y)
        if len(self.classes_) != 2:
            raise ValueError(f"SmileNetClassifier is binary; got classes {self.classes_!r}")
        codes = np.searchsorted(self.classes_, y)
        seed = 0 if self.random_state is None else int(self.random_state)
        config = ArchitectureConfig(
            int(self.num_convolutions), int(self.num_hidden_layers),
            int(self.units_per_hidden_layer), float(self.dropout_rate),
            images.shape[2], images.shape[3])
        self.network_ = build(config, seed=[seed, INIT_STREAM])
        train_split = Split(images, codes)
        if X_val is not None:
            val = Split(_as_images(X_val, *self._shape()), np.searchsorted(self.classes_, y_val))
        else:
            val = train_split
        cfg = TrainConfig(self.learning_rate, self.momentum, self.batch_size, self.epochs, seed,
                          self.eval_every)
        _, self.report_ = train(self.network_, DataSplits(train_split, val, val), cfg)
        self.n_features_in_ = X_flat.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        images = _as_images(X, *self._shape())
        out = [self.network_.predict_proba(images[i:i + 500]) for i in range(0, len(images), 500)]
        return np.concatenate(out)

    def predict(self, X):
        proba = self.predict_proba(X)
        # argmax keeps the first class on exact ties
        return self.classes_[np.argmax(proba, axis=1)]


class MouthCropper(TransformerMixin, BaseEstimator):
    """Crop every image to one shared mouth box and resize it.

    ``fit`` takes the per-image landmark lists (``landmarks``) and computes
    ``box_``; ``transform`` applies the same crop to every image.
    ``mouth_indices=None`` skips cropping and only resizes the full frame.
    """

    def __init__(self, mouth_indices=None, margin=0.0, height=69, width=85):
        self.mouth_indices = mouth_indices
        self.margin = margin
        self.height = height
        self.width = width

    def fit(self, X, y=None, landmarks=None):
        images = np.asarray(X, dtype=np.float64)
        if images.ndim != 3:
            raise ValueError(f"expected (n, H, W) images, got shape {images.shape}")
        if self.mouth_indices is None:
            self.box_ = dataio.full_box(images[0])
        else:
            if landmarks is None:
                raise ValueError("fit needs landmarks when mouth_indices is set")
            records = [dataio.Record(f"{i}", 0, landmarks=tuple(map(tuple, pts)))
                       for i, pts in enumerate(landmarks)]
            self.box_ = dataio.global_mouth_box(records, list(self.mouth_indices), self.margin,
                                                images.shape[1:])
        self.input_shape_ = images.shape[1:]
        return self

    def transform(self, X):
        check_is_fitted(self, "box_")
        images = np.asarray(X, dtype=np.float64)
        if images.shape[1:] != self.input_shape_:
            raise ValueError(f"fitted on {self.input_shape_} images, got {images.shape[1:]}")
        return np.stack([dataio.crop_resize(im, self.box_, self.height, self.width) for im in images])
