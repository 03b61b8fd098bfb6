"""scikit-learn compatible estimators for pre-training, fine-tuning and joint prediction.

Locations are passed as ``X`` arrays of shape ``(n, 2)`` holding longitude and
latitude in radians. The joint :class:`GeoPriorClassifier` takes
``X = [lon, lat, feature_0, ..., feature_{D-1}]``.
"""

from __future__ import annotations

import copy

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .autodiff import Adam, Linear, Tensor
from .data import Dataset, minibatches
from .errors import ConfigError
from .location import LocationEncoder, PositionalEncodingConfig, as_lonlat
from .objectives import ContrastiveConfig, objective
from .supervised import (
    combine_posteriors,
    finetune_location,
    image_posterior,
    init_class_embedding,
    location_posterior,
    train_classifier_head,
)


def check_lonlat(X) -> np.ndarray:
    """Validate an ``(n, 2)`` radian lon/lat array and wrap its longitudes."""
    X = check_array(X, dtype=np.float64)
    if X.shape[1] != 2:
        raise ConfigError(f"expected 2 columns (lon, lat), got {X.shape[1]}")
    return as_lonlat(X)


def _rng(random_state) -> np.random.Generator:
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)


class CSPEncoder(TransformerMixin, BaseEstimator):
    """Location encoder pre-trained against frozen image features.

    ``fit(X, features)`` optimises the chosen objective; ``transform(X)``
    returns eval-mode embeddings. ``objective="none"`` only initialises the
    weights, which gives the randomly initialised encoder of a
    supervised-only baseline.
    """

    def __init__(
        self,
        encoding="grid",
        n_scales=64,
        min_radius=0.01,
        max_radius=1.0,
        hidden_layers=1,
        hidden_units=512,
        embed_dim=512,
        dropout=0.5,
        activation="leaky_relu",
        objective="mc",
        components="BLD",
        alpha1=1.0,
        alpha2=1.0,
        beta1=1.0,
        beta2=1.0,
        tau0=1.0,
        tau1=1.0,
        tau2=1.0,
        n_neg_locations=1,
        learning_rate=2e-4,
        epochs=100,
        batch_size=64,
        random_state=None,
    ):
        self.encoding = encoding
        self.n_scales = n_scales
        self.min_radius = min_radius
        self.max_radius = max_radius
        self.hidden_layers = hidden_layers
        self.hidden_units = hidden_units
        self.embed_dim = embed_dim
        self.dropout = dropout
        self.activation = activation
        self.objective = objective
        self.components = components
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.beta1 = beta1
        self.beta2 = beta2
        self.tau0 = tau0
        self.tau1 = tau1
        self.tau2 = tau2
        self.n_neg_locations = n_neg_locations
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def contrastive_config(self) -> ContrastiveConfig:
        return ContrastiveConfig(
            self.objective,
            self.components,
            self.alpha1,
            self.alpha2,
            self.beta1,
            self.beta2,
            self.tau0,
            self.tau1,
            self.tau2,
            self.n_neg_locations,
        )

    def init_encoder(self, rng: np.random.Generator) -> LocationEncoder:
        pe = PositionalEncodingConfig(self.encoding, self.n_scales, self.min_radius, self.max_radius)
        return LocationEncoder.init(
            rng,
            pe,
            hidden_layers=self.hidden_layers,
            hidden_units=self.hidden_units,
            embed_dim=self.embed_dim,
            dropout=self.dropout,
            activation=self.activation,
        )

    def fit(self, X, y=None):
        rng = _rng(self.random_state)
        self.encoder_ = self.init_encoder(rng)
        self.head_ = None
        self.loss_curve_ = []
        self.n_features_in_ = 2
        if self.objective == "none":
            return self
        if y is None:
            raise ConfigError("pre-training needs the frozen image features as y")
        X, y = check_X_y(X, y, dtype=np.float64, multi_output=True)
        if y.ndim != 2:
            raise ConfigError("image features must be a 2-D array")
        data = Dataset(check_lonlat(X), y)
        cfg = self.contrastive_config()
        if cfg.loss == "mse":
            self.head_ = Linear.init(self.embed_dim, data.dim, rng)
        else:
            self.head_ = Linear.init(data.dim, self.embed_dim, rng)
        self.feature_dim_ = data.dim
        opt = Adam(self.encoder_.parameters() + self.head_.parameters(), self.learning_rate)
        for _ in range(self.epochs):
            losses = [
                opt.minimize(lambda: objective(batch, self.encoder_, self.head_, cfg, rng))
                for batch in minibatches(data, self.batch_size, rng)
            ]
            self.loss_curve_.append(float(np.mean(losses)))
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "encoder_")
        return self.encoder_.forward(check_lonlat(X), train=False).data


class PresenceAbsenceClassifier(ClassifierMixin, BaseEstimator):
    """Location-only classifier fine-tuned with the presence-absence loss.

    ``encoder`` is a :class:`CSPEncoder` or a bare :class:`LocationEncoder`.
    A fitted estimator or a bare encoder supplies the starting weights (they
    are copied, not modified); an unfitted estimator is initialised at random
    from its structural parameters.
    """

    def __init__(
        self,
        encoder=None,
        n_classes=None,
        pos_weight=1.0,
        learning_rate=5e-4,
        epochs=30,
        batch_size=32,
        random_state=None,
    ):
        self.encoder = encoder
        self.n_classes = n_classes
        self.pos_weight = pos_weight
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        rng = _rng(self.random_state)
        n_classes = self.n_classes or int(y.max()) + 1
        template = self.encoder if self.encoder is not None else CSPEncoder(objective="none")
        if isinstance(template, LocationEncoder):
            self.encoder_ = template.copy()
        elif hasattr(template, "encoder_"):
            self.encoder_ = template.encoder_.copy()
        else:
            self.encoder_ = template.init_encoder(rng)
        self.class_embedding_ = init_class_embedding(self.encoder_.embed_dim, n_classes, rng)
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = 2
        data = Dataset(check_lonlat(X), np.zeros((len(X), 0)), y, n_classes)
        self.loss_curve_ = finetune_location(
            self.encoder_,
            self.class_embedding_,
            data,
            rng,
            pos_weight=self.pos_weight,
            lr=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
        )
        return self

    def presence_proba(self, X) -> np.ndarray:
        """Unnormalised per-class presence probabilities ``sigmoid(e(x) . T[:, y])``."""
        check_is_fitted(self, "encoder_")
        return location_posterior(check_lonlat(X), self.encoder_, self.class_embedding_)

    def predict_proba(self, X) -> np.ndarray:
        scores = self.presence_proba(X)
        return scores / scores.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.presence_proba(X), axis=1)


class LinearProbeClassifier(ClassifierMixin, BaseEstimator):
    """Softmax-regression head over frozen image features."""

    def __init__(self, n_classes=None, learning_rate=1e-3, epochs=200, batch_size=64, random_state=None):
        self.n_classes = n_classes
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        rng = _rng(self.random_state)
        n_classes = self.n_classes or int(y.max()) + 1
        self.head_ = Linear.init(X.shape[1], n_classes, rng)
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = X.shape[1]
        self.loss_curve_ = train_classifier_head(
            X, y, self.head_, rng, lr=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size
        )
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "head_")
        return image_posterior(check_array(X, dtype=np.float64), self.head_)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


class GeoPriorClassifier(ClassifierMixin, BaseEstimator):
    """Combine location and image posteriors assuming conditional independence given the class."""

    def __init__(self, location_model=None, image_model=None):
        self.location_model = location_model
        self.image_model = image_model

    @staticmethod
    def split(X) -> tuple[np.ndarray, np.ndarray]:
        X = check_array(X, dtype=np.float64)
        if X.shape[1] < 3:
            raise ConfigError("X needs lon, lat and at least one feature column")
        return X[:, :2], X[:, 2:]

    def fit(self, X, y):
        locs, feats = self.split(X)
        loc_model = self.location_model if self.location_model is not None else PresenceAbsenceClassifier()
        img_model = self.image_model if self.image_model is not None else LinearProbeClassifier()
        # deepcopy, not clone: clone would discard a pre-trained encoder parameter
        self.location_model_ = copy.deepcopy(loc_model).fit(locs, y)
        self.image_model_ = copy.deepcopy(img_model).fit(feats, y)
        self.classes_ = self.location_model_.classes_
        self.n_features_in_ = 2 + feats.shape[1]
        return self

    def _posteriors(self, X):
        check_is_fitted(self, "location_model_")
        locs, feats = self.split(X)
        return self.location_model_.presence_proba(locs), self.image_model_.predict_proba(feats)

    def predict(self, X) -> np.ndarray:
        return combine_posteriors(*self._posteriors(X))

    def predict_proba(self, X) -> np.ndarray:
        loc_post, img_post = self._posteriors(X)
        joint = loc_post * img_post
        return joint / joint.sum(axis=1, keepdims=True)

    def predict_location(self, X) -> np.ndarray:
        return np.argmax(self._posteriors(X)[0], axis=1)

    def predict_image(self, X) -> np.ndarray:
        return np.argmax(self._posteriors(X)[1], axis=1)
