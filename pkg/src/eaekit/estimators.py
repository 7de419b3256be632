"""scikit-learn compatible wrappers around the training loops and the logit perturbation."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .attacks import AttackSpec
from .data import Dataset
from .eae import delta_batch, partition_seeds, threshold_from_partition
from .nn import _softmax_rows, build_model
from .train import TrainSpec, train

_ATTACK_KIND = {"fgsm-at": "fgsm", "fast-at": "fast-step", "pgd-at": "pgd"}


def _check_unit_range(X):
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("inputs must lie in [0, 1]")


class AdversarialTrainingClassifier(ClassifierMixin, BaseEstimator):
    """Classifier trained with one of ``normal``, ``eae``, ``fgsm-at``, ``fast-at`` or ``pgd-at``.

    ``X`` may be 2-D (flattened) or already shaped per example; set
    ``input_shape`` to reshape flat rows, e.g. ``(3, 32, 32)`` for
    ``cnn-small``. Attack-based methods use ``epsilon``, ``alpha`` and
    ``iterations``; ``alpha`` defaults to ``epsilon / 2`` for PGD and to
    ``1.25 * epsilon`` for the Fast-AT step.

    Attributes set by ``fit``: ``model_``, ``classes_``, ``instrumentation_``,
    ``history_``, ``n_features_in_``.
    """

    def __init__(
        self,
        method="eae",
        preset="mlp-small",
        epochs=10,
        batch_size=32,
        clr_min=0.0,
        clr_max=0.05,
        gamma=3.0,
        epsilon=16 / 255,
        alpha=None,
        iterations=7,
        input_shape=None,
        random_state=0,
    ):
        self.method = method
        self.preset = preset
        self.epochs = epochs
        self.batch_size = batch_size
        self.clr_min = clr_min
        self.clr_max = clr_max
        self.gamma = gamma
        self.epsilon = epsilon
        self.alpha = alpha
        self.iterations = iterations
        self.input_shape = input_shape
        self.random_state = random_state

    def _shape(self, X):
        if self.input_shape is not None:
            return X.reshape(len(X), *self.input_shape)
        return X

    def _train_spec(self):
        attack = None
        if self.method in _ATTACK_KIND:
            kind = _ATTACK_KIND[self.method]
            alpha = self.alpha
            if alpha is None and kind == "pgd":
                alpha = self.epsilon / 2
            elif alpha is None and kind == "fast-step":
                alpha = min(1.0, 1.25 * self.epsilon)
            attack = AttackSpec(
                kind,
                self.epsilon,
                alpha,
                self.iterations if kind == "pgd" else 1,
                random_start=kind == "pgd",
                seed=self.random_state,
            )
        return TrainSpec(
            self.method,
            self.epochs,
            self.batch_size,
            self.clr_min,
            self.clr_max,
            gamma=self.gamma if self.method == "eae" else None,
            attack=attack,
            seed=self.random_state,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        _check_unit_range(X)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        X = self._shape(X)
        self.model_ = build_model(self.preset, X.shape[1:], len(self.classes_), seed=self.random_state)
        data = Dataset(X, y_idx, len(self.classes_))
        _, self.instrumentation_, self.history_ = train(self.model_, data, self._train_spec())
        return self

    def decision_function(self, X):
        """Raw logits, one column per class."""
        check_is_fitted(self, "model_")
        X = self._shape(check_array(X, allow_nd=True, dtype=np.float64))
        return self.model_.logits(X)

    def predict_proba(self, X):
        return _softmax_rows(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


class LogitPerturber(TransformerMixin, BaseEstimator):
    """Stateless transformer applying the top-2 equaliser to logit rows with gap below ``gamma``."""

    def __init__(self, gamma=3.0):
        self.gamma = gamma

    def fit(self, Z, y=None):
        Z = check_array(Z, dtype=np.float64)
        if Z.shape[1] < 2:
            raise ValueError("need at least two logit columns")
        self.n_features_in_ = Z.shape[1]
        return self

    def transform(self, Z):
        check_is_fitted(self, "n_features_in_")
        Z = check_array(Z, dtype=np.float64)
        if Z.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} logit columns, got {Z.shape[1]}")
        delta, _ = delta_batch(Z, self.gamma)
        return Z + delta


class SeedThresholdSelector(BaseEstimator):
    """Estimate the gating threshold from a fitted classifier.

    ``fit(X, y)`` attacks every correctly classified example (FGSM at
    ``epsilon`` by default) and sets ``gamma_`` to the mean logit difference of the
    examples that flipped. ``partition_`` keeps the full split.
    """

    def __init__(self, estimator, epsilon=0.01, attack="fgsm", alpha=None, iterations=1, random_state=0):
        self.estimator = estimator
        self.epsilon = epsilon
        self.attack = attack
        self.alpha = alpha
        self.iterations = iterations
        self.random_state = random_state

    def fit(self, X, y):
        check_is_fitted(self.estimator, "model_")
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        est = self.estimator
        if not np.isin(y, est.classes_).all():
            raise ValueError("y contains labels the estimator was not fitted on")
        labels = np.searchsorted(est.classes_, y)
        data = Dataset(est._shape(X), labels, len(est.classes_))
        spec = AttackSpec(self.attack, self.epsilon, self.alpha, self.iterations, seed=self.random_state)
        self.partition_ = partition_seeds(est.model_, data, spec)
        self.gamma_ = threshold_from_partition(self.partition_)
        return self
