"""scikit-learn style wrapper around model building and training."""
import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .datagen import Dataset
from .errors import InputError
from .harness import TrainConfig, train
from .layers import UNKNOWN
from .models import ModelConfig, build_model, forward_with_taps, logits


class SubjectConditionedClassifier(ClassifierMixin, BaseEstimator):
    """Classifier whose ``fit``/``predict`` take per-trial subject ids.

    ``X`` is ``(n, features)`` for the MLP or ``(n, channels, time)`` for the
    CNN. Subject ids may be arbitrary hashable labels; at predict time an id
    never seen in ``fit`` (or ``subjects=None``) uses the shared path, which
    only subject-conditioned models support.
    """

    def __init__(self, architecture="mlp", mode="subject_conditioned", hidden=(64, 32), channels=(8, 16),
                 temporal_kernel=9, rank=4, alpha=1.0, activation="elu", epochs=200, batch_size=64, lr=1e-3,
                 weight_decay=0.01, random_state=1):
        self.architecture = architecture
        self.mode = mode
        self.hidden = hidden
        self.channels = channels
        self.temporal_kernel = temporal_kernel
        self.rank = rank
        self.alpha = alpha
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _check_X(self, X, reset):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if reset:
            self.input_shape_ = X.shape[1:]
            self.n_features_in_ = int(np.prod(self.input_shape_))
        elif X.shape[1:] != self.input_shape_:
            raise InputError(f"X has trial shape {X.shape[1:]}, fitted on {self.input_shape_}")
        return X

    def _subject_index(self, subjects, n):
        if subjects is None:
            return np.full(n, UNKNOWN)
        subjects = np.asarray(subjects).reshape(-1)
        if subjects.size != n:
            raise InputError(f"{n} trials but {subjects.size} subject ids")
        lookup = {s: i for i, s in enumerate(self.subjects_.tolist())}
        return np.array([lookup.get(s, UNKNOWN) for s in subjects.tolist()], dtype=np.int64)

    def fit(self, X, y, subjects):
        X = self._check_X(X, reset=True)
        y = np.asarray(y).reshape(-1)
        check_classification_targets(y)
        if y.size != X.shape[0]:
            raise InputError(f"{X.shape[0]} trials but {y.size} labels")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.subjects_, s_idx = np.unique(np.asarray(subjects).reshape(-1), return_inverse=True)
        if s_idx.size != X.shape[0]:
            raise InputError(f"{X.shape[0]} trials but {s_idx.size} subject ids")
        if self.classes_.size < 2:
            raise InputError("need at least two classes")
        cfg = ModelConfig(architecture=self.architecture, mode=self.mode, input_shape=self.input_shape_,
                          n_classes=self.classes_.size, n_subjects=self.subjects_.size, hidden=self.hidden,
                          channels=self.channels, temporal_kernel=self.temporal_kernel, rank=self.rank,
                          alpha=self.alpha, activation=self.activation, seed=self.random_state)
        self.model_ = build_model(cfg)
        data = Dataset(X, y_idx, s_idx, self.subjects_.size, self.classes_.size, self.input_shape_, "train")
        tcfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, seeds=(self.random_state,))
        self.history_ = train(self.model_, data, tcfg, self.random_state)
        return self

    def decision_function(self, X, subjects=None):
        check_is_fitted(self, "model_")
        X = self._check_X(X, reset=False)
        return logits(self.model_, X, self._subject_index(subjects, X.shape[0]))

    def predict_proba(self, X, subjects=None):
        return softmax(self.decision_function(X, subjects), axis=1)

    def predict(self, X, subjects=None):
        return self.classes_[np.argmax(self.decision_function(X, subjects), axis=1)]

    def score(self, X, y, subjects=None, sample_weight=None):
        y = np.asarray(y).reshape(-1)
        return float(np.average(self.predict(X, subjects) == y, weights=sample_weight))

    def transform(self, X, subjects=None):
        """Fused penultimate embeddings (subject-conditioned models only)."""
        check_is_fitted(self, "model_")
        X = self._check_X(X, reset=False)
        _, (_, _, fused) = forward_with_taps(self.model_, X, self._subject_index(subjects, X.shape[0]))
        return fused
