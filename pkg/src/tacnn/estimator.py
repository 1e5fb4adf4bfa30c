"""scikit-learn compatible wrappers around the network and skeleton transforms."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .augment import MixPolicy, scale_coordinates
from .data import NTU_PARENTS, SkeletonSample
from .errors import InputError
from .model import ModelConfig, TaCNN
from .train import TrainConfig, train_loop


def check_skeletons(X):
    """Normalize skeleton input to a list of ``(persons, C, T, V)`` float32 arrays.

    Accepts a list of :class:`SkeletonSample`, a list of 3-D/4-D arrays, a
    4-D ``(N, C, T, V)`` single-person array, or a 5-D ``(N, M, C, T, V)``
    array in which all-zero persons are padding and are dropped (the first
    person is always kept).
    """
    if isinstance(X, np.ndarray):
        if X.ndim == 4:
            X = X[:, None]
        if X.ndim != 5:
            raise InputError(f"expected a 4-D or 5-D array, got shape {X.shape}")
        out = []
        for sample in X:
            keep = [0] + [m for m in range(1, sample.shape[0]) if np.any(sample[m])]
            out.append(np.asarray(sample[keep], dtype=np.float32))
    else:
        out = []
        for s in X:
            arr = np.asarray(s.data if isinstance(s, SkeletonSample) else s, dtype=np.float32)
            if arr.ndim == 3:
                arr = arr[None]
            out.append(arr)
    if not out:
        raise InputError("no samples")
    shape = out[0].shape[1:]
    for arr in out:
        if arr.ndim != 4 or arr.shape[1:] != shape:
            raise InputError(f"inconsistent sample shape {arr.shape}, expected (M, {shape})")
        if not np.all(np.isfinite(arr)):
            raise InputError("non-finite coordinates")
    return out


def check_targets(y, n_samples, classes=None):
    """Return ``(soft_labels, classes)``; ``y`` is class labels or a probability matrix."""
    y = np.asarray(y)
    if y.shape[0] != n_samples:
        raise InputError(f"{y.shape[0]} targets for {n_samples} samples")
    if y.ndim == 2:
        if np.any(y < 0) or np.any(np.abs(y.sum(axis=1) - 1) > 1e-6):
            raise InputError("soft targets must be nonnegative rows summing to 1")
        return y.astype(np.float32), np.arange(y.shape[1]) if classes is None else classes
    classes = np.unique(y) if classes is None else classes
    idx = np.searchsorted(classes, y)
    if np.any(idx >= len(classes)) or np.any(classes[np.minimum(idx, len(classes) - 1)] != y):
        raise InputError("target contains unseen classes")
    soft = np.zeros((n_samples, len(classes)), dtype=np.float32)
    soft[np.arange(n_samples), idx] = 1.0
    return soft, classes


class TaCNNClassifier(ClassifierMixin, BaseEstimator):
    """Two-stream skeleton classifier with the fit/predict interface."""

    def __init__(self, n_cag=10, n_vag=6, max_persons=2, dropout=0.5, epochs=800, batch_size=64,
                 lr=1e-3, weight_decay=1e-4, milestones=(650, 730, 770), warmup_epochs=0,
                 mix="skeleton", lam=0.6, alpha=1 / 16, random_state=0, target_train_acc=None):
        self.n_cag = n_cag
        self.n_vag = n_vag
        self.max_persons = max_persons
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.milestones = milestones
        self.warmup_epochs = warmup_epochs
        self.mix = mix
        self.lam = lam
        self.alpha = alpha
        self.random_state = random_state
        self.target_train_acc = target_train_acc

    def fit(self, X, y):
        samples = check_skeletons(X)
        soft, self.classes_ = check_targets(y, len(samples))
        _, c, t, v = samples[0].shape
        seed = int(self.random_state or 0)
        self.config_ = ModelConfig(coords=c, frames=t, joints=v, classes=soft.shape[1],
                                   max_persons=self.max_persons, n_cag=self.n_cag,
                                   n_vag=self.n_vag, dropout=self.dropout)
        self.model_ = TaCNN(self.config_, seed=seed)
        train_cfg = TrainConfig(epochs=self.epochs, base_lr=self.lr, milestones=self.milestones,
                                weight_decay=self.weight_decay, batch_size=self.batch_size,
                                warmup_epochs=self.warmup_epochs, seed=seed,
                                mix=MixPolicy(self.mix, self.lam, self.alpha, seed))
        dataset = [SkeletonSample(str(i), soft[i], s) for i, s in enumerate(samples)]
        result = train_loop(self.model_, dataset, train_cfg, target_train_acc=self.target_train_acc)
        self.history_ = result.metrics
        self.n_features_in_ = c * t * v
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_logits(check_skeletons(X))

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(check_skeletons(X))

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]


class CoordinateScaler(TransformerMixin, BaseEstimator):
    """Scale each coordinate channel by a fixed factor (stateless)."""

    def __init__(self, factors=(1.0, 1.0, 1.0)):
        self.factors = factors

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        if isinstance(X, np.ndarray):
            s = np.asarray(self.factors, dtype=np.float64)
            if X.shape[-3] != s.size:
                raise InputError(f"need {X.shape[-3]} factors, got {s.size}")
            return (X * s.reshape(-1, 1, 1)).astype(X.dtype)
        return [scale_coordinates(s, self.factors) for s in X]


class BoneTransformer(TransformerMixin, BaseEstimator):
    """Replace joint positions with parent-relative bone vectors."""

    def __init__(self, parents=NTU_PARENTS):
        self.parents = parents

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        parents = np.asarray(self.parents)
        if isinstance(X, np.ndarray):
            if X.shape[-1] != parents.size:
                raise InputError(f"parent table has {parents.size} joints, data {X.shape[-1]}")
            return X - X[..., parents]
        return [s.replace(data=s.data - s.data[..., parents]) for s in X]
