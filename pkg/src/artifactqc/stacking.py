"""Stacked generalization over severity base models.

Base models are anything with ``predict_proba``. Their class probabilities
are laid side by side (model ``i`` owns columns ``[i*C, (i+1)*C)``) and a meta
learner is trained on that matrix.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import joblib
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.ensemble import (
    AdaBoostClassifier,
    GradientBoostingClassifier,
    GradientBoostingRegressor,
    HistGradientBoostingClassifier,
    RandomForestClassifier,
)
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold, cross_val_predict
from sklearn.naive_bayes import GaussianNB
from sklearn.neighbors import KNeighborsClassifier
from sklearn.svm import SVC
from sklearn.tree import DecisionTreeClassifier
from sklearn.utils.validation import check_is_fitted

from .validation import check_probability_blocks

N_CLASSES = 3


class MetaLearnerKind(str, Enum):
    LOGISTIC_REGRESSION = "logistic_regression"
    KNN = "knn"
    SVM = "svm"
    DECISION_TREE = "decision_tree"
    RANDOM_FOREST = "random_forest"
    ADABOOST = "adaboost"
    XGB_CLASSIFIER = "xgb_classifier"
    GB_REGRESSOR = "gb_regressor"
    GB_CLASSIFIER = "gb_classifier"
    GAUSSIAN_NB = "gaussian_nb"


META_KINDS = tuple(MetaLearnerKind)


class BaseOrderMismatch(ValueError):
    pass


class OneVsRestRegressorClassifier(ClassifierMixin, BaseEstimator):
    """Classifier built from one regressor per class fit to one-hot targets; predicts the argmax."""

    def __init__(self, regressor=None):
        self.regressor = regressor

    def fit(self, X, y):
        self.classes_ = np.unique(y)
        base = self.regressor if self.regressor is not None else GradientBoostingRegressor()
        self.estimators_ = [clone(base).fit(X, (y == c).astype(np.float64)) for c in self.classes_]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "estimators_")
        return np.column_stack([e.predict(X) for e in self.estimators_])

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]


def make_meta_learner(kind, seed: int = 0):
    """Unfitted meta learner with fixed conventional hyperparameters."""
    kind = MetaLearnerKind(kind)
    if kind is MetaLearnerKind.LOGISTIC_REGRESSION:
        return LogisticRegression(max_iter=1000)
    if kind is MetaLearnerKind.KNN:
        return KNeighborsClassifier(n_neighbors=5)
    if kind is MetaLearnerKind.SVM:
        return SVC(kernel="rbf", C=1.0, gamma="scale", random_state=seed)
    if kind is MetaLearnerKind.DECISION_TREE:
        return DecisionTreeClassifier(random_state=seed)
    if kind is MetaLearnerKind.RANDOM_FOREST:
        return RandomForestClassifier(n_estimators=100, random_state=seed)
    if kind is MetaLearnerKind.ADABOOST:
        return AdaBoostClassifier(n_estimators=100, random_state=seed)
    if kind is MetaLearnerKind.XGB_CLASSIFIER:
        # Newton-step (gradient + hessian) boosted trees
        return HistGradientBoostingClassifier(max_iter=100, max_depth=3, early_stopping=False, random_state=seed)
    if kind is MetaLearnerKind.GB_REGRESSOR:
        return OneVsRestRegressorClassifier(GradientBoostingRegressor(n_estimators=100, max_depth=3, random_state=seed))
    if kind is MetaLearnerKind.GB_CLASSIFIER:
        return GradientBoostingClassifier(n_estimators=100, max_depth=3, random_state=seed)
    return GaussianNB()


def model_fingerprint(model) -> str:
    fp = getattr(model, "fingerprint", None)
    return fp() if callable(fp) else joblib.hash(model)


@dataclass
class MetaFeatureMatrix:
    features: np.ndarray
    labels: np.ndarray | None
    base_order: tuple[str, ...]
    n_classes: int = N_CLASSES

    @property
    def n_models(self) -> int:
        return self.features.shape[1] // self.n_classes

    def block(self, i: int) -> np.ndarray:
        c = self.n_classes
        return self.features[:, i * c : (i + 1) * c]

    def select(self, model_indices) -> "MetaFeatureMatrix":
        """Columns for a subset of base models, in the given order."""
        cols = np.concatenate([np.arange(i * self.n_classes, (i + 1) * self.n_classes) for i in model_indices])
        return MetaFeatureMatrix(
            self.features[:, cols], self.labels, tuple(self.base_order[i] for i in model_indices), self.n_classes
        )


def make_meta_features(base_models, samples, labels=None, n_classes: int = N_CLASSES) -> MetaFeatureMatrix:
    if not base_models:
        raise ValueError("need at least one base model")
    blocks = [np.asarray(m.predict_proba(samples), dtype=np.float64) for m in base_models]
    features = check_probability_blocks(np.hstack(blocks), n_classes, name="base-model probabilities")
    labels = None if labels is None else np.asarray(labels, dtype=np.int64)
    return MetaFeatureMatrix(features, labels, tuple(model_fingerprint(m) for m in base_models), n_classes)


def out_of_fold_features(base_estimators, X, y, cv: int = 5, seed: int = 0, n_classes: int = N_CLASSES) -> MetaFeatureMatrix:
    """Meta features where each row comes from base models that never saw it.

    Each base estimator is cloned and refit ``cv`` times (stratified folds).
    The fingerprints recorded are those of the estimators as passed in.
    """
    if not base_estimators:
        raise ValueError("need at least one base model")
    folds = StratifiedKFold(n_splits=cv, shuffle=True, random_state=seed)
    blocks = [cross_val_predict(clone(m), X, y, cv=folds, method="predict_proba") for m in base_estimators]
    features = check_probability_blocks(np.hstack(blocks), n_classes, name="out-of-fold probabilities")
    return MetaFeatureMatrix(features, np.asarray(y, dtype=np.int64), tuple(model_fingerprint(m) for m in base_estimators), n_classes)


@dataclass
class MetaModel:
    kind: MetaLearnerKind
    estimator: object
    base_order: tuple[str, ...]
    n_classes: int = N_CLASSES

    def predict(self, features) -> np.ndarray:
        return np.asarray(self.estimator.predict(np.asarray(features)), dtype=np.int64)

    def scores(self, features) -> np.ndarray:
        features = np.asarray(features)
        est = self.estimator
        if hasattr(est, "predict_proba"):
            return est.predict_proba(features)
        return est.decision_function(features)

    def save(self, path: str | Path) -> Path:
        joblib.dump({"kind": self.kind.value, "estimator": self.estimator, "base_order": self.base_order, "n_classes": self.n_classes}, path)
        return Path(path)

    @classmethod
    def load(cls, path: str | Path) -> "MetaModel":
        d = joblib.load(path)
        return cls(MetaLearnerKind(d["kind"]), d["estimator"], tuple(d["base_order"]), d["n_classes"])


def fit_meta_learner(kind, features: MetaFeatureMatrix, seed: int = 0) -> MetaModel:
    if features.labels is None:
        raise ValueError("meta features carry no labels")
    if len(np.unique(features.labels)) < 2:
        raise ValueError("meta learner needs at least two classes in the training labels")
    est = make_meta_learner(kind, seed).fit(features.features, features.labels)
    return MetaModel(MetaLearnerKind(kind), est, features.base_order, features.n_classes)


def stacked_predict(base_models, meta_model: MetaModel, sample) -> tuple[int, np.ndarray]:
    """Class index and meta scores for one sample (a batch of one is added here)."""
    order = tuple(model_fingerprint(m) for m in base_models)
    if order != meta_model.base_order:
        raise BaseOrderMismatch("base models differ from those the meta learner was trained on")
    feats = make_meta_features(base_models, np.asarray(sample)[None], n_classes=meta_model.n_classes)
    return int(meta_model.predict(feats.features)[0]), np.asarray(meta_model.scores(feats.features))[0]


class StackedSeverityClassifier(ClassifierMixin, BaseEstimator):
    """Stacking ensemble with a scikit-learn interface.

    ``cv`` > 1: the meta learner trains on out-of-fold predictions of clones
    of the base estimators; unfitted bases are then fit on all of ``X``.
    ``cv=None``: bases must already be fitted and the meta learner trains on
    their predictions for ``X`` directly.
    """

    def __init__(self, base_models=(), meta_learner="logistic_regression", cv=5, seed=0):
        self.base_models = base_models
        self.meta_learner = meta_learner
        self.cv = cv
        self.seed = seed

    def fit(self, X, y):
        y = np.asarray(y, dtype=np.int64)
        bases = list(self.base_models)
        if not bases:
            raise ValueError("need at least one base model")
        if self.cv:
            fitted = []
            for m in bases:
                try:
                    check_is_fitted(m)
                    fitted.append(m)
                except Exception:
                    fitted.append(clone(m).fit(X, y))
            feats = out_of_fold_features(bases, X, y, self.cv, self.seed)
            feats.base_order = tuple(model_fingerprint(m) for m in fitted)
        else:
            fitted = bases
            feats = make_meta_features(bases, X, y)
        self.bases_ = fitted
        self.classes_ = np.arange(N_CLASSES)
        self.meta_ = fit_meta_learner(self.meta_learner, feats, self.seed)
        return self

    def meta_features(self, X) -> MetaFeatureMatrix:
        check_is_fitted(self, "meta_")
        return make_meta_features(self.bases_, X)

    def predict(self, X):
        return self.meta_.predict(self.meta_features(X).features)

    def decision_scores(self, X):
        return self.meta_.scores(self.meta_features(X).features)

    def predict_proba(self, X):
        """Meta scores mapped onto the probability simplex (softmax for margin-type scores)."""
        s = np.asarray(self.decision_scores(X), dtype=np.float64)
        if s.min() >= 0 and np.allclose(s.sum(axis=1), 1.0, atol=1e-6):
            return s
        e = np.exp(s - s.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)


@dataclass
class ComparisonTable:
    combos: list[tuple[int, ...]]
    kinds: list[MetaLearnerKind]
    accuracy: np.ndarray
    protocol: str = "out_of_fold"
    base_names: list[str] = field(default_factory=list)

    def cell(self, combo_size: int, kind) -> float:
        row = [len(c) for c in self.combos].index(combo_size)
        return float(self.accuracy[row, self.kinds.index(MetaLearnerKind(kind))])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["models", "combination"] + [k.value for k in self.kinds])
        for combo, row in zip(self.combos, self.accuracy):
            w.writerow([f"top_{len(combo)}", " ".join(str(i + 1) for i in combo)] + [f"{a:.6f}" for a in row])
        return buf.getvalue()


def run_stacking_comparison(
    ranked_bases,
    meta_train,
    eval_set,
    kinds=META_KINDS,
    sizes=None,
    protocol: str = "out_of_fold",
    cv: int = 5,
    seed: int = 0,
) -> ComparisonTable:
    """Accuracy of every meta learner on every top-n prefix of ``ranked_bases``.

    ``protocol``:
      ``out_of_fold`` -- meta learners train on out-of-fold predictions over
      ``meta_train`` (bases are cloned and refit per fold) and are scored on
      ``eval_set``.
      ``prefit`` -- meta learners train on the fitted bases' predictions over
      ``meta_train``.
      ``leaky`` -- meta learners train and are scored on ``eval_set`` itself.
    Prefix size 1 is allowed.
    """
    k = len(ranked_bases)
    sizes = list(range(2, k + 1)) if sizes is None else list(sizes)
    if not sizes or max(sizes) > k or min(sizes) < 1:
        raise ValueError(f"combination sizes {sizes} not available with {k} base models")
    X_eval, y_eval = eval_set
    eval_feats = make_meta_features(ranked_bases, X_eval, y_eval)
    if protocol == "leaky":
        train_feats = eval_feats
    elif protocol == "prefit":
        train_feats = make_meta_features(ranked_bases, *meta_train)
    elif protocol == "out_of_fold":
        train_feats = out_of_fold_features(ranked_bases, meta_train[0], meta_train[1], cv, seed)
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    kinds = [MetaLearnerKind(k_) for k_ in kinds]
    combos = [tuple(range(n)) for n in sizes]
    acc = np.zeros((len(combos), len(kinds)))
    y_eval = np.asarray(y_eval, dtype=np.int64)
    for i, combo in enumerate(combos):
        tr, ev = train_feats.select(combo), eval_feats.select(combo)
        for j, kind in enumerate(kinds):
            meta = fit_meta_learner(kind, tr, seed)
            acc[i, j] = float(np.mean(meta.predict(ev.features) == y_eval))
    names = [getattr(b, "backbone", type(b).__name__) for b in ranked_bases]
    return ComparisonTable(combos, kinds, acc, protocol, names)
