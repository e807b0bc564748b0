"""Report-difficulty features and correctness-probability scoring.

Inference posteriors tend to saturate near one in the extreme multiclass
regime, so the emitted confidence comes from a separate binary probability
model trained on seven per-report features against known correctness.
"""

from __future__ import annotations

import math
import pickle
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ScoringError, TrainingError

FEATURE_NAMES = (
    "n_distinct_families",
    "family_entropy",
    "detect_ratio",
    "fam_per_detection",
    "fam_per_scanned",
    "top_posterior",
    "posterior_entropy",
)

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ConfidenceFeatures:
    n_distinct_families: float
    family_entropy: float
    detect_ratio: float
    fam_per_detection: float
    fam_per_scanned: float
    top_posterior: float
    posterior_entropy: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in FEATURE_NAMES])

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in FEATURE_NAMES}


def _entropy_bits(counts: Iterable[int]) -> float:
    counts = [c for c in counts if c > 0]
    total = sum(counts)
    if total == 0:
        return 0.0
    return -sum((c / total) * math.log2(c / total) for c in counts)


def extract_features(report, votes: Mapping[str, str], posterior_row=None) -> ConfidenceFeatures:
    """Compute the seven difficulty features for one report.

    `votes` maps annotator -> family (cluster-deduplicated); `posterior_row`
    is a (families, probs) pair or None for family-less reports, in which
    case the posterior features are zero.
    """
    tally = Counter(votes.values())
    n_distinct = len(tally)
    family_entropy = _entropy_bits(tally.values())

    detected = report.num_detected
    scanned = report.num_scanned
    n_family_votes = len(votes)
    if scanned > 0:
        detect_ratio = min(1.0, detected / scanned)
        fam_per_scanned = min(1.0, n_family_votes / scanned)
    else:
        detect_ratio = fam_per_scanned = 0.0
    fam_per_detection = min(1.0, n_family_votes / detected) if detected > 0 else 0.0

    if posterior_row is not None:
        _families, probs = posterior_row
        probs = np.asarray(probs, dtype=float)
        top_posterior = float(probs.max()) if probs.size else 0.0
        positive = probs[probs > 0]
        posterior_entropy = float(-(positive * np.log2(positive)).sum()) if positive.size else 0.0
    else:
        top_posterior = 0.0
        posterior_entropy = 0.0

    return ConfidenceFeatures(
        n_distinct_families=float(n_distinct),
        family_entropy=family_entropy,
        detect_ratio=detect_ratio,
        fam_per_detection=fam_per_detection,
        fam_per_scanned=fam_per_scanned,
        top_posterior=top_posterior,
        posterior_entropy=posterior_entropy,
    )


@dataclass
class DifficultyModel:
    """A fitted binary probability estimator plus its feature ordering."""

    estimator: object
    feature_names: Tuple[str, ...]
    metadata: dict

    def predict_proba_correct(self, matrix: np.ndarray) -> np.ndarray:
        classes = list(self.estimator.classes_)
        return self.estimator.predict_proba(matrix)[:, classes.index(True)]


@dataclass(frozen=True)
class FoldReport:
    fold: int
    accuracy: float
    brier: float


def train_model(
    examples: Sequence[Tuple[ConfidenceFeatures, bool]],
    folds: int = 5,
    seed: int = 0,
    estimator=None,
):
    """Fit a gradient-boosted difficulty model with k-fold cross-validation.

    Returns (model, fold_reports). The fold reports carry held-out accuracy
    and Brier score per fold; the returned model is refit on all examples.
    """
    if folds < 2:
        raise ConfigError(f"cross-validation needs at least 2 folds, got {folds}")
    if len(examples) < 10 * folds:
        raise TrainingError(
            f"need at least {10 * folds} examples for {folds}-fold training, got {len(examples)}"
        )
    features = np.vstack([ex.as_array() for ex, _correct in examples])
    labels = np.array([bool(correct) for _ex, correct in examples])
    if labels.all() or not labels.any():
        raise TrainingError("training set contains a single class")

    from sklearn.ensemble import GradientBoostingClassifier
    from sklearn.model_selection import StratifiedKFold

    def make_estimator():
        if estimator is not None:
            from sklearn.base import clone

            return clone(estimator)
        return GradientBoostingClassifier(random_state=seed)

    reports = []
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    for fold, (train_idx, test_idx) in enumerate(splitter.split(features, labels)):
        clf = make_estimator().fit(features[train_idx], labels[train_idx])
        classes = list(clf.classes_)
        proba = clf.predict_proba(features[test_idx])[:, classes.index(True)]
        predicted = proba >= 0.5
        accuracy = float((predicted == labels[test_idx]).mean())
        brier = float(((proba - labels[test_idx].astype(float)) ** 2).mean())
        reports.append(FoldReport(fold=fold, accuracy=accuracy, brier=brier))

    final = make_estimator().fit(features, labels)
    model = DifficultyModel(
        estimator=final,
        feature_names=FEATURE_NAMES,
        metadata={
            "n_examples": len(examples),
            "folds": folds,
            "seed": seed,
            "cv_accuracy": [r.accuracy for r in reports],
            "cv_brier": [r.brier for r in reports],
        },
    )
    return model, reports


def score(model: DifficultyModel, features: ConfidenceFeatures) -> float:
    """Probability that the inferred family is correct, in [0, 1]."""
    vector = features.as_array()
    if vector.shape[0] != len(model.feature_names):
        raise ScoringError(
            f"feature vector has {vector.shape[0]} entries, model expects {len(model.feature_names)}"
        )
    return float(model.predict_proba_correct(vector.reshape(1, -1))[0])


def score_many(model: DifficultyModel, features: Sequence[ConfidenceFeatures]) -> np.ndarray:
    if not features:
        return np.zeros(0)
    matrix = np.vstack([f.as_array() for f in features])
    if matrix.shape[1] != len(model.feature_names):
        raise ScoringError(
            f"feature vectors have {matrix.shape[1]} entries, model expects {len(model.feature_names)}"
        )
    return model.predict_proba_correct(matrix)


def save_model(model: DifficultyModel, path) -> None:
    payload = {
        "version": MODEL_FORMAT_VERSION,
        "feature_names": model.feature_names,
        "estimator": model.estimator,
        "metadata": model.metadata,
    }
    with open(path, "wb") as fd:
        pickle.dump(payload, fd)


def load_model(path) -> DifficultyModel:
    with open(path, "rb") as fd:
        payload = pickle.load(fd)
    if payload.get("version") != MODEL_FORMAT_VERSION:
        raise ConfigError(f"unsupported model format version in {path}")
    return DifficultyModel(
        estimator=payload["estimator"],
        feature_names=tuple(payload["feature_names"]),
        metadata=payload.get("metadata", {}),
    )


@dataclass(frozen=True)
class FilterSummary:
    total: int
    retained: int
    retained_fraction: float
    accuracy: Optional[float]


def threshold_filter(outputs, tau: float, truth=None, matcher=None):
    """Retain outputs with confidence >= tau.

    `outputs` is any sequence with .confidence, .family, and .file_hash
    attributes. When `truth` (hash -> family) is given, the summary reports
    accuracy on the retained set using `matcher` (defaults to case-folded
    equality).
    """
    outputs = list(outputs)
    retained = [o for o in outputs if o.confidence >= tau]
    accuracy = None
    if truth:
        if matcher is None:
            matcher = lambda pred, true: (pred or "").lower() == (true or "").lower()
        scored = [o for o in retained if o.file_hash in truth]
        if scored:
            correct = sum(1 for o in scored if matcher(o.family, truth[o.file_hash]))
            accuracy = correct / len(scored)
    summary = FilterSummary(
        total=len(outputs),
        retained=len(retained),
        retained_fraction=(len(retained) / len(outputs)) if outputs else 0.0,
        accuracy=accuracy,
    )
    return retained, summary
