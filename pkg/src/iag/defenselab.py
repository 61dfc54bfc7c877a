"""Feature-space poison detectors: Spectral Signature and a Gram-statistic
Beatrix variant, as sklearn-style outlier estimators, plus the
filter-retrain-rescore loop used to test them against the attack."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_array, check_is_fitted

log = logging.getLogger(__name__)


@dataclass
class FeatureMatrix:
    values: np.ndarray
    ids: list[str]
    layer: str = "visual_mean"

    def __post_init__(self):
        if self.values.shape[0] != len(self.ids):
            raise ValueError("one row id per feature row required")
        if self.values.shape[0] < 2:
            raise ValueError("need at least 2 feature rows")
        if not np.isfinite(self.values).all():
            raise ValueError("non-finite feature entries")


@dataclass
class DetectionReport:
    scores: np.ndarray
    flagged: list[str]
    removal_fraction: float | None = None
    precision: float | None = None
    recall: float | None = None
    ids: list[str] = field(default_factory=list)

    def with_truth(self, poisoned_ids) -> "DetectionReport":
        truth = set(poisoned_ids)
        hit = len(truth.intersection(self.flagged))
        self.precision = hit / len(self.flagged) if self.flagged else None
        self.recall = hit / len(truth) if truth else None
        return self

    def to_json(self) -> dict:
        return {
            "scores": dict(zip(self.ids, map(float, self.scores))),
            "flagged": list(self.flagged),
            "removal_fraction": self.removal_fraction,
            "precision": self.precision,
            "recall": self.recall,
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")


def extract_features(models, batcher, records, *, with_trigger: Sequence[bool] | None = None,
                     batch_size: int = 100) -> FeatureMatrix:
    """Mean-pooled final-block visual tokens for each record.

    Rows flagged in ``with_trigger`` are fed the generator's poisoned image,
    as they would appear in the released training set.
    """
    victim = models.victim
    with_trigger = [r.is_poisoned for r in records] if with_trigger is None else list(with_trigger)
    rows = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            flags = with_trigger[start:start + batch_size]
            idx = torch.tensor([batcher.index[r.scene_id] for r in chunk], dtype=torch.long)
            images = batcher.images[idx].clone()
            p = [i for i, f in enumerate(flags) if f]
            if p:
                targets = [batcher.tokens(chunk[i].attack_target_desc) for i in p]
                poisoned, _ = models.poison(images[p], targets)
                images[p] = poisoned
            query = victim.encode_query([batcher.query_tokens(r) for r in chunk])
            rows.append(victim.visual_features(images, query).double().numpy())
    ids = [f"{r.scene_id}" for r in records]
    return FeatureMatrix(np.concatenate(rows), ids)


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])


class SpectralSignature(OutlierMixin, BaseEstimator):
    """Score rows by their squared projection on the top singular direction of
    the centred features and flag the highest ``removal_fraction``."""

    def __init__(self, removal_fraction: float = 0.05):
        self.removal_fraction = removal_fraction

    def fit(self, X, y=None):
        if not 0 < self.removal_fraction < 1:
            raise ValueError("removal_fraction must lie in (0, 1)")
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        self.mean_ = X.mean(axis=0)
        centred = X - self.mean_
        _, s, vt = np.linalg.svd(centred, full_matrices=False)
        self.rank_zero_ = not (s.size and s[0] > 1e-12 * max(1.0, np.abs(X).max()))
        if self.rank_zero_:
            log.warning("feature matrix has rank 0; nothing to flag")
            self.direction_ = np.zeros(X.shape[1])
        else:
            self.direction_ = vt[0]
        self.scores_ = self.score_samples(X)
        k = 0 if self.rank_zero_ else int(np.floor(self.removal_fraction * X.shape[0] + 0.5))
        self.flagged_ = _top_k(self.scores_, k)
        return self

    def score_samples(self, X):
        check_is_fitted(self, "direction_")
        X = check_array(X, dtype=np.float64)
        return ((X - self.mean_) @ self.direction_) ** 2

    def predict(self, X=None):
        """-1 for flagged rows of the fitted data, 1 otherwise."""
        check_is_fitted(self, "flagged_")
        out = np.ones(self.scores_.shape[0], dtype=int)
        out[self.flagged_] = -1
        return out

    def fit_predict(self, X, y=None):
        return self.fit(X).predict()


def gram_features(X: np.ndarray, order: int) -> np.ndarray:
    """Per-sample Gram statistics of orders 1..``order``.

    ``X`` is (N, d) or (N, T, d). For each power p the signed power
    ``sign(F)|F|^p`` is formed, its (d, d) Gram matrix over the T rows is
    averaged, the signed p-th root taken, and the upper triangle kept; the
    orders are concatenated. With p = 1 the diagonal is each coordinate's
    second moment.
    """
    F = X[:, None, :] if X.ndim == 2 else X
    n, t, d = F.shape
    iu = np.triu_indices(d)
    parts = []
    for p in range(1, order + 1):
        Fp = np.sign(F) * np.abs(F) ** p
        G = np.einsum("nti,ntj->nij", Fp, Fp) / t
        G = np.sign(G) * np.abs(G) ** (1.0 / p)
        parts.append(G[:, iu[0], iu[1]])
    return np.concatenate(parts, axis=1)


def _mad(x, axis=0):
    med = np.median(x, axis=axis)
    return med, np.median(np.abs(x - np.expand_dims(med, axis)), axis=axis)


class Beatrix(OutlierMixin, BaseEstimator):
    """Class-conditional Gram-matrix anomaly detector.

    Within each class, every Gram entry is compared with the class median in
    robust standard deviations (1.4826 * MAD). A sample's score is the mean
    of those distances over all entries; samples scoring above
    ``mad_threshold`` are flagged. Classes with a single member are skipped.
    """

    def __init__(self, order: int = 3, mad_threshold: float = 3.5, eps: float = 1e-12):
        self.order = order
        self.mad_threshold = mad_threshold
        self.eps = eps

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim not in (2, 3) or X.shape[0] < 2:
            raise ValueError("Beatrix needs an (N, d) or (N, T, d) feature array with N >= 2")
        if not np.isfinite(X).all():
            raise ValueError("non-finite features")
        if self.order < 1:
            raise ValueError("order must be >= 1")
        y = np.asarray(y)
        if y.shape[0] != X.shape[0]:
            raise ValueError("one label per sample required")
        G = gram_features(X, self.order)
        self.deviation_ = np.zeros(X.shape[0])
        self.scores_ = np.zeros(X.shape[0])
        self.skipped_classes_ = []
        for cls in _stable_unique(y):
            members = np.flatnonzero(y == cls)
            if members.size < 2:
                log.warning("class %r has a single sample; excluded from statistics", cls)
                self.skipped_classes_.append(cls)
                continue
            med, mad = _mad(G[members])
            dev = (np.abs(G[members] - med) / (1.4826 * mad + self.eps)).mean(axis=1)
            self.deviation_[members] = dev
            self.scores_[members] = dev
        self.flagged_ = np.flatnonzero(self.scores_ > self.mad_threshold)
        return self

    def predict(self, X=None):
        check_is_fitted(self, "flagged_")
        out = np.ones(self.scores_.shape[0], dtype=int)
        out[self.flagged_] = -1
        return out

    def fit_predict(self, X, y=None):
        return self.fit(X, y).predict()


def _stable_unique(y):
    seen, out = set(), []
    for v in y.tolist():
        if v not in seen:
            seen.add(v)
            out.append(v)
    return out


def detection_report(detector, features: FeatureMatrix, *, labels=None,
                     poisoned_ids=None) -> DetectionReport:
    if labels is None:
        detector.fit(features.values)
    else:
        detector.fit(features.values, labels)
    flagged = [features.ids[i] for i in detector.flagged_]
    rep = DetectionReport(
        detector.scores_, flagged, getattr(detector, "removal_fraction", None), ids=list(features.ids)
    )
    return rep.with_truth(poisoned_ids) if poisoned_ids is not None else rep


def defend_and_rescore(train_ids: Sequence[str], flagged: Sequence[str], before,
                       retrain_and_score: Callable[[list[str]], object]):
    """Drop flagged training scenes, retrain from scratch, rescore.

    An empty flag set returns ``before`` unchanged: the retrain would see the
    identical data and seed. Flagging every scene is an error.
    """
    flagged = set(flagged)
    kept = [i for i in train_ids if i not in flagged]
    if not kept:
        raise ValueError("detector flagged the whole training set")
    if not flagged:
        return before, before
    return before, retrain_and_score(kept)
