"""Mahalanobis K-NN classification and clean-error evaluation.

Neighbor search is exact brute force. Distance ties break toward the
smaller training index; voting ties (possible only with more than two
classes) break toward the smallest class id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .metric import MetricFactor, pairwise_sq_dists


@dataclass(frozen=True)
class KnnModel:
    train: Dataset
    metric: MetricFactor
    k_neighbors: int
    train_transformed: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.k_neighbors < 1 or self.k_neighbors % 2 == 0:
            raise ValueError(
                f"K must be an odd positive integer, got {self.k_neighbors}")
        if self.k_neighbors > self.train.num_instances:
            raise ValueError(
                f"K={self.k_neighbors} exceeds training size "
                f"{self.train.num_instances}")
        if self.metric.dim != self.train.num_features:
            raise ValueError(
                f"metric dim {self.metric.dim} does not match feature "
                f"dim {self.train.num_features}")
        Xg = self.metric.transform(self.train.features)
        Xg.setflags(write=False)
        object.__setattr__(self, "train_transformed", Xg)


def _vote(model: KnnModel, dists: np.ndarray, exclude: int | None) -> int:
    if exclude is not None:
        dists = dists.copy()
        dists[exclude] = np.inf
    k = model.k_neighbors
    n = dists.shape[0] - (1 if exclude is not None else 0)
    if k > n:
        raise ValueError(f"K={k} exceeds available instances {n}")
    # smallest K; stable sort ties toward the smaller training index
    part = np.argpartition(dists, k - 1)[:k]
    order = part[np.lexsort((part, dists[part]))]
    counts = np.bincount(model.train.labels[order],
                         minlength=model.train.num_classes)
    return int(np.argmax(counts))


def predict(model: KnnModel, x: np.ndarray,
            exclude: int | None = None) -> int:
    """Majority label among the K training instances nearest to x."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.train.num_features,):
        raise ValueError(
            f"query shape {x.shape} does not match feature dim "
            f"{model.train.num_features}")
    xg = model.metric.transform(x[None, :])
    dists = pairwise_sq_dists(model.train_transformed, xg)[:, 0]
    return _vote(model, dists, exclude)


def predict_batch(model: KnnModel, X: np.ndarray,
                  leave_one_out: bool = False,
                  block: int = 256) -> np.ndarray:
    """Predict many queries at once; with leave_one_out, query i is
    assumed to be training instance i and is excluded from its own
    neighbor search."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.empty(X.shape[0], dtype=np.int64)
    Qg = model.metric.transform(X)
    for start in range(0, X.shape[0], block):
        stop = min(start + block, X.shape[0])
        d = pairwise_sq_dists(Qg[start:stop], model.train_transformed)
        for i in range(stop - start):
            exclude = start + i if leave_one_out else None
            out[start + i] = _vote(model, d[i], exclude)
    return out


def clean_error(model: KnnModel, test: Dataset,
                leave_one_out: bool = False) -> float:
    """Fraction of test instances the model misclassifies."""
    if test.num_instances == 0:
        raise ValueError("empty test set")
    if leave_one_out:
        if test.features.shape != model.train.features.shape or \
                not np.array_equal(test.features, model.train.features):
            raise ValueError(
                "leave-one-out evaluation requires the training set itself")
        if model.k_neighbors > model.train.num_instances - 1:
            raise ValueError("K exceeds available instances after exclusion")
    preds = predict_batch(model, test.features, leave_one_out=leave_one_out)
    return float(np.mean(preds != test.labels))
