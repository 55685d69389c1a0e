"""Pre-aggregation update filtering: PCA projection plus majority density clustering.

Client updates (deltas from the current global model) are flattened, projected
to a low-dimensional space, and clustered with HDBSCAN. The largest cluster,
which must hold a majority of clients, becomes the aggregation set; everyone
else is excluded for the round. Filtering is stateless across rounds.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.cluster import HDBSCAN

DEFAULT_PROJECTION_DIM = 32


@dataclass
class UpdateVector:
    """One client's flattened update."""

    client_id: int
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).ravel()


@dataclass
class FilterResult:
    """Outcome of one round of filtering."""

    selected: list[int]
    cluster_labels: dict[int, int]
    projection_dim: int
    degenerate: bool = False
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "selected": sorted(self.selected),
            "cluster_labels": {str(k): int(v) for k, v in sorted(self.cluster_labels.items())},
            "projection_dim": self.projection_dim,
            "degenerate": self.degenerate,
            "flags": list(self.flags),
        }


def pca_project(vectors: np.ndarray, target_dim: int) -> np.ndarray:
    """Project row vectors onto their top principal components.

    Fitted on the given vectors only. Deterministic: components are
    sign-fixed so each one's largest-magnitude entry is positive.
    Zero-variance input yields all-zero projections with a warning.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("expected a (n, d) matrix")
    n, d = X.shape
    if n < 2:
        raise ValueError("need at least two vectors to fit a projection")
    k = min(target_dim, n - 1, d)
    if k < 1:
        raise ValueError(f"cannot project to {target_dim} dimensions")
    centered = X - X.mean(axis=0)
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    if singular[0] <= 1e-12 * max(n, d):
        warnings.warn("zero-variance update vectors; projection is all zeros")
        return np.zeros((n, k))
    components = vt[:k].copy()
    for i in range(k):
        j = int(np.argmax(np.abs(components[i])))
        if components[i, j] < 0:
            components[i] = -components[i]
    return centered @ components.T


class MajorityClusterFilter(BaseEstimator):
    """Density-clustering filter over projected client updates.

    sklearn-style estimator: ``fit(X)`` exposes ``labels_`` (HDBSCAN labels,
    -1 for outliers), ``selected_`` (row indices of the majority cluster) and
    ``degenerate_``. The minimum cluster size defaults to a strict majority
    of the submitted clients, so whenever clustering succeeds the selected
    set covers more than half of them; if no such cluster exists the filter
    degenerates to selecting everyone, preserving liveness.

    Parameters
    ----------
    projection_dim : target PCA dimension (capped at n - 1).
    min_cluster_size : HDBSCAN minimum cluster size; None means majority.
    min_samples : HDBSCAN density parameter.
    """

    def __init__(self, projection_dim: int = DEFAULT_PROJECTION_DIM,
                 min_cluster_size: int | None = None, min_samples: int = 1):
        self.projection_dim = projection_dim
        self.min_cluster_size = min_cluster_size
        self.min_samples = min_samples

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if not np.isfinite(X).all():
            raise ValueError("update vectors contain non-finite entries")
        n = X.shape[0]
        majority = n // 2 + 1
        if n < 3:
            self.labels_ = np.zeros(n, dtype=int)
            self.selected_ = np.arange(n)
            self.degenerate_ = True
            self.projection_dim_ = 0
            return self

        projected = pca_project(X, self.projection_dim)
        self.projection_dim_ = projected.shape[1]
        mcs = self.min_cluster_size or majority
        clusterer = HDBSCAN(
            min_cluster_size=mcs,
            min_samples=self.min_samples,
            allow_single_cluster=True,
        )
        labels = clusterer.fit_predict(projected)
        self.labels_ = labels

        clustered = labels[labels >= 0]
        if clustered.size == 0:
            self.selected_ = np.arange(n)
            self.degenerate_ = True
            return self
        counts = np.bincount(clustered)
        best = int(np.argmax(counts))
        if counts[best] < majority:
            # No cluster holds a majority; fall back to everyone.
            self.selected_ = np.arange(n)
            self.degenerate_ = True
            return self
        self.selected_ = np.flatnonzero(labels == best)
        self.degenerate_ = False
        return self

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_


def filter_updates(
    updates: list[UpdateVector],
    projection_dim: int = DEFAULT_PROJECTION_DIM,
    min_cluster_size: int | None = None,
    min_samples: int = 1,
) -> FilterResult:
    """Run one round of majority-cluster filtering over client update vectors.

    Updates are sorted by client id before fitting, so the outcome does not
    depend on submission order. Raises on ragged or non-finite vectors.
    """
    if not updates:
        raise ValueError("no updates submitted")
    updates = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in updates]
    lengths = {u.vector.size for u in updates}
    if len(lengths) != 1:
        raise ValueError(f"update vectors differ in length: {sorted(lengths)}")
    for u in updates:
        if not np.isfinite(u.vector).all():
            raise ValueError(f"client {u.client_id} submitted non-finite values")

    X = np.stack([u.vector for u in updates])
    est = MajorityClusterFilter(
        projection_dim=projection_dim,
        min_cluster_size=min_cluster_size,
        min_samples=min_samples,
    ).fit(X)

    flags = ["filter_degenerate"] if est.degenerate_ else []
    return FilterResult(
        selected=[ids[i] for i in est.selected_],
        cluster_labels={ids[i]: int(est.labels_[i]) for i in range(len(ids))},
        projection_dim=int(est.projection_dim_),
        degenerate=bool(est.degenerate_),
        flags=flags,
    )
