"""Similarity queries over back-projected features: 3D/2D segmentation,
scene edits, kNN affordance transfer, and mask metrics.

A Gaussian is a member of the 3D mask when its cosine similarity to the
positive prompt exceeds the threshold and, when negative prompts are given
with the argmax rule on, also beats every negative.  Zero-norm features
(pruned rows in particular) score 0 and never join masks at theta >= 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .scene_io import FeatureStore
from .splat_core import GaussianCloud

BACKGROUND_LABEL = -1
_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class QuerySpec:
    """Positive embedding, optional negatives, threshold, argmax toggle."""

    positive: np.ndarray
    negatives: tuple[np.ndarray, ...] = ()
    theta: float = 0.0
    require_argmax: bool = True

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positive, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "positive", pos)
        negs = tuple(
            np.ascontiguousarray(n, dtype=np.float64).reshape(-1) for n in self.negatives
        )
        object.__setattr__(self, "negatives", negs)
        if not np.any(pos):
            raise ValidationError("positive embedding must not be all-zero")
        for i, n in enumerate(negs):
            if n.shape != pos.shape:
                raise ValidationError(
                    f"negative {i} has dimension {n.size}, positive has {pos.size}"
                )
        if not -1.0 <= self.theta <= 1.0:
            raise ValidationError("theta must lie in [-1, 1]")

    @property
    def dim(self) -> int:
        return self.positive.size


@dataclass
class SegmentationResult:
    indices: np.ndarray            # sorted ascending member indices
    scores: np.ndarray             # (N,) similarity to the positive prompt
    spec: QuerySpec

    @property
    def member_count(self) -> int:
        return len(self.indices)


@dataclass
class AffordanceSource:
    """Labeled exemplar features for kNN transfer."""

    features: np.ndarray           # (E, D)
    labels: np.ndarray             # (E,) small ints in [0, L)
    label_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) == 0:
            raise ValidationError("affordance source needs at least one exemplar row")
        if self.labels.shape != (len(self.features),):
            raise ValidationError("one label per exemplar required")
        if self.labels.min() < 0:
            raise ValidationError("exemplar labels must be >= 0")
        if not self.label_names:
            self.label_names = [f"label_{i}" for i in range(int(self.labels.max()) + 1)]
        present = set(self.labels.tolist())
        for i in range(len(self.label_names)):
            if i not in present:
                raise ValidationError(f"declared label {i} has no exemplar")

    @property
    def label_count(self) -> int:
        return len(self.label_names)


def similarity(f: np.ndarray, q: np.ndarray) -> float:
    """Cosine similarity; 0 when either vector has norm < 1e-12."""
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if f.shape != q.shape:
        raise ValidationError(f"dimension mismatch: {f.size} vs {q.size}")
    nf = np.linalg.norm(f)
    nq = np.linalg.norm(q)
    if nf < _NORM_FLOOR or nq < _NORM_FLOOR:
        return 0.0
    return float(f @ q / (nf * nq))


def _cosine_rows(features: np.ndarray, norms: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Cosine of every row against q, zero-norm rows scoring 0."""
    nq = np.linalg.norm(q)
    if nq < _NORM_FLOOR:
        return np.zeros(len(features))
    dots = features @ q.astype(features.dtype)
    return np.where(norms < _NORM_FLOOR, 0.0, dots / (np.maximum(norms, _NORM_FLOOR) * nq))


def _membership(features, norms, pruned, spec: QuerySpec):
    if features.shape[1] != spec.dim:
        raise ValidationError(
            f"store dimension {features.shape[1]} != query dimension {spec.dim}"
        )
    scores = _cosine_rows(features, norms, spec.positive)
    members = scores > spec.theta
    if pruned is not None:
        members &= ~pruned
    if spec.negatives and spec.require_argmax:
        best_neg = np.full(len(features), -np.inf)
        for q in spec.negatives:
            np.maximum(best_neg, _cosine_rows(features, norms, q), out=best_neg)
        members &= scores > best_neg
    return members, scores


def segment_3d(store: FeatureStore, spec: QuerySpec) -> SegmentationResult:
    """Member set per the similarity predicate, scores recorded for all rows."""
    if store.count == 0:
        raise ValidationError("cannot query an empty feature store")
    members, scores = _membership(store.features, store.row_norms, store.pruned, spec)
    return SegmentationResult(indices=np.flatnonzero(members), scores=scores, spec=spec)


def segment_2d(rendered_features: np.ndarray, spec: QuerySpec) -> np.ndarray:
    """Binary mask over an H x W x D rendered feature image (same predicate)."""
    feats = np.asarray(rendered_features, dtype=np.float64)
    if feats.ndim != 3:
        raise ValidationError("rendered features must be H x W x D")
    h, w, d = feats.shape
    flat = feats.reshape(h * w, d)
    norms = np.linalg.norm(flat, axis=1)
    members, _ = _membership(flat, norms, None, spec)
    return members.reshape(h, w)


def similarity_image(rendered_features: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-pixel cosine similarity to q (for heatmaps)."""
    feats = np.asarray(rendered_features, dtype=np.float64)
    h, w, d = feats.shape
    flat = feats.reshape(h * w, d)
    norms = np.linalg.norm(flat, axis=1)
    return _cosine_rows(flat, norms, np.asarray(q, dtype=np.float64)).reshape(h, w)


def _edit(cloud, store, keep_indices):
    index_map = np.full(cloud.count, -1, dtype=np.int64)
    index_map[keep_indices] = np.arange(len(keep_indices))
    return cloud.take(keep_indices), store.take(keep_indices), index_map


def extract(
    cloud: GaussianCloud, store: FeatureStore, result: SegmentationResult
) -> tuple[GaussianCloud, FeatureStore, np.ndarray]:
    """Keep exactly the member set; returns (cloud, store, old->new map)."""
    _check_indices(cloud, result)
    return _edit(cloud, store, result.indices)


def delete(
    cloud: GaussianCloud, store: FeatureStore, result: SegmentationResult
) -> tuple[GaussianCloud, FeatureStore, np.ndarray]:
    """Keep exactly the complement of the member set."""
    _check_indices(cloud, result)
    keep = np.setdiff1d(np.arange(cloud.count), result.indices)
    return _edit(cloud, store, keep)


def _check_indices(cloud, result):
    if len(result.indices) and (
        result.indices.min() < 0 or result.indices.max() >= cloud.count
    ):
        raise ValidationError("segmentation indices out of range for this cloud")


def knn_transfer(
    store: FeatureStore,
    source: AffordanceSource,
    k: int = 5,
    background_threshold: float = 0.0,
) -> np.ndarray:
    """Label every Gaussian by majority vote of its k most similar exemplars.

    Vote ties break by higher summed similarity, then lower label index.
    Pruned Gaussians, and ones whose best similarity falls below
    ``background_threshold``, get the background label -1.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k > len(source.features):
        raise ValidationError(f"k={k} exceeds the {len(source.features)} exemplars")
    if store.dim != source.features.shape[1]:
        raise ValidationError(
            f"store dimension {store.dim} != exemplar dimension {source.features.shape[1]}"
        )
    ex = source.features
    ex_norms = np.linalg.norm(ex, axis=1)
    if np.any(ex_norms < _NORM_FLOOR):
        raise ValidationError("exemplar features must be nonzero")
    exn = ex / ex_norms[:, None]
    f = store.features.astype(np.float64)
    norms = store.row_norms.astype(np.float64)
    sims = (f / np.maximum(norms, _NORM_FLOOR)[:, None]) @ exn.T
    sims[norms < _NORM_FLOOR] = 0.0

    # Top-k by similarity, ties by ascending exemplar index (stable sort).
    top = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    rows = np.arange(store.count)[:, None]
    top_sims = sims[rows, top]
    top_labels = source.labels[top]

    n_labels = source.label_count
    counts = np.zeros((store.count, n_labels), dtype=np.int64)
    sums = np.zeros((store.count, n_labels))
    for j in range(k):
        np.add.at(counts, (rows[:, 0], top_labels[:, j]), 1)
        np.add.at(sums, (rows[:, 0], top_labels[:, j]), top_sims[:, j])

    best = np.zeros(store.count, dtype=np.int64)
    best_count = counts[:, 0].copy()
    best_sum = sums[:, 0].copy()
    for lbl in range(1, n_labels):
        better = (counts[:, lbl] > best_count) | (
            (counts[:, lbl] == best_count) & (sums[:, lbl] > best_sum)
        )
        best[better] = lbl
        best_count = np.where(better, counts[:, lbl], best_count)
        best_sum = np.where(better, sums[:, lbl], best_sum)

    labels = best
    background = store.pruned | (sims.max(axis=1) < background_threshold)
    labels[background] = BACKGROUND_LABEL
    return labels


def mask_metrics(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """(IoU, recall) of two binary masks; empty denominators count as 1."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValidationError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    inter = int(np.count_nonzero(pred & truth))
    union = int(np.count_nonzero(pred | truth))
    t = int(np.count_nonzero(truth))
    iou = inter / union if union else 1.0
    recall = inter / t if t else 1.0
    return iou, recall
