"""Identity encoding: per-object code vectors back-projected into the scene.

Orthogonal codes are one-hot rows (capacity limited by the embedding
dimension).  Contrastive codes are trained jointly with a linear-softmax
decoder under

    L = CrossEntropy(softmax(E W^T + b), y) + || E E^T - I ||_F

which separates class embeddings well beyond the orthogonal capacity.  The
training inputs are the embedding rows themselves, one sample per class per
step, optimized by full-batch gradient descent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backprojection import BackprojectionConfig, finalize_sink
from .errors import CapacityError, DivergenceError, ParseError, ValidationError
from .rasterizer import RenderOptions, WeightSink, accumulate_weights
from .scene_io import FeatureMap, FeatureStore, SceneBundle

UNLABELED = -1


@dataclass
class IdentityCodebook:
    """Class embeddings plus a linear decoder (logits = f @ W^T + b)."""

    embeddings: np.ndarray        # (N_c, D)
    decoder_weights: np.ndarray   # (N_c, D)
    decoder_bias: np.ndarray      # (N_c,)
    final_loss: float | None = None

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        self.decoder_weights = np.ascontiguousarray(self.decoder_weights, dtype=np.float64)
        self.decoder_bias = np.ascontiguousarray(self.decoder_bias, dtype=np.float64)
        nc, dim = self.embeddings.shape
        if self.decoder_weights.shape != (nc, dim) or self.decoder_bias.shape != (nc,):
            raise ValidationError("decoder shapes must match the embedding matrix")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValidationError("embeddings must be finite")

    @property
    def n_classes(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.decoder_weights.T + self.decoder_bias

    def save(self, path) -> None:
        doc = {
            "n_classes": self.n_classes,
            "dim": self.dim,
            "E": self.embeddings.tolist(),
            "W_dec": self.decoder_weights.tolist(),
            "b": self.decoder_bias.tolist(),
        }
        if self.final_loss is not None:
            doc["final_loss"] = self.final_loss
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "IdentityCodebook":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
            return cls(
                embeddings=np.asarray(doc["E"], dtype=np.float64),
                decoder_weights=np.asarray(doc["W_dec"], dtype=np.float64),
                decoder_bias=np.asarray(doc["b"], dtype=np.float64),
                final_loss=doc.get("final_loss"),
            )
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ParseError(f"{path.name}: malformed codebook ({e})") from None


@dataclass
class LabeledView:
    """Per-pixel object labels for one view; -1 = unlabeled."""

    view: int
    labels: np.ndarray            # (H, W) ints

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise ValidationError("label image must be H x W")


def orthogonal_codes(n_classes: int, dim: int) -> IdentityCodebook:
    """One-hot codes; the decoder is the identity map (argmax coordinate)."""
    if n_classes < 1:
        raise ValidationError("need at least one class")
    if n_classes > dim:
        raise CapacityError(
            f"{n_classes} orthogonal codes do not fit in {dim} dimensions"
        )
    eye = np.eye(dim)[:n_classes]
    return IdentityCodebook(
        embeddings=eye.copy(),
        decoder_weights=eye.copy(),
        decoder_bias=np.zeros(n_classes),
    )


def orthogonality_loss(embeddings: np.ndarray) -> tuple[float, np.ndarray]:
    """Frobenius norm of E E^T - I and its gradient with respect to E."""
    e = np.asarray(embeddings, dtype=np.float64)
    a = e @ e.T - np.eye(len(e))
    norm = float(np.linalg.norm(a))
    if norm < 1e-30:
        return norm, np.zeros_like(e)
    return norm, (2.0 / norm) * (a @ e)


def train_contrastive(
    n_classes: int,
    dim: int,
    epochs: int = 4000,
    lr: float = 0.05,
    seed: int = 0,
) -> IdentityCodebook:
    """Jointly fit embeddings and decoder by full-batch gradient descent.

    Deterministic for a fixed seed.  Raises on non-finite loss.
    """
    if n_classes < 2 or dim < 2:
        raise ValidationError("contrastive encoding needs n_classes >= 2 and dim >= 2")
    rng = np.random.default_rng(seed)
    e = rng.normal(scale=0.1, size=(n_classes, dim))
    w = rng.normal(scale=0.1, size=(n_classes, dim))
    b = np.zeros(n_classes)
    eye = np.eye(n_classes)

    loss = np.inf
    for _ in range(epochs):
        logits = e @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        exp = np.exp(logits)
        probs = exp / exp.sum(axis=1, keepdims=True)
        ce = float(-np.mean(np.log(np.maximum(np.diag(probs), 1e-300))))
        orth, d_e_orth = orthogonality_loss(e)
        loss = ce + orth
        if not np.isfinite(loss):
            raise DivergenceError(
                f"training diverged (loss={loss}); try a smaller learning rate"
            )
        d_logits = (probs - eye) / n_classes
        d_w = d_logits.T @ e
        d_b = d_logits.sum(axis=0)
        d_e = d_logits @ w + d_e_orth
        e -= lr * d_e
        w -= lr * d_w
        b -= lr * d_b

    return IdentityCodebook(
        embeddings=e, decoder_weights=w, decoder_bias=b, final_loss=float(loss)
    )


def encode_scene(
    scene: SceneBundle,
    labeled_views: list[LabeledView],
    codebook: IdentityCodebook,
    config: BackprojectionConfig = BackprojectionConfig(),
    options: RenderOptions = RenderOptions(),
) -> FeatureStore:
    """Back-project identity codes through the labeled views only.

    Each label image becomes a feature map holding the class embedding at
    labeled pixels and zero elsewhere, then runs the standard weight
    accumulation; unlabeled views simply do not contribute.
    """
    if not labeled_views:
        raise ValidationError("need at least one labeled view")
    sink = WeightSink.for_features(scene.cloud.count, codebook.dim)
    zero = np.zeros(codebook.dim, dtype=np.float32)
    table = np.vstack([codebook.embeddings.astype(np.float32), zero[None, :]])
    for lv in labeled_views:
        if not 0 <= lv.view < scene.view_count:
            raise ValidationError(f"labeled view {lv.view} out of range")
        if lv.labels.max() >= codebook.n_classes:
            raise ValidationError(
                f"view {lv.view}: label {int(lv.labels.max())} exceeds the "
                f"{codebook.n_classes}-class codebook"
            )
        if lv.labels.min() < UNLABELED:
            raise ValidationError(f"view {lv.view}: labels below -1")
        fmap = FeatureMap(table[lv.labels])  # -1 indexes the zero row
        accumulate_weights(scene, lv.view, fmap, sink, options)
    return finalize_sink(sink, config)


def classify_features(
    features: np.ndarray, codebook: IdentityCodebook, reject_threshold: float = 0.1
) -> np.ndarray:
    """Argmax decoder label per row; rows with norm below the threshold get -1."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape[-1] != codebook.dim:
        raise ValidationError(
            f"feature dimension {feats.shape[-1]} != codebook dimension {codebook.dim}"
        )
    flat = feats.reshape(-1, codebook.dim)
    labels = np.argmax(codebook.logits(flat), axis=1).astype(np.int64)
    labels[np.linalg.norm(flat, axis=1) < reject_threshold] = UNLABELED
    return labels.reshape(feats.shape[:-1])


def classify_pixels(
    rendered_features: np.ndarray, codebook: IdentityCodebook, reject_threshold: float = 0.1
) -> np.ndarray:
    """Per-pixel group prediction over an H x W x D rendered feature image."""
    feats = np.asarray(rendered_features)
    if feats.ndim != 3:
        raise ValidationError("rendered features must be H x W x D")
    return classify_features(feats, codebook, reject_threshold)


def grouping_miou(
    pred_labels: np.ndarray, truth_labels: np.ndarray, class_ids=None
) -> float:
    """Mean per-class IoU; classes absent from both images are skipped."""
    pred = np.asarray(pred_labels, dtype=np.int64)
    truth = np.asarray(truth_labels, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValidationError(f"label shapes differ: {pred.shape} vs {truth.shape}")
    if class_ids is None:
        present = np.union1d(np.unique(pred), np.unique(truth))
        class_ids = [int(c) for c in present if c != UNLABELED]
    ious = []
    for cid in class_ids:
        p = pred == cid
        t = truth == cid
        union = int(np.count_nonzero(p | t))
        if union == 0:
            continue
        ious.append(np.count_nonzero(p & t) / union)
    return float(np.mean(ious)) if ious else 1.0
