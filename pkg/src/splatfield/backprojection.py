"""Aggregate per-view blending weights into per-Gaussian feature vectors.

For Gaussian k, over every texel (x, y) of every view n where k was blended
with weight w = alpha * T:

    numerator_k   = sum  F_2D(x, y, n) * w
    denominator_k = sum  w

Expected mode divides numerator by denominator (a convex combination of the
contributing texel features); accumulated mode keeps the raw numerator.  The
two differ by the positive scalar 1/denominator, so after L2 normalization
they coincide.  Gaussians whose denominator never exceeds ``prune_epsilon``
are zeroed and flagged pruned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .rasterizer import RenderOptions, WeightSink, accumulate_weights
from .scene_io import FeatureMap, FeatureStore, SceneBundle
from .splat_core import GaussianCloud


@dataclass(frozen=True)
class BackprojectionConfig:
    mode: str = "expected"          # "expected" or "accumulated"
    normalize: bool = True          # L2-normalize rows after aggregation
    prune_epsilon: float = 1e-8     # denominator threshold for pruning

    def __post_init__(self):
        if self.mode not in ("expected", "accumulated"):
            raise ValidationError(f"unknown back-projection mode {self.mode!r}")
        if not np.isfinite(self.prune_epsilon) or self.prune_epsilon < 0:
            raise ValidationError("prune_epsilon must be finite and >= 0")


def finalize_sink(sink: WeightSink, config: BackprojectionConfig) -> FeatureStore:
    """Turn accumulated sums into a FeatureStore per the config."""
    if sink.numerator is None:
        raise ValidationError("finalize requires a feature-mode sink")
    pruned = sink.denominator <= config.prune_epsilon
    if config.mode == "expected":
        denom = np.where(pruned, 1.0, sink.denominator)
        rows = sink.numerator / denom[:, None]
    else:
        rows = sink.numerator.copy()
    rows[pruned] = 0.0
    if config.normalize:
        norms = np.linalg.norm(rows, axis=1)
        keep = norms > 1e-12
        rows[keep] /= norms[keep, None]
    return FeatureStore(features=rows.astype(np.float32), pruned=pruned)


def backproject(
    scene: SceneBundle,
    feature_maps: list[FeatureMap],
    config: BackprojectionConfig = BackprojectionConfig(),
    options: RenderOptions = RenderOptions(),
) -> FeatureStore:
    """Single pass over all views, one shared sink, then finalize."""
    if len(feature_maps) != scene.view_count:
        raise ValidationError(
            f"got {len(feature_maps)} feature maps for {scene.view_count} views"
        )
    if not feature_maps:
        raise ValidationError("scene has no views to back-project from")
    dim = feature_maps[0].dim
    for i, fmap in enumerate(feature_maps):
        if fmap.dim != dim:
            raise ValidationError(f"view {i}: feature dimension {fmap.dim} != {dim}")
    sink = WeightSink.for_features(scene.cloud.count, dim)
    for view, fmap in enumerate(feature_maps):
        accumulate_weights(scene, view, fmap, sink, options)
    return finalize_sink(sink, config)


def prune_cloud(
    cloud: GaussianCloud, store: FeatureStore
) -> tuple[GaussianCloud, FeatureStore, np.ndarray]:
    """Drop pruned Gaussians from cloud and store, preserving relative order.

    Returns the filtered pair plus an old->new index map (-1 = removed).
    """
    if store.count != cloud.count:
        raise ValidationError(
            f"store has {store.count} rows for a {cloud.count}-Gaussian cloud"
        )
    keep = np.flatnonzero(~store.pruned)
    index_map = np.full(cloud.count, -1, dtype=np.int64)
    index_map[keep] = np.arange(len(keep))
    return cloud.take(keep), store.take(keep), index_map
