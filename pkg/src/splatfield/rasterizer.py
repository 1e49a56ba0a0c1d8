"""Tile-based forward rasterization with per-Gaussian blending-weight capture.

Per pixel, projected Gaussians are blended front-to-back in non-decreasing
camera depth (ties broken by ascending Gaussian index):

    alpha = min(0.99, opacity * exp(-0.5 * d^T cov2d^-1 d))
    C    += c * alpha * T;   T *= 1 - alpha

Gaussians with alpha < 1/255 are skipped; blending stops before the Gaussian
that would push T below the termination threshold (0 disables termination).
The blending weight alpha * T of every composited Gaussian is what the
back-projection accumulates -- it equals dC/dc for that Gaussian, so the
forward pass captures exactly the gradient-derived influence.

Tiles are binned with a per-Gaussian radius reaching the alpha = 1/255
iso-contour (not just 3 sigma), so the tiled image is identical to a
brute-force blend for any tile size.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np
from numba import njit, prange

from .errors import ValidationError
from .scene_io import FeatureMap, FeatureStore, SceneBundle
from .splat_core import (
    ALPHA_CLAMP,
    DEFAULT_LOWPASS,
    DEFAULT_NEAR,
    SKIP_ALPHA,
    Camera,
    GaussianCloud,
    ProjectedBatch,
    project_batch,
)


def default_threads() -> int:
    env = os.environ.get("SPLATFIELD_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class RenderOptions:
    tile_size: int = 16
    near: float = DEFAULT_NEAR
    lowpass: float = DEFAULT_LOWPASS
    term_threshold: float = 1e-4   # 0 disables early termination
    threads: int | None = None     # None: SPLATFIELD_THREADS or cpu count

    def resolved_threads(self) -> int:
        return self.threads if self.threads else default_threads()


@dataclass
class RenderOutput:
    """Composited images for one view.

    ``weight_sum`` is the per-pixel sum of blending weights accumulated during
    compositing; it equals 1 - t_final up to float rounding (telescoping).
    ``fragments`` is populated by the brute-force path only: a structured
    array of every composited (pixel, Gaussian) contribution.
    """

    t_final: np.ndarray                  # (H, W)
    weight_sum: np.ndarray               # (H, W)
    color: np.ndarray | None = None      # (H, W, 3)
    features: np.ndarray | None = None   # (H, W, D)
    fragments: np.ndarray | None = None


@dataclass
class WeightSink:
    """Per-Gaussian accumulators for blending weights (and weighted features).

    Numerators/denominators are float64: they sum millions of texel
    contributions and would lose digits in single precision.
    """

    denominator: np.ndarray              # (N,) float64
    numerator: np.ndarray | None = None  # (N, D) float64; None = scalar mode

    @classmethod
    def scalar(cls, count: int) -> "WeightSink":
        return cls(denominator=np.zeros(count))

    @classmethod
    def for_features(cls, count: int, dim: int) -> "WeightSink":
        return cls(denominator=np.zeros(count), numerator=np.zeros((count, dim)))

    @property
    def count(self) -> int:
        return len(self.denominator)

    @property
    def dim(self) -> int:
        return 0 if self.numerator is None else self.numerator.shape[1]


FRAGMENT_DTYPE = np.dtype(
    [("y", np.int32), ("x", np.int32), ("index", np.int64),
     ("alpha", np.float64), ("weight", np.float64)]
)


# ---------------------------------------------------------------------------
# Tile binning
# ---------------------------------------------------------------------------

def _tile_lists(batch: ProjectedBatch, width: int, height: int, tile_size: int):
    """Sorted (tile, depth, index) pair lists -> per-tile ranges.

    Returns (starts, ends, order) where order holds compact Gaussian indices
    grouped by tile, each group sorted by (depth, source index).
    """
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    n_tiles = ntx * nty
    if len(batch) == 0:
        z = np.zeros(n_tiles + 1, dtype=np.int64)
        return z[:-1], z[1:], np.empty(0, dtype=np.int64), ntx, nty

    u = batch.means2d[:, 0]
    v = batch.means2d[:, 1]
    r = batch.bin_radius
    hit = (r > 0) & (u + r >= 0) & (u - r <= width) & (v + r >= 0) & (v - r <= height)
    x0 = np.clip(np.floor((u - r) / tile_size).astype(np.int64), 0, ntx - 1)
    x1 = np.clip(np.floor((u + r) / tile_size).astype(np.int64), 0, ntx - 1)
    y0 = np.clip(np.floor((v - r) / tile_size).astype(np.int64), 0, nty - 1)
    y1 = np.clip(np.floor((v + r) / tile_size).astype(np.int64), 0, nty - 1)
    spans_x = np.where(hit, x1 - x0 + 1, 0)
    spans_y = np.where(hit, y1 - y0 + 1, 0)
    counts = spans_x * spans_y
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])

    gauss = np.repeat(np.arange(len(batch), dtype=np.int64), counts)
    pos = np.arange(total, dtype=np.int64) - offsets[gauss]
    tx = x0[gauss] + pos % np.maximum(spans_x[gauss], 1)
    ty = y0[gauss] + pos // np.maximum(spans_x[gauss], 1)
    tile = ty * ntx + tx

    order = np.lexsort((gauss, batch.depths[gauss], tile))
    tile_sorted = tile[order]
    gauss_sorted = gauss[order]
    starts = np.searchsorted(tile_sorted, np.arange(n_tiles), side="left")
    ends = np.searchsorted(tile_sorted, np.arange(n_tiles), side="right")
    return starts, ends, gauss_sorted, ntx, nty


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

@njit(cache=True, parallel=True)
def _blend_kernel(starts, ends, order, means2d, conics, opacities, max_mahal,
                  channels, width, height, tile_size, ntx, term_threshold,
                  out_img, out_t, out_wsum):
    n_tiles = len(starts)
    nch = channels.shape[1]
    for tile in prange(n_tiles):
        tx = tile % ntx
        ty = tile // ntx
        xa = tx * tile_size
        ya = ty * tile_size
        xb = min(xa + tile_size, width)
        yb = min(ya + tile_size, height)
        lo = starts[tile]
        hi = ends[tile]
        for py in range(ya, yb):
            sy = py + 0.5
            for px in range(xa, xb):
                sx = px + 0.5
                t = 1.0
                wsum = 0.0
                for c in range(nch):
                    out_img[py, px, c] = 0.0
                for i in range(lo, hi):
                    g = order[i]
                    dx = sx - means2d[g, 0]
                    dy = sy - means2d[g, 1]
                    m = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy \
                        + conics[g, 2] * dy * dy
                    if m < 0.0 or m > max_mahal[g]:
                        continue
                    alpha = opacities[g] * np.exp(-0.5 * m)
                    if alpha > ALPHA_CLAMP:
                        alpha = ALPHA_CLAMP
                    if alpha < SKIP_ALPHA:
                        continue
                    test_t = t * (1.0 - alpha)
                    if test_t < term_threshold:
                        break
                    w = alpha * t
                    for c in range(nch):
                        out_img[py, px, c] += w * channels[g, c]
                    wsum += w
                    t = test_t
                out_t[py, px] = t
                out_wsum[py, px] = wsum


@njit(cache=True, parallel=True)
def _accumulate_kernel(group_bounds, starts, ends, order, source, means2d, conics,
                       opacities, max_mahal, fmap, has_features, width, height,
                       tile_size, ntx, term_threshold, num_part, den_part):
    n_groups = len(group_bounds) - 1
    dim = fmap.shape[2]
    for grp in prange(n_groups):
        for tile in range(group_bounds[grp], group_bounds[grp + 1]):
            tx = tile % ntx
            ty = tile // ntx
            xa = tx * tile_size
            ya = ty * tile_size
            xb = min(xa + tile_size, width)
            yb = min(ya + tile_size, height)
            lo = starts[tile]
            hi = ends[tile]
            for py in range(ya, yb):
                sy = py + 0.5
                for px in range(xa, xb):
                    sx = px + 0.5
                    t = 1.0
                    for i in range(lo, hi):
                        g = order[i]
                        dx = sx - means2d[g, 0]
                        dy = sy - means2d[g, 1]
                        m = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy \
                            + conics[g, 2] * dy * dy
                        if m < 0.0 or m > max_mahal[g]:
                            continue
                        alpha = opacities[g] * np.exp(-0.5 * m)
                        if alpha > ALPHA_CLAMP:
                            alpha = ALPHA_CLAMP
                        if alpha < SKIP_ALPHA:
                            continue
                        test_t = t * (1.0 - alpha)
                        if test_t < term_threshold:
                            break
                        w = alpha * t
                        k = source[g]
                        den_part[grp, k] += w
                        if has_features:
                            for c in range(dim):
                                num_part[grp, k, c] += w * fmap[py, px, c]
                        t = test_t


_EMPTY_FMAP = np.zeros((1, 1, 1), dtype=np.float32)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def _check_view(scene: SceneBundle, view: int) -> Camera:
    if not 0 <= view < scene.view_count:
        raise ValidationError(f"view {view} out of range [0, {scene.view_count})")
    return scene.cameras[view]


def _run_blend(cloud: GaussianCloud, camera: Camera, channels_of, opts: RenderOptions):
    """Project, bin, and blend; ``channels_of(batch)`` picks per-Gaussian rows."""
    batch = project_batch(cloud, camera, near=opts.near, lowpass=opts.lowpass)
    starts, ends, order, ntx, _ = _tile_lists(batch, camera.width, camera.height, opts.tile_size)
    channels = np.ascontiguousarray(channels_of(batch))
    h, w = camera.height, camera.width
    img = np.zeros((h, w, channels.shape[1]))
    t_final = np.ones((h, w))
    wsum = np.zeros((h, w))
    _blend_kernel(
        starts, ends, order, batch.means2d, batch.conics, batch.opacities,
        batch.max_mahal, channels, w, h, opts.tile_size, ntx,
        float(opts.term_threshold), img, t_final, wsum,
    )
    return img, t_final, wsum


def render(
    scene: SceneBundle,
    view: int,
    options: RenderOptions = RenderOptions(),
    override_colors: np.ndarray | None = None,
) -> RenderOutput:
    """Composite the view's color image (SH colors unless overridden)."""
    camera = _check_view(scene, view)
    if override_colors is not None:
        override_colors = np.asarray(override_colors, dtype=np.float64)
        if override_colors.shape != (scene.cloud.count, 3):
            raise ValidationError("override_colors must be (N, 3)")
        channels_of = lambda b: override_colors[b.source]
    else:
        channels_of = lambda b: b.rgb
    img, t_final, wsum = _run_blend(scene.cloud, camera, channels_of, options)
    img += t_final[:, :, None] * scene.background
    return RenderOutput(color=img, t_final=t_final, weight_sum=wsum)


def render_features(
    scene: SceneBundle,
    view: int,
    store: FeatureStore,
    options: RenderOptions = RenderOptions(),
) -> RenderOutput:
    """Composite the store's feature rows instead of colors (background = 0)."""
    camera = _check_view(scene, view)
    if store.count != scene.cloud.count:
        raise ValidationError(
            f"feature store has {store.count} rows for a {scene.cloud.count}-Gaussian scene"
        )
    feats = store.features.astype(np.float64)
    img, t_final, wsum = _run_blend(scene.cloud, camera, lambda b: feats[b.source], options)
    return RenderOutput(features=img, t_final=t_final, weight_sum=wsum)


def accumulate_weights(
    scene: SceneBundle,
    view: int,
    feature_map: FeatureMap | None,
    sink: WeightSink,
    options: RenderOptions = RenderOptions(),
) -> WeightSink:
    """Add this view's blending weights (and weighted features) into the sink.

    The pass runs at the feature map's resolution: intrinsics are rescaled so
    every texel of the map is one blending sample and no feature resampling
    happens.  Skip/termination rules match ``render`` exactly, so accumulated
    weights equal rendering weights.
    """
    camera = _check_view(scene, view)
    n = scene.cloud.count
    if sink.count != n:
        raise ValidationError(f"sink has {sink.count} rows for a {n}-Gaussian scene")
    if feature_map is not None:
        if sink.numerator is None:
            raise ValidationError("feature map given but sink is scalar mode")
        if sink.dim != feature_map.dim:
            raise ValidationError(
                f"sink dimension {sink.dim} != feature map dimension {feature_map.dim}"
            )
        camera = camera.rescaled(feature_map.width, feature_map.height)
        fmap = feature_map.values
        has_features = True
    else:
        if sink.numerator is not None:
            raise ValidationError("feature sink requires a feature map")
        fmap = _EMPTY_FMAP
        has_features = False

    batch = project_batch(scene.cloud, camera, near=options.near, lowpass=options.lowpass)
    starts, ends, order, ntx, _ = _tile_lists(
        batch, camera.width, camera.height, options.tile_size
    )
    n_tiles = len(starts)
    n_groups = min(options.resolved_threads(), max(n_tiles, 1))
    group_bounds = np.linspace(0, n_tiles, n_groups + 1).astype(np.int64)

    den_part = np.zeros((n_groups, n))
    num_part = np.zeros((n_groups, n, sink.dim if has_features else 1))
    _accumulate_kernel(
        group_bounds, starts, ends, order, batch.source, batch.means2d, batch.conics,
        batch.opacities, batch.max_mahal, fmap, has_features,
        camera.width, camera.height, options.tile_size, ntx,
        float(options.term_threshold), num_part, den_part,
    )
    sink.denominator += den_part.sum(axis=0)
    if has_features:
        sink.numerator += num_part.sum(axis=0)
    return sink


def oracle_render(
    scene: SceneBundle,
    view: int,
    options: RenderOptions | None = None,
    override_colors: np.ndarray | None = None,
    store: FeatureStore | None = None,
) -> RenderOutput:
    """Reference renderer: no tiling, full depth sort, every Gaussian at every
    pixel, early termination off by default.  Intended for small scenes.

    Logs every composited contribution into ``fragments``.
    """
    if options is None:
        options = RenderOptions(term_threshold=0.0)
    camera = _check_view(scene, view)
    cloud = scene.cloud
    batch = project_batch(cloud, camera, near=options.near, lowpass=options.lowpass)
    order = np.lexsort((batch.source, batch.depths))

    if store is not None:
        if store.count != cloud.count:
            raise ValidationError("feature store size mismatch")
        channels = store.features.astype(np.float64)[batch.source]
        background = np.zeros(store.dim)
    elif override_colors is not None:
        channels = np.asarray(override_colors, dtype=np.float64)[batch.source]
        background = scene.background
    else:
        channels = batch.rgb
        background = scene.background

    h, w = camera.height, camera.width
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    img = np.zeros((h, w, channels.shape[1]))
    t = np.ones((h, w))
    wsum = np.zeros((h, w))
    done = np.zeros((h, w), dtype=bool)
    frag_rows = []

    for g in order:
        dx = gx - batch.means2d[g, 0]
        dy = gy - batch.means2d[g, 1]
        m = batch.conics[g, 0] * dx * dx + 2.0 * batch.conics[g, 1] * dx * dy \
            + batch.conics[g, 2] * dy * dy
        alpha = np.where(
            (m >= 0) & (m <= batch.max_mahal[g]),
            np.minimum(batch.opacities[g] * np.exp(-0.5 * np.minimum(m, 700.0)), ALPHA_CLAMP),
            0.0,
        )
        live = ~done & (alpha >= SKIP_ALPHA)
        test_t = t * (1.0 - alpha)
        terminating = live & (test_t < options.term_threshold)
        done |= terminating
        blend = live & ~terminating
        if not blend.any():
            continue
        weight = np.where(blend, alpha * t, 0.0)
        img += weight[:, :, None] * channels[g]
        wsum += weight
        t = np.where(blend, test_t, t)
        by, bx = np.nonzero(blend)
        rows = np.empty(len(by), dtype=FRAGMENT_DTYPE)
        rows["y"] = by
        rows["x"] = bx
        rows["index"] = batch.source[g]
        rows["alpha"] = alpha[by, bx]
        rows["weight"] = weight[by, bx]
        frag_rows.append(rows)

    img += t[:, :, None] * background
    fragments = (
        np.concatenate(frag_rows) if frag_rows else np.empty(0, dtype=FRAGMENT_DTYPE)
    )
    out = RenderOutput(t_final=t, weight_sum=wsum, fragments=fragments)
    if store is not None:
        out.features = img
    else:
        out.color = img
    return out


def oracle_options(base: RenderOptions = RenderOptions()) -> RenderOptions:
    """Options for comparing the tile path against the oracle (termination off)."""
    return replace(base, term_threshold=0.0)
