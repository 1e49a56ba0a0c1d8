"""Synthetic scenes with known per-Gaussian object ids.

Used by the test suite and the acceptance harness: disjoint colored blobs on
a ring, orbit cameras, and label/feature maps derived from the scene's own
ground truth.  Also the quickest way to try the CLI without real data.
"""

from __future__ import annotations

import numpy as np

from .rasterizer import RenderOptions, render_features
from .scene_io import FeatureMap, FeatureStore, SceneBundle
from .splat_core import SH_C0, Camera, GaussianCloud


def look_at_camera(
    view: int,
    eye: np.ndarray,
    target: np.ndarray,
    width: int,
    height: int,
    focal: float,
    up=(0.0, 0.0, 1.0),
) -> Camera:
    """Camera at ``eye`` looking at ``target`` (+z forward, +y down in image)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Camera(
        view=view,
        width=width,
        height=height,
        fx=focal,
        fy=focal,
        cx=width / 2.0,
        cy=height / 2.0,
        R=R,
        t=-R @ eye,
    )


def orbit_cameras(
    n_views: int,
    width: int,
    height: int,
    radius: float = 5.0,
    z: float = 1.8,
    focal: float | None = None,
) -> list[Camera]:
    if focal is None:
        focal = 1.1 * width
    cams = []
    for i in range(n_views):
        phi = 2.0 * np.pi * i / n_views
        eye = np.array([radius * np.cos(phi), radius * np.sin(phi), z])
        cams.append(look_at_camera(i, eye, np.zeros(3), width, height, focal))
    return cams


def random_cloud(
    n: int,
    seed: int = 0,
    spread: float = 1.0,
    scale_range: tuple[float, float] = (0.02, 0.12),
) -> GaussianCloud:
    """Random Gaussians in a ball around the origin, SH degree 0."""
    rng = np.random.default_rng(seed)
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    rgb = rng.uniform(0.05, 0.95, size=(n, 3))
    sh = np.zeros((n, 1, 3))
    sh[:, 0, :] = (rgb - 0.5) / SH_C0
    return GaussianCloud(
        positions=rng.normal(scale=spread, size=(n, 3)),
        rotations=quats,
        scales=rng.uniform(*scale_range, size=(n, 3)),
        opacities=rng.uniform(0.2, 0.95, size=n),
        sh_coeffs=sh,
    )


def random_scene(
    n: int,
    seed: int = 0,
    n_views: int = 1,
    width: int = 64,
    height: int = 64,
    background=(0.0, 0.0, 0.0),
) -> SceneBundle:
    cloud = random_cloud(n, seed=seed)
    cams = orbit_cameras(n_views, width, height, radius=4.0, z=1.0, focal=1.4 * width)
    return SceneBundle(cloud=cloud, cameras=cams, background=np.asarray(background))


def blob_scene(
    n_objects: int = 5,
    gaussians_per_object: int = 400,
    seed: int = 0,
    n_views: int = 12,
    width: int = 128,
    height: int = 128,
    blob_sigma: float = 0.22,
    ring_radius: float = 1.3,
) -> tuple[SceneBundle, np.ndarray]:
    """Disjoint opaque blobs on a ring; returns (scene, per-Gaussian object id)."""
    rng = np.random.default_rng(seed)
    n = n_objects * gaussians_per_object
    positions = np.empty((n, 3))
    object_ids = np.repeat(np.arange(n_objects), gaussians_per_object)
    palette = rng.uniform(0.15, 0.85, size=(n_objects, 3))
    for o in range(n_objects):
        phi = 2.0 * np.pi * o / n_objects
        center = np.array([ring_radius * np.cos(phi), ring_radius * np.sin(phi), 0.0])
        rows = slice(o * gaussians_per_object, (o + 1) * gaussians_per_object)
        positions[rows] = center + rng.normal(scale=blob_sigma, size=(gaussians_per_object, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    sh = np.zeros((n, 1, 3))
    sh[:, 0, :] = (palette[object_ids] - 0.5) / SH_C0
    cloud = GaussianCloud(
        positions=positions,
        rotations=quats,
        scales=rng.uniform(0.03, 0.1, size=(n, 3)),
        opacities=rng.uniform(0.55, 0.95, size=n),
        sh_coeffs=sh,
    )
    cams = orbit_cameras(n_views, width, height)
    scene = SceneBundle(cloud=cloud, cameras=cams, background=np.zeros(3))
    return scene, object_ids


def object_label_image(
    scene: SceneBundle,
    object_ids: np.ndarray,
    view: int,
    options: RenderOptions = RenderOptions(),
    min_weight: float = 0.5,
) -> np.ndarray:
    """Ground-truth label image: per pixel, the object carrying the most
    blending weight; -1 where total weight falls below ``min_weight``."""
    n_objects = int(object_ids.max()) + 1
    one_hot = np.eye(n_objects, dtype=np.float32)[object_ids]
    out = render_features(scene, view, FeatureStore(one_hot, np.zeros(len(one_hot), bool)),
                          options)
    labels = np.argmax(out.features, axis=2).astype(np.int64)
    labels[out.weight_sum < min_weight] = -1
    return labels


def one_hot_feature_maps(
    label_images: list[np.ndarray], n_classes: int
) -> list[FeatureMap]:
    """Turn label images into one-hot feature maps (zero rows where unlabeled)."""
    table = np.vstack([np.eye(n_classes, dtype=np.float32),
                       np.zeros((1, n_classes), dtype=np.float32)])
    return [FeatureMap(table[img]) for img in label_images]
